#pragma once

#include <cstdint>

// Arithmetic inner loops used by the tensor ops. Every kernel has a scalar
// reference implementation and (on x86-64) an AVX2 variant selected at
// runtime. The two variants are bitwise-equivalent: the AVX2 code keeps the
// per-element accumulation order of the scalar code and uses separate
// multiply/add (no FMA contraction), so dispatch never changes results.
namespace mutr::kern {

enum class Backend { kScalar, kAvx2 };

bool avx2_supported();
Backend active_backend();
void set_backend(Backend b);  // throws ConfigError if unsupported on this CPU

// C[m x n] = (accumulate ? C : 0) + A[m x k] * B[k x n], row-major contiguous.
template <class T>
void gemm(const T* a, const T* b, T* c, std::int64_t m, std::int64_t n,
          std::int64_t k, bool accumulate);

template <class T>
void add(const T* a, const T* b, T* out, std::int64_t n);
template <class T>
void mul(const T* a, const T* b, T* out, std::int64_t n);
// y += alpha * x
template <class T>
void axpy(T alpha, const T* x, T* y, std::int64_t n);
template <class T>
void scale(const T* x, T alpha, T* out, std::int64_t n);
template <class T>
void relu_fwd(const T* x, T* out, std::int64_t n);
// dx += dy where x > 0
template <class T>
void relu_bwd(const T* x, const T* dy, T* dx, std::int64_t n);

// Direct entry points for the equivalence tests.
namespace scalar {
template <class T>
void gemm(const T* a, const T* b, T* c, std::int64_t m, std::int64_t n,
          std::int64_t k, bool accumulate);
template <class T>
void add(const T* a, const T* b, T* out, std::int64_t n);
template <class T>
void mul(const T* a, const T* b, T* out, std::int64_t n);
template <class T>
void axpy(T alpha, const T* x, T* y, std::int64_t n);
template <class T>
void scale(const T* x, T alpha, T* out, std::int64_t n);
template <class T>
void relu_fwd(const T* x, T* out, std::int64_t n);
template <class T>
void relu_bwd(const T* x, const T* dy, T* dx, std::int64_t n);
}  // namespace scalar

#if defined(MUTR_HAVE_AVX2)
namespace avx2 {
template <class T>
void gemm(const T* a, const T* b, T* c, std::int64_t m, std::int64_t n,
          std::int64_t k, bool accumulate);
template <class T>
void add(const T* a, const T* b, T* out, std::int64_t n);
template <class T>
void mul(const T* a, const T* b, T* out, std::int64_t n);
template <class T>
void axpy(T alpha, const T* x, T* y, std::int64_t n);
template <class T>
void scale(const T* x, T alpha, T* out, std::int64_t n);
template <class T>
void relu_fwd(const T* x, T* out, std::int64_t n);
template <class T>
void relu_bwd(const T* x, const T* dy, T* dx, std::int64_t n);
}  // namespace avx2
#endif

}  // namespace mutr::kern

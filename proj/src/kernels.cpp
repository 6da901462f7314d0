#include "mutr/kernels.hpp"

#include "mutr/common.hpp"

namespace mutr::kern {

namespace {

Backend detect_backend() {
#if defined(MUTR_HAVE_AVX2)
  if (avx2_supported()) return Backend::kAvx2;
#endif
  return Backend::kScalar;
}

Backend g_backend = detect_backend();

}  // namespace

bool avx2_supported() {
#if defined(MUTR_HAVE_AVX2)
  return __builtin_cpu_supports("avx2") != 0;
#else
  return false;
#endif
}

Backend active_backend() { return g_backend; }

void set_backend(Backend b) {
  if (b == Backend::kAvx2 && !avx2_supported()) {
    throw ConfigError("avx2 backend requested but not supported on this CPU");
  }
  g_backend = b;
}

#if defined(MUTR_HAVE_AVX2)
#define MUTR_DISPATCH(fn, ...)                              \
  if (g_backend == Backend::kAvx2) {                        \
    avx2::fn(__VA_ARGS__);                                  \
  } else {                                                  \
    scalar::fn(__VA_ARGS__);                                \
  }
#else
#define MUTR_DISPATCH(fn, ...) scalar::fn(__VA_ARGS__)
#endif

template <class T>
void gemm(const T* a, const T* b, T* c, std::int64_t m, std::int64_t n,
          std::int64_t k, bool accumulate) {
  MUTR_DISPATCH(gemm, a, b, c, m, n, k, accumulate);
}

template <class T>
void add(const T* a, const T* b, T* out, std::int64_t n) {
  MUTR_DISPATCH(add, a, b, out, n);
}

template <class T>
void mul(const T* a, const T* b, T* out, std::int64_t n) {
  MUTR_DISPATCH(mul, a, b, out, n);
}

template <class T>
void axpy(T alpha, const T* x, T* y, std::int64_t n) {
  MUTR_DISPATCH(axpy, alpha, x, y, n);
}

template <class T>
void scale(const T* x, T alpha, T* out, std::int64_t n) {
  MUTR_DISPATCH(scale, x, alpha, out, n);
}

template <class T>
void relu_fwd(const T* x, T* out, std::int64_t n) {
  MUTR_DISPATCH(relu_fwd, x, out, n);
}

template <class T>
void relu_bwd(const T* x, const T* dy, T* dx, std::int64_t n) {
  MUTR_DISPATCH(relu_bwd, x, dy, dx, n);
}

#undef MUTR_DISPATCH

template void gemm<float>(const float*, const float*, float*, std::int64_t,
                          std::int64_t, std::int64_t, bool);
template void gemm<double>(const double*, const double*, double*, std::int64_t,
                           std::int64_t, std::int64_t, bool);
template void add<float>(const float*, const float*, float*, std::int64_t);
template void add<double>(const double*, const double*, double*, std::int64_t);
template void mul<float>(const float*, const float*, float*, std::int64_t);
template void mul<double>(const double*, const double*, double*, std::int64_t);
template void axpy<float>(float, const float*, float*, std::int64_t);
template void axpy<double>(double, const double*, double*, std::int64_t);
template void scale<float>(const float*, float, float*, std::int64_t);
template void scale<double>(const double*, double, double*, std::int64_t);
template void relu_fwd<float>(const float*, float*, std::int64_t);
template void relu_fwd<double>(const double*, double*, std::int64_t);
template void relu_bwd<float>(const float*, const float*, float*,
                              std::int64_t);
template void relu_bwd<double>(const double*, const double*, double*,
                               std::int64_t);

}  // namespace mutr::kern

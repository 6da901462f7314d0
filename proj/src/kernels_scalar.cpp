#include <cstring>

#include "mutr/kernels.hpp"

namespace mutr::kern::scalar {

// Reference gemm. The j-inner loop keeps each C[i,j] accumulated in k order;
// the AVX2 variant preserves exactly this order per element.
template <class T>
void gemm(const T* a, const T* b, T* c, std::int64_t m, std::int64_t n,
          std::int64_t k, bool accumulate) {
  for (std::int64_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    if (!accumulate) std::memset(crow, 0, sizeof(T) * static_cast<size_t>(n));
    const T* arow = a + i * k;
    for (std::int64_t kk = 0; kk < k; ++kk) {
      const T av = arow[kk];
      const T* brow = b + kk * n;
      for (std::int64_t j = 0; j < n; ++j) {
        crow[j] += av * brow[j];
      }
    }
  }
}

template <class T>
void add(const T* a, const T* b, T* out, std::int64_t n) {
  for (std::int64_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

template <class T>
void mul(const T* a, const T* b, T* out, std::int64_t n) {
  for (std::int64_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

template <class T>
void axpy(T alpha, const T* x, T* y, std::int64_t n) {
  for (std::int64_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <class T>
void scale(const T* x, T alpha, T* out, std::int64_t n) {
  for (std::int64_t i = 0; i < n; ++i) out[i] = x[i] * alpha;
}

template <class T>
void relu_fwd(const T* x, T* out, std::int64_t n) {
  for (std::int64_t i = 0; i < n; ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
}

template <class T>
void relu_bwd(const T* x, const T* dy, T* dx, std::int64_t n) {
  for (std::int64_t i = 0; i < n; ++i) {
    if (x[i] > T(0)) dx[i] += dy[i];
  }
}

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
template void relu_bwd<float>(const float*, const float*, float*, std::int64_t);
template void relu_bwd<double>(const double*, const double*, double*,
                               std::int64_t);

}  // namespace mutr::kern::scalar

// AVX2 kernel variants. Built with -mavx2 only (no -mfma): multiplies and
// adds stay separate so results are bitwise-identical to the scalar
// reference, which the equivalence tests assert.
#if defined(MUTR_HAVE_AVX2)

#include <immintrin.h>

#include <cstring>

#include "mutr/kernels.hpp"

namespace mutr::kern::avx2 {

namespace {

// f32 gemm: rows of C in pairs, columns in tiles of 4 vectors (32 floats).
// Each C[i,j] accumulates over k in the same order as the scalar kernel.
void gemm_f32(const float* a, const float* b, float* c, std::int64_t m,
              std::int64_t n, std::int64_t k, bool accumulate) {
  const std::int64_t jt = n - n % 32;
  std::int64_t i = 0;
  for (; i + 2 <= m; i += 2) {
    const float* a0 = a + i * k;
    const float* a1 = a0 + k;
    float* c0 = c + i * n;
    float* c1 = c0 + n;
    for (std::int64_t j = 0; j < jt; j += 32) {
      __m256 r00, r01, r02, r03, r10, r11, r12, r13;
      if (accumulate) {
        r00 = _mm256_loadu_ps(c0 + j);
        r01 = _mm256_loadu_ps(c0 + j + 8);
        r02 = _mm256_loadu_ps(c0 + j + 16);
        r03 = _mm256_loadu_ps(c0 + j + 24);
        r10 = _mm256_loadu_ps(c1 + j);
        r11 = _mm256_loadu_ps(c1 + j + 8);
        r12 = _mm256_loadu_ps(c1 + j + 16);
        r13 = _mm256_loadu_ps(c1 + j + 24);
      } else {
        r00 = r01 = r02 = r03 = _mm256_setzero_ps();
        r10 = r11 = r12 = r13 = _mm256_setzero_ps();
      }
      for (std::int64_t kk = 0; kk < k; ++kk) {
        const float* brow = b + kk * n + j;
        const __m256 b0 = _mm256_loadu_ps(brow);
        const __m256 b1 = _mm256_loadu_ps(brow + 8);
        const __m256 b2 = _mm256_loadu_ps(brow + 16);
        const __m256 b3 = _mm256_loadu_ps(brow + 24);
        const __m256 v0 = _mm256_set1_ps(a0[kk]);
        r00 = _mm256_add_ps(r00, _mm256_mul_ps(v0, b0));
        r01 = _mm256_add_ps(r01, _mm256_mul_ps(v0, b1));
        r02 = _mm256_add_ps(r02, _mm256_mul_ps(v0, b2));
        r03 = _mm256_add_ps(r03, _mm256_mul_ps(v0, b3));
        const __m256 v1 = _mm256_set1_ps(a1[kk]);
        r10 = _mm256_add_ps(r10, _mm256_mul_ps(v1, b0));
        r11 = _mm256_add_ps(r11, _mm256_mul_ps(v1, b1));
        r12 = _mm256_add_ps(r12, _mm256_mul_ps(v1, b2));
        r13 = _mm256_add_ps(r13, _mm256_mul_ps(v1, b3));
      }
      _mm256_storeu_ps(c0 + j, r00);
      _mm256_storeu_ps(c0 + j + 8, r01);
      _mm256_storeu_ps(c0 + j + 16, r02);
      _mm256_storeu_ps(c0 + j + 24, r03);
      _mm256_storeu_ps(c1 + j, r10);
      _mm256_storeu_ps(c1 + j + 8, r11);
      _mm256_storeu_ps(c1 + j + 16, r12);
      _mm256_storeu_ps(c1 + j + 24, r13);
    }
    for (std::int64_t j = jt; j < n; ++j) {
      float s0 = accumulate ? c0[j] : 0.0f;
      float s1 = accumulate ? c1[j] : 0.0f;
      for (std::int64_t kk = 0; kk < k; ++kk) {
        s0 += a0[kk] * b[kk * n + j];
        s1 += a1[kk] * b[kk * n + j];
      }
      c0[j] = s0;
      c1[j] = s1;
    }
  }
  for (; i < m; ++i) {
    const float* arow = a + i * k;
    float* crow = c + i * n;
    const std::int64_t j8 = n - n % 8;
    for (std::int64_t j = 0; j < j8; j += 8) {
      __m256 r = accumulate ? _mm256_loadu_ps(crow + j) : _mm256_setzero_ps();
      for (std::int64_t kk = 0; kk < k; ++kk) {
        const __m256 bv = _mm256_loadu_ps(b + kk * n + j);
        r = _mm256_add_ps(r, _mm256_mul_ps(_mm256_set1_ps(arow[kk]), bv));
      }
      _mm256_storeu_ps(crow + j, r);
    }
    for (std::int64_t j = j8; j < n; ++j) {
      float s = accumulate ? crow[j] : 0.0f;
      for (std::int64_t kk = 0; kk < k; ++kk) s += arow[kk] * b[kk * n + j];
      crow[j] = s;
    }
  }
}

void gemm_f64(const double* a, const double* b, double* c, std::int64_t m,
              std::int64_t n, std::int64_t k, bool accumulate) {
  const std::int64_t jt = n - n % 16;
  std::int64_t i = 0;
  for (; i + 2 <= m; i += 2) {
    const double* a0 = a + i * k;
    const double* a1 = a0 + k;
    double* c0 = c + i * n;
    double* c1 = c0 + n;
    for (std::int64_t j = 0; j < jt; j += 16) {
      __m256d r00, r01, r02, r03, r10, r11, r12, r13;
      if (accumulate) {
        r00 = _mm256_loadu_pd(c0 + j);
        r01 = _mm256_loadu_pd(c0 + j + 4);
        r02 = _mm256_loadu_pd(c0 + j + 8);
        r03 = _mm256_loadu_pd(c0 + j + 12);
        r10 = _mm256_loadu_pd(c1 + j);
        r11 = _mm256_loadu_pd(c1 + j + 4);
        r12 = _mm256_loadu_pd(c1 + j + 8);
        r13 = _mm256_loadu_pd(c1 + j + 12);
      } else {
        r00 = r01 = r02 = r03 = _mm256_setzero_pd();
        r10 = r11 = r12 = r13 = _mm256_setzero_pd();
      }
      for (std::int64_t kk = 0; kk < k; ++kk) {
        const double* brow = b + kk * n + j;
        const __m256d b0 = _mm256_loadu_pd(brow);
        const __m256d b1 = _mm256_loadu_pd(brow + 4);
        const __m256d b2 = _mm256_loadu_pd(brow + 8);
        const __m256d b3 = _mm256_loadu_pd(brow + 12);
        const __m256d v0 = _mm256_set1_pd(a0[kk]);
        r00 = _mm256_add_pd(r00, _mm256_mul_pd(v0, b0));
        r01 = _mm256_add_pd(r01, _mm256_mul_pd(v0, b1));
        r02 = _mm256_add_pd(r02, _mm256_mul_pd(v0, b2));
        r03 = _mm256_add_pd(r03, _mm256_mul_pd(v0, b3));
        const __m256d v1 = _mm256_set1_pd(a1[kk]);
        r10 = _mm256_add_pd(r10, _mm256_mul_pd(v1, b0));
        r11 = _mm256_add_pd(r11, _mm256_mul_pd(v1, b1));
        r12 = _mm256_add_pd(r12, _mm256_mul_pd(v1, b2));
        r13 = _mm256_add_pd(r13, _mm256_mul_pd(v1, b3));
      }
      _mm256_storeu_pd(c0 + j, r00);
      _mm256_storeu_pd(c0 + j + 4, r01);
      _mm256_storeu_pd(c0 + j + 8, r02);
      _mm256_storeu_pd(c0 + j + 12, r03);
      _mm256_storeu_pd(c1 + j, r10);
      _mm256_storeu_pd(c1 + j + 4, r11);
      _mm256_storeu_pd(c1 + j + 8, r12);
      _mm256_storeu_pd(c1 + j + 12, r13);
    }
    for (std::int64_t j = jt; j < n; ++j) {
      double s0 = accumulate ? c0[j] : 0.0;
      double s1 = accumulate ? c1[j] : 0.0;
      for (std::int64_t kk = 0; kk < k; ++kk) {
        s0 += a0[kk] * b[kk * n + j];
        s1 += a1[kk] * b[kk * n + j];
      }
      c0[j] = s0;
      c1[j] = s1;
    }
  }
  for (; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    const std::int64_t j4 = n - n % 4;
    for (std::int64_t j = 0; j < j4; j += 4) {
      __m256d r = accumulate ? _mm256_loadu_pd(crow + j) : _mm256_setzero_pd();
      for (std::int64_t kk = 0; kk < k; ++kk) {
        const __m256d bv = _mm256_loadu_pd(b + kk * n + j);
        r = _mm256_add_pd(r, _mm256_mul_pd(_mm256_set1_pd(arow[kk]), bv));
      }
      _mm256_storeu_pd(crow + j, r);
    }
    for (std::int64_t j = j4; j < n; ++j) {
      double s = accumulate ? crow[j] : 0.0;
      for (std::int64_t kk = 0; kk < k; ++kk) s += arow[kk] * b[kk * n + j];
      crow[j] = s;
    }
  }
}

}  // namespace

template <>
void gemm<float>(const float* a, const float* b, float* c, std::int64_t m,
                 std::int64_t n, std::int64_t k, bool accumulate) {
  gemm_f32(a, b, c, m, n, k, accumulate);
}
template <>
void gemm<double>(const double* a, const double* b, double* c, std::int64_t m,
                  std::int64_t n, std::int64_t k, bool accumulate) {
  gemm_f64(a, b, c, m, n, k, accumulate);
}

template <>
void add<float>(const float* a, const float* b, float* out, std::int64_t n) {
  std::int64_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(out + i, _mm256_add_ps(_mm256_loadu_ps(a + i),
                                            _mm256_loadu_ps(b + i)));
  }
  for (; i < n; ++i) out[i] = a[i] + b[i];
}
template <>
void add<double>(const double* a, const double* b, double* out,
                 std::int64_t n) {
  std::int64_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(a + i),
                                            _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

template <>
void mul<float>(const float* a, const float* b, float* out, std::int64_t n) {
  std::int64_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(out + i, _mm256_mul_ps(_mm256_loadu_ps(a + i),
                                            _mm256_loadu_ps(b + i)));
  }
  for (; i < n; ++i) out[i] = a[i] * b[i];
}
template <>
void mul<double>(const double* a, const double* b, double* out,
                 std::int64_t n) {
  std::int64_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i),
                                            _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

template <>
void axpy<float>(float alpha, const float* x, float* y, std::int64_t n) {
  const __m256 av = _mm256_set1_ps(alpha);
  std::int64_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 prod = _mm256_mul_ps(av, _mm256_loadu_ps(x + i));
    _mm256_storeu_ps(y + i, _mm256_add_ps(_mm256_loadu_ps(y + i), prod));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}
template <>
void axpy<double>(double alpha, const double* x, double* y, std::int64_t n) {
  const __m256d av = _mm256_set1_pd(alpha);
  std::int64_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d prod = _mm256_mul_pd(av, _mm256_loadu_pd(x + i));
    _mm256_storeu_pd(y + i, _mm256_add_pd(_mm256_loadu_pd(y + i), prod));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

template <>
void scale<float>(const float* x, float alpha, float* out, std::int64_t n) {
  const __m256 av = _mm256_set1_ps(alpha);
  std::int64_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(out + i, _mm256_mul_ps(_mm256_loadu_ps(x + i), av));
  }
  for (; i < n; ++i) out[i] = x[i] * alpha;
}
template <>
void scale<double>(const double* x, double alpha, double* out, std::int64_t n) {
  const __m256d av = _mm256_set1_pd(alpha);
  std::int64_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(x + i), av));
  }
  for (; i < n; ++i) out[i] = x[i] * alpha;
}

template <>
void relu_fwd<float>(const float* x, float* out, std::int64_t n) {
  const __m256 zero = _mm256_setzero_ps();
  std::int64_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(out + i, _mm256_max_ps(_mm256_loadu_ps(x + i), zero));
  }
  for (; i < n; ++i) out[i] = x[i] > 0.0f ? x[i] : 0.0f;
}
template <>
void relu_fwd<double>(const double* x, double* out, std::int64_t n) {
  const __m256d zero = _mm256_setzero_pd();
  std::int64_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i, _mm256_max_pd(_mm256_loadu_pd(x + i), zero));
  }
  for (; i < n; ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
}

// Blend keeps the untouched lanes' bit patterns intact (the scalar path
// skips the add entirely where x <= 0).
template <>
void relu_bwd<float>(const float* x, const float* dy, float* dx,
                     std::int64_t n) {
  const __m256 zero = _mm256_setzero_ps();
  std::int64_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 mask = _mm256_cmp_ps(_mm256_loadu_ps(x + i), zero, _CMP_GT_OQ);
    const __m256 old = _mm256_loadu_ps(dx + i);
    const __m256 updated = _mm256_add_ps(old, _mm256_loadu_ps(dy + i));
    _mm256_storeu_ps(dx + i, _mm256_blendv_ps(old, updated, mask));
  }
  for (; i < n; ++i) {
    if (x[i] > 0.0f) dx[i] += dy[i];
  }
}
template <>
void relu_bwd<double>(const double* x, const double* dy, double* dx,
                      std::int64_t n) {
  const __m256d zero = _mm256_setzero_pd();
  std::int64_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d mask =
        _mm256_cmp_pd(_mm256_loadu_pd(x + i), zero, _CMP_GT_OQ);
    const __m256d old = _mm256_loadu_pd(dx + i);
    const __m256d updated = _mm256_add_pd(old, _mm256_loadu_pd(dy + i));
    _mm256_storeu_pd(dx + i, _mm256_blendv_pd(old, updated, mask));
  }
  for (; i < n; ++i) {
    if (x[i] > 0.0) dx[i] += dy[i];
  }
}

}  // namespace mutr::kern::avx2

#endif  // MUTR_HAVE_AVX2

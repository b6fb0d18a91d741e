#include "l3/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <type_traits>

#ifdef L3_HAVE_BLAS
#include <cblas.h>
#endif

#if defined(__AVX512F__) || defined(__AVX2__)
#include <immintrin.h>
#endif

namespace l3::kernels {

#if defined(__AVX512F__)

float dot(const float* a, const float* b, int64_t n) {
  __m512 acc0 = _mm512_setzero_ps();
  __m512 acc1 = _mm512_setzero_ps();
  int64_t i = 0;
  for (; i + 32 <= n; i += 32) {
    acc0 = _mm512_fmadd_ps(_mm512_loadu_ps(a + i), _mm512_loadu_ps(b + i), acc0);
    acc1 = _mm512_fmadd_ps(_mm512_loadu_ps(a + i + 16), _mm512_loadu_ps(b + i + 16), acc1);
  }
  for (; i + 16 <= n; i += 16)
    acc0 = _mm512_fmadd_ps(_mm512_loadu_ps(a + i), _mm512_loadu_ps(b + i), acc0);
  float s = _mm512_reduce_add_ps(_mm512_add_ps(acc0, acc1));
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

double dot(const double* a, const double* b, int64_t n) {
  __m512d acc0 = _mm512_setzero_pd();
  __m512d acc1 = _mm512_setzero_pd();
  int64_t i = 0;
  for (; i + 16 <= n; i += 16) {
    acc0 = _mm512_fmadd_pd(_mm512_loadu_pd(a + i), _mm512_loadu_pd(b + i), acc0);
    acc1 = _mm512_fmadd_pd(_mm512_loadu_pd(a + i + 8), _mm512_loadu_pd(b + i + 8), acc1);
  }
  for (; i + 8 <= n; i += 8)
    acc0 = _mm512_fmadd_pd(_mm512_loadu_pd(a + i), _mm512_loadu_pd(b + i), acc0);
  double s = _mm512_reduce_add_pd(_mm512_add_pd(acc0, acc1));
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

void axpy(float alpha, const float* x, float* y, int64_t n) {
  const __m512 va = _mm512_set1_ps(alpha);
  int64_t i = 0;
  for (; i + 16 <= n; i += 16)
    _mm512_storeu_ps(y + i, _mm512_fmadd_ps(va, _mm512_loadu_ps(x + i), _mm512_loadu_ps(y + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void axpy(double alpha, const double* x, double* y, int64_t n) {
  const __m512d va = _mm512_set1_pd(alpha);
  int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm512_storeu_pd(y + i, _mm512_fmadd_pd(va, _mm512_loadu_pd(x + i), _mm512_loadu_pd(y + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

#elif defined(__AVX2__) && defined(__FMA__)

namespace {
inline float hsum8(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  lo = _mm_hadd_ps(lo, lo);
  lo = _mm_hadd_ps(lo, lo);
  return _mm_cvtss_f32(lo);
}
inline double hsum4(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  return _mm_cvtsd_f64(lo) + _mm_cvtsd_f64(_mm_unpackhi_pd(lo, lo));
}
}  // namespace

float dot(const float* a, const float* b, int64_t n) {
  __m256 acc0 = _mm256_setzero_ps();
  __m256 acc1 = _mm256_setzero_ps();
  int64_t i = 0;
  for (; i + 16 <= n; i += 16) {
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc0);
    acc1 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i + 8), _mm256_loadu_ps(b + i + 8), acc1);
  }
  for (; i + 8 <= n; i += 8)
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc0);
  float s = hsum8(_mm256_add_ps(acc0, acc1));
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

double dot(const double* a, const double* b, int64_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  int64_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), acc1);
  }
  for (; i + 4 <= n; i += 4)
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
  double s = hsum4(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

void axpy(float alpha, const float* x, float* y, int64_t n) {
  const __m256 va = _mm256_set1_ps(alpha);
  int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_fmadd_ps(va, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void axpy(double alpha, const double* x, double* y, int64_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  int64_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

#else

namespace {
template <typename T>
T dot_scalar(const T* a, const T* b, int64_t n) {
  T s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  int64_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}
}  // namespace

float dot(const float* a, const float* b, int64_t n) { return dot_scalar(a, b, n); }
double dot(const double* a, const double* b, int64_t n) { return dot_scalar(a, b, n); }
void axpy(float alpha, const float* x, float* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}
void axpy(double alpha, const double* x, double* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

#endif

namespace serial {

template <typename T>
void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, const T* a, int64_t lda,
          const T* b, int64_t ldb, T* c, int64_t ldc, bool accumulate) {
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      T acc = accumulate ? c[i * ldc + j] : T(0);
      for (int64_t p = 0; p < k; ++p) {
        const T av = trans_a ? a[p * lda + i] : a[i * lda + p];
        const T bv = trans_b ? b[j * ldb + p] : b[p * ldb + j];
        acc += av * bv;
      }
      c[i * ldc + j] = acc;
    }
  }
}

template <typename T>
void softmax_rows(const T* x, T* y, int64_t rows, int64_t cols) {
  for (int64_t r = 0; r < rows; ++r) {
    const T* xi = x + r * cols;
    T* yi = y + r * cols;
    T mx = xi[0];
    for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, xi[j]);
    T sum = 0;
    for (int64_t j = 0; j < cols; ++j) {
      yi[j] = std::exp(xi[j] - mx);
      sum += yi[j];
    }
    const T inv = T(1) / sum;
    for (int64_t j = 0; j < cols; ++j) yi[j] *= inv;
  }
}

template <typename T>
void rms_norm_rows(const T* x, const T* gain, T* y, T* inv_rms, int64_t rows, int64_t cols, T eps) {
  for (int64_t r = 0; r < rows; ++r) {
    const T* xi = x + r * cols;
    T* yi = y + r * cols;
    T ms = 0;
    for (int64_t j = 0; j < cols; ++j) ms += xi[j] * xi[j];
    ms = ms / static_cast<T>(cols);
    const T inv = T(1) / std::sqrt(ms + eps);
    if (inv_rms) inv_rms[r] = inv;
    for (int64_t j = 0; j < cols; ++j) yi[j] = xi[j] * inv * gain[j];
  }
}

template void gemm<float>(bool, bool, int64_t, int64_t, int64_t, const float*, int64_t,
                          const float*, int64_t, float*, int64_t, bool);
template void gemm<double>(bool, bool, int64_t, int64_t, int64_t, const double*, int64_t,
                           const double*, int64_t, double*, int64_t, bool);
template void softmax_rows<float>(const float*, float*, int64_t, int64_t);
template void softmax_rows<double>(const double*, double*, int64_t, int64_t);
template void rms_norm_rows<float>(const float*, const float*, float*, float*, int64_t, int64_t,
                                   float);
template void rms_norm_rows<double>(const double*, const double*, double*, double*, int64_t,
                                    int64_t, double);

}  // namespace serial

namespace {

template <typename T>
void gemm_omp(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, const T* a, int64_t lda,
              const T* b, int64_t ldb, T* c, int64_t ldc, bool accumulate) {
  if (!trans_a && !trans_b) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < m; ++i) {
      T* ci = c + i * ldc;
      if (!accumulate) std::fill(ci, ci + n, T(0));
      const T* ai = a + i * lda;
      for (int64_t p = 0; p < k; ++p) axpy(ai[p], b + p * ldb, ci, n);
    }
  } else if (!trans_a && trans_b) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < m; ++i) {
      const T* ai = a + i * lda;
      T* ci = c + i * ldc;
      for (int64_t j = 0; j < n; ++j) {
        const T v = dot(ai, b + j * ldb, k);
        ci[j] = accumulate ? ci[j] + v : v;
      }
    }
  } else if (trans_a && !trans_b) {
    // c[i,j] = sum_p a[p,i] * b[p,j]; row-parallel over i keeps writes disjoint.
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < m; ++i) {
      T* ci = c + i * ldc;
      if (!accumulate) std::fill(ci, ci + n, T(0));
      for (int64_t p = 0; p < k; ++p) axpy(a[p * lda + i], b + p * ldb, ci, n);
    }
  } else {
    serial::gemm(trans_a, trans_b, m, n, k, a, lda, b, ldb, c, ldc, accumulate);
  }
}

}  // namespace

Backend gemm_backend() {
#ifdef L3_HAVE_BLAS
  return Backend::Blas;
#else
  return Backend::OpenMp;
#endif
}

#ifdef L3_HAVE_BLAS
template <typename T>
void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, const T* a, int64_t lda,
          const T* b, int64_t ldb, T* c, int64_t ldc, bool accumulate) {
  const auto ta = trans_a ? CblasTrans : CblasNoTrans;
  const auto tb = trans_b ? CblasTrans : CblasNoTrans;
  if constexpr (std::is_same_v<T, float>) {
    cblas_sgemm(CblasRowMajor, ta, tb, static_cast<int>(m), static_cast<int>(n),
                static_cast<int>(k), 1.0f, a, static_cast<int>(lda), b, static_cast<int>(ldb),
                accumulate ? 1.0f : 0.0f, c, static_cast<int>(ldc));
  } else {
    cblas_dgemm(CblasRowMajor, ta, tb, static_cast<int>(m), static_cast<int>(n),
                static_cast<int>(k), 1.0, a, static_cast<int>(lda), b, static_cast<int>(ldb),
                accumulate ? 1.0 : 0.0, c, static_cast<int>(ldc));
  }
}
#else
template <typename T>
void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, const T* a, int64_t lda,
          const T* b, int64_t ldb, T* c, int64_t ldc, bool accumulate) {
  gemm_omp(trans_a, trans_b, m, n, k, a, lda, b, ldb, c, ldc, accumulate);
}
#endif

// The OpenMP path stays compiled in either build so the benchmark can compare
// backends; expose it under an internal name.
template <typename T>
void gemm_openmp(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, const T* a,
                 int64_t lda, const T* b, int64_t ldb, T* c, int64_t ldc, bool accumulate) {
  gemm_omp(trans_a, trans_b, m, n, k, a, lda, b, ldb, c, ldc, accumulate);
}

template <typename T>
void softmax_rows(const T* x, T* y, int64_t rows, int64_t cols) {
#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < rows; ++r) serial::softmax_rows(x + r * cols, y + r * cols, 1, cols);
}

template <typename T>
void rms_norm_rows(const T* x, const T* gain, T* y, T* inv_rms, int64_t rows, int64_t cols, T eps) {
#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < rows; ++r)
    serial::rms_norm_rows(x + r * cols, gain, y + r * cols, inv_rms ? inv_rms + r : nullptr, 1,
                          cols, eps);
}

template <typename T>
void rms_norm_rows_backward(const T* x, const T* gain, const T* inv_rms, const T* dy, T* dx,
                            T* dgain, int64_t rows, int64_t cols) {
  // dx rows are independent; dgain accumulates over rows in fixed order.
#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < rows; ++r) {
    const T* xi = x + r * cols;
    const T* dyi = dy + r * cols;
    T* dxi = dx + r * cols;
    const T inv = inv_rms[r];
    T dot_val = 0;
    for (int64_t j = 0; j < cols; ++j) dot_val += dyi[j] * gain[j] * xi[j];
    const T coef = dot_val * inv * inv / static_cast<T>(cols);
    for (int64_t j = 0; j < cols; ++j) dxi[j] += (dyi[j] * gain[j] - xi[j] * coef) * inv;
  }
  if (dgain) {
    for (int64_t r = 0; r < rows; ++r) {
      const T* xi = x + r * cols;
      const T* dyi = dy + r * cols;
      const T inv = inv_rms[r];
      for (int64_t j = 0; j < cols; ++j) dgain[j] += dyi[j] * xi[j] * inv;
    }
  }
}

template void gemm<float>(bool, bool, int64_t, int64_t, int64_t, const float*, int64_t,
                          const float*, int64_t, float*, int64_t, bool);
template void gemm<double>(bool, bool, int64_t, int64_t, int64_t, const double*, int64_t,
                           const double*, int64_t, double*, int64_t, bool);
template void gemm_openmp<float>(bool, bool, int64_t, int64_t, int64_t, const float*, int64_t,
                                 const float*, int64_t, float*, int64_t, bool);
template void gemm_openmp<double>(bool, bool, int64_t, int64_t, int64_t, const double*, int64_t,
                                  const double*, int64_t, double*, int64_t, bool);
template void softmax_rows<float>(const float*, float*, int64_t, int64_t);
template void softmax_rows<double>(const double*, double*, int64_t, int64_t);
template void rms_norm_rows<float>(const float*, const float*, float*, float*, int64_t, int64_t,
                                   float);
template void rms_norm_rows<double>(const double*, const double*, double*, double*, int64_t,
                                    int64_t, double);
template void rms_norm_rows_backward<float>(const float*, const float*, const float*, const float*,
                                            float*, float*, int64_t, int64_t);
template void rms_norm_rows_backward<double>(const double*, const double*, const double*,
                                             const double*, double*, double*, int64_t, int64_t);

}  // namespace l3::kernels

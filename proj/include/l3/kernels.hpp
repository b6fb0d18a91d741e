#pragma once

#include <cstdint>

namespace l3::kernels {

// Dense compute primitives. The default entry points are OpenMP-parallel
// (GEMM optionally routed to OpenBLAS); `serial::` holds straight-line
// reference implementations that the unit tests and the kernel benchmark
// compare against. Parallel loops only ever partition output elements and
// keep a fixed accumulation order per element, so results do not depend on
// the number of threads.

enum class Backend { Serial, OpenMp, Blas };
Backend gemm_backend();

// SIMD dot product and y += a*x. Fixed lane/accumulator layout, so results
// are deterministic and independent of where a row sits in its matrix.
float dot(const float* a, const float* b, int64_t n);
double dot(const double* a, const double* b, int64_t n);
void axpy(float alpha, const float* x, float* y, int64_t n);
void axpy(double alpha, const double* x, double* y, int64_t n);

// C[m x n] = op(A) * op(B) (+ C when accumulate).
// op(A) is A [m x k] with lda, or A^T where A is stored [k x m].
template <typename T>
void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, const T* a, int64_t lda,
          const T* b, int64_t ldb, T* c, int64_t ldc, bool accumulate);

// Hand-written OpenMP GEMM; compiled in regardless of backend so the
// benchmark tool can compare it against BLAS and the serial reference.
template <typename T>
void gemm_openmp(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, const T* a,
                 int64_t lda, const T* b, int64_t ldb, T* c, int64_t ldc, bool accumulate);

// Row-wise stabilized softmax, in place allowed (y may alias x).
template <typename T>
void softmax_rows(const T* x, T* y, int64_t rows, int64_t cols);

// y = x / rms(x) * gain per row; inv_rms[r] written for the backward pass.
template <typename T>
void rms_norm_rows(const T* x, const T* gain, T* y, T* inv_rms, int64_t rows, int64_t cols, T eps);

template <typename T>
void rms_norm_rows_backward(const T* x, const T* gain, const T* inv_rms, const T* dy, T* dx,
                            T* dgain, int64_t rows, int64_t cols);

namespace serial {

template <typename T>
void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, const T* a, int64_t lda,
          const T* b, int64_t ldb, T* c, int64_t ldc, bool accumulate);

template <typename T>
void softmax_rows(const T* x, T* y, int64_t rows, int64_t cols);

template <typename T>
void rms_norm_rows(const T* x, const T* gain, T* y, T* inv_rms, int64_t rows, int64_t cols, T eps);

}  // namespace serial

}  // namespace l3::kernels

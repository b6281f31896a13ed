#pragma once

// Dense row-major kernels used by the tensor engine.
//
// Every kernel exists twice: a serial reference in `caft::kernels::serial`
// and an OpenMP version in `caft::kernels::omp`. Both start each output
// element from its current value and fold the reduction index in ascending
// order with one fma per term, so results are bit-identical and do not depend
// on which other rows share the call.

#include <cstddef>

namespace caft::kernels {

namespace serial {

/// C[m,n] += A[m,k] * B[k,n]
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);
/// C[m,n] += A[m,k] * B[n,k]^T
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);
/// C[k,n] += A[m,k]^T * B[m,n]
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);

/// Row-wise softmax of a rows x cols block, in place.
void softmax_rows(std::size_t rows, std::size_t cols, double* x);

}  // namespace serial

namespace omp {

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);
void softmax_rows(std::size_t rows, std::size_t cols, double* x);

}  // namespace omp

// Dispatch used by the engine: OpenMP when built with it, serial otherwise.
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);
void softmax_rows(std::size_t rows, std::size_t cols, double* x);

/// Fixed-order dot product (four interleaved partial sums).
double dot(const double* a, const double* b, std::size_t n);

/// True when the OpenMP kernels were compiled in.
bool openmp_enabled();

}  // namespace caft::kernels

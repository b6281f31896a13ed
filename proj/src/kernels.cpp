#include "caft/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#ifdef CAFT_WITH_OPENMP
#include <omp.h>
#endif

namespace caft::kernels {

double dot(const double* a, const double* b, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

namespace {

constexpr std::size_t kTileCols = 16;
constexpr std::size_t kTileRows = 4;

// Rows [i, i + R) of C += A * B. Every element starts from its current value
// and folds the reduction index in ascending order with one fma per term.
template <std::size_t R>
inline void nn_tile(std::size_t i, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  std::size_t j = 0;
  for (; j + kTileCols <= n; j += kTileCols) {
    double acc[R][kTileCols];
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t w = 0; w < kTileCols; ++w) acc[r][w] = c[(i + r) * n + j + w];
    for (std::size_t p = 0; p < k; ++p) {
      const double* bp = b + p * n + j;
      for (std::size_t r = 0; r < R; ++r) {
        const double av = a[(i + r) * k + p];
#pragma omp simd
        for (std::size_t w = 0; w < kTileCols; ++w) acc[r][w] = std::fma(av, bp[w], acc[r][w]);
      }
    }
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t w = 0; w < kTileCols; ++w) c[(i + r) * n + j + w] = acc[r][w];
  }
  for (; j < n; ++j) {
    for (std::size_t r = 0; r < R; ++r) {
      double s = c[(i + r) * n + j];
      const double* ar = a + (i + r) * k;
      for (std::size_t p = 0; p < k; ++p) s = std::fma(ar[p], b[p * n + j], s);
      c[(i + r) * n + j] = s;
    }
  }
}

inline void nn_block(std::size_t block, std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
                     double* c) {
  const std::size_t i = block * kTileRows;
  if (i + kTileRows <= m) {
    nn_tile<kTileRows>(i, n, k, a, b, c);
  } else {
    for (std::size_t r = i; r < m; ++r) nn_tile<1>(r, n, k, a, b, c);
  }
}

std::vector<double> transposed(const double* x, std::size_t rows, std::size_t cols) {
  std::vector<double> t(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = x[r * cols + c];
  return t;
}

inline void softmax_row(std::size_t cols, double* x) {
  double mx = x[0];
  for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
  double sum = 0.0;
  for (std::size_t j = 0; j < cols; ++j) {
    x[j] = std::exp(x[j] - mx);
    sum += x[j];
  }
  const double inv = 1.0 / sum;
  for (std::size_t j = 0; j < cols; ++j) x[j] *= inv;
}

}  // namespace

namespace serial {

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  const std::size_t blocks = (m + kTileRows - 1) / kTileRows;
  for (std::size_t blk = 0; blk < blocks; ++blk) nn_block(blk, m, n, k, a, b, c);
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  const auto bt = transposed(b, n, k);
  gemm_nn(m, n, k, a, bt.data(), c);
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  const auto at = transposed(a, m, k);
  gemm_nn(k, n, m, at.data(), b, c);
}

void softmax_rows(std::size_t rows, std::size_t cols, double* x) {
  for (std::size_t r = 0; r < rows; ++r) softmax_row(cols, x + r * cols);
}

}  // namespace serial

namespace omp {

// Work below this many multiply-adds stays on the calling thread.
constexpr std::size_t kParallelThreshold = 1u << 15;

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  const auto blocks = static_cast<std::int64_t>((m + kTileRows - 1) / kTileRows);
#pragma omp parallel for schedule(static) if (m * n * k > kParallelThreshold)
  for (std::int64_t blk = 0; blk < blocks; ++blk) nn_block(static_cast<std::size_t>(blk), m, n, k, a, b, c);
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  const auto bt = transposed(b, n, k);
  gemm_nn(m, n, k, a, bt.data(), c);
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  const auto at = transposed(a, m, k);
  gemm_nn(k, n, m, at.data(), b, c);
}

void softmax_rows(std::size_t rows, std::size_t cols, double* x) {
  const auto r_count = static_cast<std::int64_t>(rows);
#pragma omp parallel for schedule(static) if (rows * cols > kParallelThreshold)
  for (std::int64_t r = 0; r < r_count; ++r) softmax_row(cols, x + static_cast<std::size_t>(r) * cols);
}

}  // namespace omp

#ifdef CAFT_WITH_OPENMP
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  omp::gemm_nn(m, n, k, a, b, c);
}
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  omp::gemm_nt(m, n, k, a, b, c);
}
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  omp::gemm_tn(m, n, k, a, b, c);
}
void softmax_rows(std::size_t rows, std::size_t cols, double* x) { omp::softmax_rows(rows, cols, x); }
bool openmp_enabled() { return true; }
#else
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  serial::gemm_nn(m, n, k, a, b, c);
}
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  serial::gemm_nt(m, n, k, a, b, c);
}
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  serial::gemm_tn(m, n, k, a, b, c);
}
void softmax_rows(std::size_t rows, std::size_t cols, double* x) { serial::softmax_rows(rows, cols, x); }
bool openmp_enabled() { return false; }
#endif

}  // namespace caft::kernels

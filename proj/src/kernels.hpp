// SPDX-License-Identifier: Apache-2.0
#pragma once

// Dense kernels shared by the tape ops. Every output row is produced by the
// same instruction sequence regardless of how many rows are in the call, so
// results for a sample do not depend on the batch it was evaluated in.

#include <cstddef>
#include <vector>

namespace chordprompt::detail {

/// C[m,n] (+)= A[m,k] · B[k,n]
inline void gemm_nn(const double* __restrict a, const double* __restrict b, double* __restrict c,
                    std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    double* __restrict crow = c + i * n;
    if (!accumulate)
      for (std::size_t j = 0; j < n; ++j) crow[j] = 0.0;
    const double* __restrict arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* __restrict brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

/// C[m,n] += A[k,m]ᵀ · B[k,n]; the reduction runs over k in ascending order.
inline void gemm_tn_acc(const double* __restrict a, const double* __restrict b,
                        double* __restrict c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* __restrict arow = a + p * m;
    const double* __restrict brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      double* __restrict crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

inline std::vector<double> transpose(const double* src, std::size_t rows, std::size_t cols) {
  std::vector<double> t(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = src[r * cols + c];
  return t;
}

/// C[m,n] (+)= A[m,k] · B[n,k]ᵀ
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n, bool accumulate) {
  const auto bt = transpose(b, n, k);
  gemm_nn(a, bt.data(), c, m, k, n, accumulate);
}

}  // namespace chordprompt::detail

#pragma once

#include <cstddef>

#include <Eigen/Core>

namespace wmhseg::detail {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Row-major C[M,N] (+)= op(A) * op(B), op = optional transpose.
/// A is stored as [M,K] (or [K,M] when trans_a), B as [K,N] (or [N,K] when trans_b).
template <class T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          const T* b, T* c, bool accumulate) {
  using Map = Eigen::Map<RowMatrix<T>>;
  using CMap = Eigen::Map<const RowMatrix<T>>;
  const auto M = static_cast<Eigen::Index>(m);
  const auto N = static_cast<Eigen::Index>(n);
  const auto K = static_cast<Eigen::Index>(k);
  Map cm(c, M, N);
  if (!accumulate) cm.setZero();
  if (M == 0 || N == 0 || K == 0) return;
  if (!trans_a && !trans_b) {
    cm.noalias() += CMap(a, M, K) * CMap(b, K, N);
  } else if (!trans_a && trans_b) {
    cm.noalias() += CMap(a, M, K) * CMap(b, N, K).transpose();
  } else if (trans_a && !trans_b) {
    cm.noalias() += CMap(a, K, M).transpose() * CMap(b, K, N);
  } else {
    cm.noalias() += CMap(a, K, M).transpose() * CMap(b, N, K).transpose();
  }
}

}  // namespace wmhseg::detail

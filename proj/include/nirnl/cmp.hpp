#pragma once

// Cross-modal margin preserving loss: in both retrieval directions every
// matched pair must beat each in-batch mismatched pair by `margin` in cosine
// similarity.

#include <cmath>
#include <stdexcept>
#include <vector>

#include "nirnl/numkit.hpp"

namespace nirnl {

template <typename T>
struct PairLoss {
  T loss = T(0);
  BasicMatrix<T> grad_fv;
  BasicMatrix<T> grad_ft;
};

namespace detail {

// Unit rows plus original norms; zero rows stay zero.
template <typename T>
BasicMatrix<T> unit_rows(const BasicMatrix<T>& m, std::vector<T>& norms) {
  BasicMatrix<T> u(m.rows(), m.cols());
  norms.assign(m.rows(), T(0));
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const T n = l2_norm(m.row(i));
    norms[i] = n;
    if (n == T(0)) continue;
    auto src = m.row(i);
    auto dst = u.row(i);
    for (std::size_t k = 0; k < src.size(); ++k) dst[k] = src[k] / n;
  }
  return u;
}

}  // namespace detail

// loss = 1/n sum_i sum_{j!=i} [S_ij - S_ii + M]_+ + 1/n sum_i sum_{j!=i} [S_ji - S_ii + M]_+
// with S_ij = cos(fv_i, ft_j).
template <typename T>
PairLoss<T> loss_cmp(const BasicMatrix<T>& fv, const BasicMatrix<T>& ft, T margin) {
  if (fv.rows() != ft.rows() || fv.cols() != ft.cols())
    throw std::invalid_argument("loss_cmp: visual and text embeddings must have equal shapes");
  if (margin < T(0)) throw std::invalid_argument("loss_cmp: margin must be non-negative");
  const std::size_t n = fv.rows();
  PairLoss<T> res{T(0), BasicMatrix<T>(n, fv.cols()), BasicMatrix<T>(n, ft.cols())};
  if (n < 2) return res;

  std::vector<T> nv, nt;
  const auto uv = detail::unit_rows(fv, nv);
  const auto ut = detail::unit_rows(ft, nt);
  BasicMatrix<T> sim(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) sim(i, j) = dot(uv.row(i), ut.row(j));

  const T inv_n = T(1) / static_cast<T>(n);
  BasicMatrix<T> dsim(n, n);
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T pos = sim(i, i);
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const T a = sim(i, j) - pos + margin;  // image query i against text j
      if (a > T(0)) {
        total += a;
        dsim(i, j) += inv_n;
        dsim(i, i) -= inv_n;
      }
      const T b = sim(j, i) - pos + margin;  // text query i against image j
      if (b > T(0)) {
        total += b;
        dsim(j, i) += inv_n;
        dsim(i, i) -= inv_n;
      }
    }
  }
  res.loss = total * inv_n;

  // d S_ij / d fv_i = (ut_j - S_ij uv_i) / |fv_i|, symmetric for ft_j.
  for (std::size_t i = 0; i < n; ++i) {
    auto gv = res.grad_fv.row(i);
    auto vi = uv.row(i);
    for (std::size_t j = 0; j < n; ++j) {
      const T g = dsim(i, j);
      if (g == T(0)) continue;
      auto tj = ut.row(j);
      auto gt = res.grad_ft.row(j);
      const T s = sim(i, j);
      if (nv[i] > T(0) && nt[j] > T(0)) {
        const T cv = g / nv[i];
        const T ct = g / nt[j];
        for (std::size_t k = 0; k < vi.size(); ++k) {
          gv[k] += cv * (tj[k] - s * vi[k]);
          gt[k] += ct * (vi[k] - s * tj[k]);
        }
      }
    }
  }
  return res;
}

}  // namespace nirnl

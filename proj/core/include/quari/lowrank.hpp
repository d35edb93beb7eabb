#pragma once

#include "quari/tensor.hpp"

namespace quari {

// Query-specific low-rank transform T = U * V^T with U, V of shape E x r.
// The r x r Gram matrix G = U^T U is cached so that ||T d|| can be evaluated
// as sqrt(z^T G z) with z = V^T d, without materializing T or T d.
template <class Real>
struct LowRankTransform {
  Tensor2<Real> u;     // E x r
  Tensor2<Real> v;     // E x r
  Tensor2<Real> gram;  // r x r = U^T U

  static LowRankTransform from_factors(Tensor2<Real> u_factors,
                                       Tensor2<Real> v_factors) {
    require(u_factors.rows == v_factors.rows &&
                u_factors.cols == v_factors.cols,
            ErrorCategory::dimension, "low-rank factors must share shape");
    LowRankTransform t;
    t.u = std::move(u_factors);
    t.v = std::move(v_factors);
    t.rebuild_gram();
    return t;
  }

  std::size_t embed_dim() const { return u.rows; }
  std::size_t rank() const { return u.cols; }

  void rebuild_gram() { gram = matmul_value(u, u, /*trans_a=*/true); }

  // Dense E x E materialization; reference path only.
  Tensor2<Real> dense() const { return matmul_value(u, v, false, true); }

  // z = V^T d for a length-E vector d.
  void project(const Real* d, Real* z) const {
    const std::size_t e = u.rows, r = u.cols;
    for (std::size_t j = 0; j < r; ++j) z[j] = Real(0);
    for (std::size_t i = 0; i < e; ++i) {
      const Real di = d[i];
      const Real* vr = v.row_ptr(i);
      for (std::size_t j = 0; j < r; ++j) z[j] += di * vr[j];
    }
  }

  // ||U z||^2 = z^T G z.
  Real gram_norm_sq(const Real* z) const {
    const std::size_t r = u.cols;
    Real s = Real(0);
    for (std::size_t i = 0; i < r; ++i) {
      const Real* gr = gram.row_ptr(i);
      Real acc = Real(0);
      for (std::size_t j = 0; j < r; ++j) acc += gr[j] * z[j];
      s += z[i] * acc;
    }
    return s;
  }
};

template <class Real2, class Real>
LowRankTransform<Real2> cast_transform(const LowRankTransform<Real>& t) {
  Tensor2<Real2> u(t.u.rows, t.u.cols), v(t.v.rows, t.v.cols);
  for (std::size_t i = 0; i < u.data.size(); ++i)
    u.data[i] = static_cast<Real2>(t.u.data[i]);
  for (std::size_t i = 0; i < v.data.size(); ++i)
    v.data[i] = static_cast<Real2>(t.v.data[i]);
  return LowRankTransform<Real2>::from_factors(std::move(u), std::move(v));
}

}  // namespace quari

#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <memory>
#include <vector>

#include "quari/error.hpp"

namespace quari {

// Dense row-major matrix. The only tensor shape in the project; vectors are
// 1xN or Nx1.
template <class Real>
struct Tensor2 {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<Real> data;
  bool requires_grad = false;
  std::vector<Real> grad;  // same length as data once touched by backward

  Tensor2() = default;
  Tensor2(std::size_t r, std::size_t c, Real fill = Real(0))
      : rows(r), cols(c), data(r * c, fill) {}

  static Tensor2 from(std::initializer_list<std::initializer_list<Real>> init) {
    Tensor2 t;
    t.rows = init.size();
    t.cols = t.rows ? init.begin()->size() : 0;
    t.data.reserve(t.rows * t.cols);
    for (const auto& row : init) {
      require(row.size() == t.cols, ErrorCategory::dimension,
              "ragged initializer for Tensor2");
      for (Real v : row) t.data.push_back(v);
    }
    return t;
  }

  std::size_t size() const { return rows * cols; }

  Real& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  Real at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  Real* row_ptr(std::size_t i) { return data.data() + i * cols; }
  const Real* row_ptr(std::size_t i) const { return data.data() + i * cols; }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), Real(0));
  }
  void zero_grad() { grad.assign(data.size(), Real(0)); }

  Real& grad_at(std::size_t i, std::size_t j) { return grad[i * cols + j]; }
};

template <class Real>
using TensorPtr = std::shared_ptr<Tensor2<Real>>;

template <class Real>
TensorPtr<Real> make_tensor(std::size_t rows, std::size_t cols,
                            Real fill = Real(0)) {
  return std::make_shared<Tensor2<Real>>(rows, cols, fill);
}

template <class Real>
TensorPtr<Real> make_tensor(Tensor2<Real> t) {
  return std::make_shared<Tensor2<Real>>(std::move(t));
}

// C (+)= op(A)*op(B), plain value-level product used by both the tape and
// non-differentiable paths. ikj loop order; transposed operands are
// materialized first so the hot loop stays contiguous.
template <class Real>
void matmul_value(const Tensor2<Real>& a, const Tensor2<Real>& b,
                  Tensor2<Real>& out, bool trans_a = false,
                  bool trans_b = false, bool accumulate = false) {
  const Tensor2<Real>* pa = &a;
  const Tensor2<Real>* pb = &b;
  Tensor2<Real> at, bt;
  if (trans_a) {
    at = Tensor2<Real>(a.cols, a.rows);
    for (std::size_t i = 0; i < a.rows; ++i)
      for (std::size_t j = 0; j < a.cols; ++j) at.at(j, i) = a.at(i, j);
    pa = &at;
  }
  if (trans_b) {
    bt = Tensor2<Real>(b.cols, b.rows);
    for (std::size_t i = 0; i < b.rows; ++i)
      for (std::size_t j = 0; j < b.cols; ++j) bt.at(j, i) = b.at(i, j);
    pb = &bt;
  }
  const std::size_t m = pa->rows, k = pa->cols, n = pb->cols;
  require(k == pb->rows, ErrorCategory::dimension,
          "matmul: inner dimensions disagree");
  if (!accumulate || out.rows != m || out.cols != n) {
    out.rows = m;
    out.cols = n;
    if (accumulate)
      fail(ErrorCategory::internal, "matmul accumulate into wrong shape");
    out.data.assign(m * n, Real(0));
  }
  for (std::size_t i = 0; i < m; ++i) {
    const Real* arow = pa->row_ptr(i);
    Real* crow = out.row_ptr(i);
    for (std::size_t p = 0; p < k; ++p) {
      const Real av = arow[p];
      if (av == Real(0)) continue;
      const Real* brow = pb->row_ptr(p);
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class Real>
Tensor2<Real> matmul_value(const Tensor2<Real>& a, const Tensor2<Real>& b,
                           bool trans_a = false, bool trans_b = false) {
  Tensor2<Real> out;
  matmul_value(a, b, out, trans_a, trans_b);
  return out;
}

}  // namespace quari

#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "quari/tensor.hpp"

namespace quari {

// Reverse-mode tape over a fixed set of matrix primitives. Forward values
// are computed eagerly; each recorded node carries a closure that scatters
// the output gradient back to its inputs. Replaying the nodes in reverse
// recording order visits every node exactly once in reverse topological
// order, since outputs are always created after their inputs.
//
// A tape is single-threaded. Parameter tensors may be shared read-only by
// several concurrent tapes; gradients land in each tensor's grad buffer, so
// concurrent backward passes over shared parameters are the caller's
// responsibility to serialize.
template <class Real>
class Tape {
 public:
  using Ptr = TensorPtr<Real>;

  // Registers a leaf (typically a parameter or an input) with the tape.
  Ptr watch(Ptr t) {
    known_.insert(t.get());
    return t;
  }

  Ptr constant(Tensor2<Real> value) {
    Ptr t = make_tensor(std::move(value));
    known_.insert(t.get());
    return t;
  }

  // ---- primitives ------------------------------------------------------

  Ptr matmul(Ptr a, Ptr b, bool trans_a = false, bool trans_b = false) {
    Ptr out = make_output(matmul_value(*a, *b, trans_a, trans_b), {a, b});
    if (out->requires_grad) {
      record([a, b, out, trans_a, trans_b]() {
        Tensor2<Real> g;
        g.rows = out->rows;
        g.cols = out->cols;
        g.data = out->grad;
        if (a->requires_grad) {
          // dA' = dC * B'^T, then undo the A transposition.
          Tensor2<Real> da = trans_a ? matmul_value(*b, g, trans_b, true)
                                     : matmul_value(g, *b, false, !trans_b);
          a->ensure_grad();
          for (std::size_t i = 0; i < da.data.size(); ++i)
            a->grad[i] += da.data[i];
        }
        if (b->requires_grad) {
          Tensor2<Real> db = trans_b ? matmul_value(g, *a, true, trans_a)
                                     : matmul_value(*a, g, !trans_a, false);
          b->ensure_grad();
          for (std::size_t i = 0; i < db.data.size(); ++i)
            b->grad[i] += db.data[i];
        }
      });
    }
    return out;
  }

  Ptr add(Ptr a, Ptr b) { return binary_elementwise(a, b, /*sub=*/false); }
  Ptr sub(Ptr a, Ptr b) { return binary_elementwise(a, b, /*sub=*/true); }

  Ptr scale(Ptr a, Real c) {
    Tensor2<Real> v(a->rows, a->cols);
    for (std::size_t i = 0; i < v.data.size(); ++i) v.data[i] = a->data[i] * c;
    Ptr out = make_output(std::move(v), {a});
    if (out->requires_grad) {
      record([a, out, c]() {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (std::size_t i = 0; i < a->grad.size(); ++i)
          a->grad[i] += out->grad[i] * c;
      });
    }
    return out;
  }

  Ptr hadamard(Ptr a, Ptr b) {
    require(a->rows == b->rows && a->cols == b->cols, ErrorCategory::dimension,
            "hadamard: shape mismatch");
    Tensor2<Real> v(a->rows, a->cols);
    for (std::size_t i = 0; i < v.data.size(); ++i)
      v.data[i] = a->data[i] * b->data[i];
    Ptr out = make_output(std::move(v), {a, b});
    if (out->requires_grad) {
      record([a, b, out]() {
        if (a->requires_grad) {
          a->ensure_grad();
          for (std::size_t i = 0; i < a->grad.size(); ++i)
            a->grad[i] += out->grad[i] * b->data[i];
        }
        if (b->requires_grad) {
          b->ensure_grad();
          for (std::size_t i = 0; i < b->grad.size(); ++i)
            b->grad[i] += out->grad[i] * a->data[i];
        }
      });
    }
    return out;
  }

  // Hadamard with a fixed (non-differentiable) weight matrix.
  Ptr mul_const(Ptr a, const Tensor2<Real>& w) {
    require(a->rows == w.rows && a->cols == w.cols, ErrorCategory::dimension,
            "mul_const: shape mismatch");
    Tensor2<Real> v(a->rows, a->cols);
    for (std::size_t i = 0; i < v.data.size(); ++i)
      v.data[i] = a->data[i] * w.data[i];
    Ptr out = make_output(std::move(v), {a});
    if (out->requires_grad) {
      auto wd = w.data;
      record([a, out, wd = std::move(wd)]() {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (std::size_t i = 0; i < a->grad.size(); ++i)
          a->grad[i] += out->grad[i] * wd[i];
      });
    }
    return out;
  }

  // Broadcast-add a 1 x cols row vector to every row.
  Ptr add_row(Ptr a, Ptr row) {
    require(row->rows == 1 && row->cols == a->cols, ErrorCategory::dimension,
            "add_row: row must be 1 x a.cols");
    Tensor2<Real> v(a->rows, a->cols);
    for (std::size_t i = 0; i < a->rows; ++i)
      for (std::size_t j = 0; j < a->cols; ++j)
        v.at(i, j) = a->at(i, j) + row->at(0, j);
    Ptr out = make_output(std::move(v), {a, row});
    if (out->requires_grad) {
      record([a, row, out]() {
        if (a->requires_grad) {
          a->ensure_grad();
          for (std::size_t i = 0; i < a->grad.size(); ++i)
            a->grad[i] += out->grad[i];
        }
        if (row->requires_grad) {
          row->ensure_grad();
          for (std::size_t i = 0; i < a->rows; ++i)
            for (std::size_t j = 0; j < a->cols; ++j)
              row->grad[j] += out->grad[i * a->cols + j];
        }
      });
    }
    return out;
  }

  // GeLU, tanh approximation: 0.5 x (1 + tanh(c (x + k x^3))) with
  // c = sqrt(2/pi) = 0.7978845608028654 and k = 0.044715.
  Ptr gelu(Ptr a) {
    constexpr Real c = Real(0.7978845608028654);
    constexpr Real k = Real(0.044715);
    Tensor2<Real> v(a->rows, a->cols);
    for (std::size_t i = 0; i < v.data.size(); ++i) {
      const Real x = a->data[i];
      v.data[i] =
          Real(0.5) * x * (Real(1) + std::tanh(c * (x + k * x * x * x)));
    }
    Ptr out = make_output(std::move(v), {a});
    if (out->requires_grad) {
      record([a, out]() {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (std::size_t i = 0; i < a->grad.size(); ++i) {
          const Real x = a->data[i];
          const Real t = std::tanh(c * (x + k * x * x * x));
          const Real d = Real(0.5) * (Real(1) + t) +
                         Real(0.5) * x * (Real(1) - t * t) * c *
                             (Real(1) + Real(3) * k * x * x);
          a->grad[i] += out->grad[i] * d;
        }
      });
    }
    return out;
  }

  // Per-row layer normalization with learned gain/bias (1 x cols each).
  Ptr layer_norm(Ptr x, Ptr gain, Ptr bias, Real eps) {
    require(eps > Real(0), ErrorCategory::config, "layer_norm: eps must be > 0");
    require(gain->cols == x->cols && bias->cols == x->cols &&
                gain->rows == 1 && bias->rows == 1,
            ErrorCategory::dimension, "layer_norm: gain/bias must be 1 x cols");
    const std::size_t n = x->cols;
    Tensor2<Real> v(x->rows, n);
    auto xhat = std::make_shared<Tensor2<Real>>(x->rows, n);
    auto inv_sigma = std::make_shared<std::vector<Real>>(x->rows);
    for (std::size_t i = 0; i < x->rows; ++i) {
      const Real* xr = x->row_ptr(i);
      Real mu = 0;
      for (std::size_t j = 0; j < n; ++j) mu += xr[j];
      mu /= Real(n);
      Real var = 0;
      for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
      var /= Real(n);
      const Real inv = Real(1) / std::sqrt(var + eps);
      (*inv_sigma)[i] = inv;
      for (std::size_t j = 0; j < n; ++j) {
        const Real xh = (xr[j] - mu) * inv;
        xhat->at(i, j) = xh;
        v.at(i, j) = xh * gain->at(0, j) + bias->at(0, j);
      }
    }
    Ptr out = make_output(std::move(v), {x, gain, bias});
    if (out->requires_grad) {
      record([x, gain, bias, out, xhat, inv_sigma]() {
        const std::size_t n = x->cols;
        for (std::size_t i = 0; i < x->rows; ++i) {
          const Real* go = out->grad.data() + i * n;
          const Real* xh = xhat->row_ptr(i);
          if (gain->requires_grad) {
            gain->ensure_grad();
            for (std::size_t j = 0; j < n; ++j)
              gain->grad[j] += go[j] * xh[j];
          }
          if (bias->requires_grad) {
            bias->ensure_grad();
            for (std::size_t j = 0; j < n; ++j) bias->grad[j] += go[j];
          }
          if (x->requires_grad) {
            x->ensure_grad();
            // dxhat = go * gain; dx = inv/n * (n*dxhat - sum(dxhat)
            //                               - xhat * sum(dxhat*xhat))
            Real s1 = 0, s2 = 0;
            for (std::size_t j = 0; j < n; ++j) {
              const Real dxh = go[j] * gain->data[j];
              s1 += dxh;
              s2 += dxh * xh[j];
            }
            const Real inv = (*inv_sigma)[i];
            for (std::size_t j = 0; j < n; ++j) {
              const Real dxh = go[j] * gain->data[j];
              x->grad[i * n + j] +=
                  inv / Real(n) * (Real(n) * dxh - s1 - xh[j] * s2);
            }
          }
        }
      });
    }
    return out;
  }

  // Row-wise softmax, stabilized by row-max subtraction.
  Ptr softmax_rows(Ptr a) {
    const std::size_t n = a->cols;
    Tensor2<Real> v(a->rows, n);
    for (std::size_t i = 0; i < a->rows; ++i) {
      const Real* xr = a->row_ptr(i);
      Real mx = xr[0];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xr[j]);
      Real z = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const Real e = std::exp(xr[j] - mx);
        v.at(i, j) = e;
        z += e;
      }
      const Real invz = Real(1) / z;
      for (std::size_t j = 0; j < n; ++j) v.at(i, j) *= invz;
    }
    Ptr out = make_output(std::move(v), {a});
    if (out->requires_grad) {
      record([a, out]() {
        if (!a->requires_grad) return;
        a->ensure_grad();
        const std::size_t n = a->cols;
        for (std::size_t i = 0; i < a->rows; ++i) {
          const Real* y = out->row_ptr(i);
          const Real* gy = out->grad.data() + i * n;
          Real dot = 0;
          for (std::size_t j = 0; j < n; ++j) dot += gy[j] * y[j];
          for (std::size_t j = 0; j < n; ++j)
            a->grad[i * n + j] += y[j] * (gy[j] - dot);
        }
      });
    }
    return out;
  }

  // Stable log-softmax per row: x - max - log(sum exp(x - max)).
  Ptr log_softmax_rows(Ptr a) {
    const std::size_t n = a->cols;
    Tensor2<Real> v(a->rows, n);
    for (std::size_t i = 0; i < a->rows; ++i) {
      const Real* xr = a->row_ptr(i);
      Real mx = xr[0];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xr[j]);
      Real z = 0;
      for (std::size_t j = 0; j < n; ++j) z += std::exp(xr[j] - mx);
      const Real lse = mx + std::log(z);
      for (std::size_t j = 0; j < n; ++j) v.at(i, j) = xr[j] - lse;
    }
    Ptr out = make_output(std::move(v), {a});
    if (out->requires_grad) {
      record([a, out]() {
        if (!a->requires_grad) return;
        a->ensure_grad();
        const std::size_t n = a->cols;
        for (std::size_t i = 0; i < a->rows; ++i) {
          const Real* y = out->row_ptr(i);
          const Real* gy = out->grad.data() + i * n;
          Real gsum = 0;
          for (std::size_t j = 0; j < n; ++j) gsum += gy[j];
          for (std::size_t j = 0; j < n; ++j)
            a->grad[i * n + j] += gy[j] - std::exp(y[j]) * gsum;
        }
      });
    }
    return out;
  }

  Ptr log(Ptr a) {
    Tensor2<Real> v(a->rows, a->cols);
    for (std::size_t i = 0; i < v.data.size(); ++i)
      v.data[i] = std::log(a->data[i]);
    Ptr out = make_output(std::move(v), {a});
    if (out->requires_grad) {
      record([a, out]() {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (std::size_t i = 0; i < a->grad.size(); ++i)
          a->grad[i] += out->grad[i] / a->data[i];
      });
    }
    return out;
  }

  // L2-normalize each row; rows with norm <= eps map to zero.
  Ptr l2_normalize_rows(Ptr a, Real eps = Real(1e-12)) {
    const std::size_t n = a->cols;
    Tensor2<Real> v(a->rows, n);
    auto norms = std::make_shared<std::vector<Real>>(a->rows);
    for (std::size_t i = 0; i < a->rows; ++i) {
      const Real* xr = a->row_ptr(i);
      Real s = 0;
      for (std::size_t j = 0; j < n; ++j) s += xr[j] * xr[j];
      const Real norm = std::sqrt(s);
      (*norms)[i] = norm;
      if (norm > eps) {
        const Real inv = Real(1) / norm;
        for (std::size_t j = 0; j < n; ++j) v.at(i, j) = xr[j] * inv;
      }
    }
    Ptr out = make_output(std::move(v), {a});
    if (out->requires_grad) {
      record([a, out, norms, eps]() {
        if (!a->requires_grad) return;
        a->ensure_grad();
        const std::size_t n = a->cols;
        for (std::size_t i = 0; i < a->rows; ++i) {
          const Real norm = (*norms)[i];
          if (norm <= eps) continue;
          const Real* y = out->row_ptr(i);
          const Real* gy = out->grad.data() + i * n;
          Real dot = 0;
          for (std::size_t j = 0; j < n; ++j) dot += gy[j] * y[j];
          const Real inv = Real(1) / norm;
          for (std::size_t j = 0; j < n; ++j)
            a->grad[i * n + j] += inv * (gy[j] - dot * y[j]);
        }
      });
    }
    return out;
  }

  Ptr sum_all(Ptr a) {
    Tensor2<Real> v(1, 1);
    Real s = 0;
    for (Real x : a->data) s += x;
    v.data[0] = s;
    Ptr out = make_output(std::move(v), {a});
    if (out->requires_grad) {
      record([a, out]() {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (std::size_t i = 0; i < a->grad.size(); ++i)
          a->grad[i] += out->grad[0];
      });
    }
    return out;
  }

  Ptr transpose(Ptr a) {
    Tensor2<Real> v(a->cols, a->rows);
    for (std::size_t i = 0; i < a->rows; ++i)
      for (std::size_t j = 0; j < a->cols; ++j) v.at(j, i) = a->at(i, j);
    Ptr out = make_output(std::move(v), {a});
    if (out->requires_grad) {
      record([a, out]() {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (std::size_t i = 0; i < a->rows; ++i)
          for (std::size_t j = 0; j < a->cols; ++j)
            a->grad[i * a->cols + j] += out->grad[j * a->rows + i];
      });
    }
    return out;
  }

  Ptr slice_rows(Ptr a, std::size_t r0, std::size_t r1) {
    require(r0 < r1 && r1 <= a->rows, ErrorCategory::dimension,
            "slice_rows: bad range");
    Tensor2<Real> v(r1 - r0, a->cols);
    std::copy(a->row_ptr(r0), a->row_ptr(r0) + v.size(), v.data.begin());
    Ptr out = make_output(std::move(v), {a});
    if (out->requires_grad) {
      record([a, out, r0]() {
        if (!a->requires_grad) return;
        a->ensure_grad();
        const std::size_t off = r0 * a->cols;
        for (std::size_t i = 0; i < out->grad.size(); ++i)
          a->grad[off + i] += out->grad[i];
      });
    }
    return out;
  }

  Ptr slice_cols(Ptr a, std::size_t c0, std::size_t c1) {
    require(c0 < c1 && c1 <= a->cols, ErrorCategory::dimension,
            "slice_cols: bad range");
    Tensor2<Real> v(a->rows, c1 - c0);
    for (std::size_t i = 0; i < a->rows; ++i)
      for (std::size_t j = c0; j < c1; ++j) v.at(i, j - c0) = a->at(i, j);
    Ptr out = make_output(std::move(v), {a});
    if (out->requires_grad) {
      record([a, out, c0]() {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (std::size_t i = 0; i < a->rows; ++i)
          for (std::size_t j = 0; j < out->cols; ++j)
            a->grad[i * a->cols + c0 + j] += out->grad[i * out->cols + j];
      });
    }
    return out;
  }

  Ptr concat_rows(const std::vector<Ptr>& parts) {
    require(!parts.empty(), ErrorCategory::dimension, "concat_rows: empty");
    const std::size_t cols = parts[0]->cols;
    std::size_t rows = 0;
    for (const Ptr& p : parts) {
      require(p->cols == cols, ErrorCategory::dimension,
              "concat_rows: column mismatch");
      rows += p->rows;
    }
    Tensor2<Real> v(rows, cols);
    std::size_t off = 0;
    for (const Ptr& p : parts) {
      std::copy(p->data.begin(), p->data.end(), v.data.begin() + off);
      off += p->size();
    }
    Ptr out = make_output(std::move(v), parts);
    if (out->requires_grad) {
      record([parts, out]() {
        std::size_t off = 0;
        for (const Ptr& p : parts) {
          if (p->requires_grad) {
            p->ensure_grad();
            for (std::size_t i = 0; i < p->grad.size(); ++i)
              p->grad[i] += out->grad[off + i];
          }
          off += p->size();
        }
      });
    }
    return out;
  }

  Ptr concat_cols(const std::vector<Ptr>& parts) {
    require(!parts.empty(), ErrorCategory::dimension, "concat_cols: empty");
    const std::size_t rows = parts[0]->rows;
    std::size_t cols = 0;
    for (const Ptr& p : parts) {
      require(p->rows == rows, ErrorCategory::dimension,
              "concat_cols: row mismatch");
      cols += p->cols;
    }
    Tensor2<Real> v(rows, cols);
    std::size_t off = 0;
    for (const Ptr& p : parts) {
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < p->cols; ++j)
          v.at(i, off + j) = p->at(i, j);
      off += p->cols;
    }
    Ptr out = make_output(std::move(v), parts);
    if (out->requires_grad) {
      record([parts, out, rows]() {
        std::size_t off = 0;
        for (const Ptr& p : parts) {
          if (p->requires_grad) {
            p->ensure_grad();
            for (std::size_t i = 0; i < rows; ++i)
              for (std::size_t j = 0; j < p->cols; ++j)
                p->grad[i * p->cols + j] +=
                    out->grad[i * out->cols + off + j];
          }
          off += p->cols;
        }
      });
    }
    return out;
  }

  // ---- backward --------------------------------------------------------

  void backward(Ptr loss) {
    require(!nodes_.empty(), ErrorCategory::state,
            "backward called before any forward computation");
    require(loss->rows == 1 && loss->cols == 1, ErrorCategory::dimension,
            "backward: loss must be a 1x1 scalar");
    require(known_.count(loss.get()) > 0, ErrorCategory::state,
            "backward: loss was not produced on this tape");
    loss->ensure_grad();
    loss->grad[0] = Real(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  Ptr make_output(Tensor2<Real> value, const std::vector<Ptr>& inputs) {
    Ptr out = make_tensor(std::move(value));
    for (const Ptr& in : inputs) {
      if (in->requires_grad) {
        out->requires_grad = true;
        break;
      }
    }
    if (out->requires_grad) out->ensure_grad();
    known_.insert(out.get());
    return out;
  }

  void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }

  Ptr binary_elementwise(Ptr a, Ptr b, bool is_sub) {
    require(a->rows == b->rows && a->cols == b->cols, ErrorCategory::dimension,
            "add/sub: shape mismatch");
    Tensor2<Real> v(a->rows, a->cols);
    const Real sign = is_sub ? Real(-1) : Real(1);
    for (std::size_t i = 0; i < v.data.size(); ++i)
      v.data[i] = a->data[i] + sign * b->data[i];
    Ptr out = make_output(std::move(v), {a, b});
    if (out->requires_grad) {
      record([a, b, out, sign]() {
        if (a->requires_grad) {
          a->ensure_grad();
          for (std::size_t i = 0; i < a->grad.size(); ++i)
            a->grad[i] += out->grad[i];
        }
        if (b->requires_grad) {
          b->ensure_grad();
          for (std::size_t i = 0; i < b->grad.size(); ++i)
            b->grad[i] += sign * out->grad[i];
        }
      });
    }
    return out;
  }

  std::vector<std::function<void()>> nodes_;
  std::unordered_set<const Tensor2<Real>*> known_;
};

}  // namespace quari

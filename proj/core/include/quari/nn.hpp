#pragma once

#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "quari/tape.hpp"

namespace quari {

inline constexpr double kLayerNormEps = 1e-5;

// Truncated normal, std 0.02, resampled beyond 2 sigma.
template <class Real>
void init_trunc_normal(Tensor2<Real>& t, std::mt19937_64& rng,
                       double std_dev = 0.02) {
  std::normal_distribution<double> dist(0.0, std_dev);
  for (Real& x : t.data) {
    double v = dist(rng);
    while (std::abs(v) > 2.0 * std_dev) v = dist(rng);
    x = static_cast<Real>(v);
  }
}

// Uniform on [-1/sqrt(fan_in), 1/sqrt(fan_in)] for weight matrices stored
// as fan_in x fan_out; keeps activations at unit scale at initialization.
template <class Real>
void init_fan_in_uniform(Tensor2<Real>& t, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(t.rows));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (Real& x : t.data) x = static_cast<Real>(dist(rng));
}

using NamedTensors = std::vector<std::pair<std::string, std::size_t>>;

// Two-layer MLP: linear -> layer norm -> GeLU -> linear.
template <class Real>
struct MlpParams {
  TensorPtr<Real> w1, b1;      // in x hidden, 1 x hidden
  TensorPtr<Real> ln_g, ln_b;  // 1 x hidden
  TensorPtr<Real> w2, b2;      // hidden x out, 1 x out

  static MlpParams make(std::size_t in, std::size_t hidden, std::size_t out,
                        std::mt19937_64& rng) {
    MlpParams p;
    p.w1 = make_tensor<Real>(in, hidden);
    p.b1 = make_tensor<Real>(1, hidden);
    p.ln_g = make_tensor<Real>(1, hidden, Real(1));
    p.ln_b = make_tensor<Real>(1, hidden);
    p.w2 = make_tensor<Real>(hidden, out);
    p.b2 = make_tensor<Real>(1, out);
    init_fan_in_uniform(*p.w1, rng);
    init_fan_in_uniform(*p.w2, rng);
    return p;
  }

  template <class Fn>
  void visit(const std::string& prefix, Fn&& fn) const {
    fn(prefix + ".w1", w1);
    fn(prefix + ".b1", b1);
    fn(prefix + ".ln_g", ln_g);
    fn(prefix + ".ln_b", ln_b);
    fn(prefix + ".w2", w2);
    fn(prefix + ".b2", b2);
  }
};

template <class Real>
TensorPtr<Real> mlp_forward(Tape<Real>& tape, TensorPtr<Real> x,
                            const MlpParams<Real>& p) {
  auto h = tape.add_row(tape.matmul(x, p.w1), p.b1);
  h = tape.layer_norm(h, p.ln_g, p.ln_b, Real(kLayerNormEps));
  h = tape.gelu(h);
  return tape.add_row(tape.matmul(h, p.w2), p.b2);
}

template <class Real>
struct AttentionParams {
  std::size_t heads = 1;
  TensorPtr<Real> wq, bq, wk, bk, wv, bv, wo, bo;  // all M x M / 1 x M

  static AttentionParams make(std::size_t model_dim, std::size_t heads,
                              std::mt19937_64& rng) {
    require(heads >= 1 && model_dim % heads == 0, ErrorCategory::config,
            "attention: model_dim must be divisible by heads");
    AttentionParams p;
    p.heads = heads;
    auto mat = [&]() {
      auto t = make_tensor<Real>(model_dim, model_dim);
      init_fan_in_uniform(*t, rng);
      return t;
    };
    p.wq = mat();
    p.wk = mat();
    p.wv = mat();
    p.wo = mat();
    p.bq = make_tensor<Real>(1, model_dim);
    p.bk = make_tensor<Real>(1, model_dim);
    p.bv = make_tensor<Real>(1, model_dim);
    p.bo = make_tensor<Real>(1, model_dim);
    return p;
  }

  template <class Fn>
  void visit(const std::string& prefix, Fn&& fn) const {
    fn(prefix + ".wq", wq);
    fn(prefix + ".bq", bq);
    fn(prefix + ".wk", wk);
    fn(prefix + ".bk", bk);
    fn(prefix + ".wv", wv);
    fn(prefix + ".bv", bv);
    fn(prefix + ".wo", wo);
    fn(prefix + ".bo", bo);
  }
};

// Standard scaled dot-product self-attention over the token sequence
// x (seq x M), split across heads along the feature axis.
template <class Real>
TensorPtr<Real> multi_head_attention(Tape<Real>& tape, TensorPtr<Real> x,
                                     const AttentionParams<Real>& p) {
  const std::size_t m = x->cols;
  require(p.heads >= 1 && m % p.heads == 0, ErrorCategory::config,
          "attention: model_dim must be divisible by heads");
  auto q = tape.add_row(tape.matmul(x, p.wq), p.bq);
  auto k = tape.add_row(tape.matmul(x, p.wk), p.bk);
  auto v = tape.add_row(tape.matmul(x, p.wv), p.bv);
  const std::size_t dh = m / p.heads;
  const Real inv_sqrt = Real(1) / std::sqrt(Real(dh));
  std::vector<TensorPtr<Real>> heads;
  heads.reserve(p.heads);
  for (std::size_t h = 0; h < p.heads; ++h) {
    auto qh = tape.slice_cols(q, h * dh, (h + 1) * dh);
    auto kh = tape.slice_cols(k, h * dh, (h + 1) * dh);
    auto vh = tape.slice_cols(v, h * dh, (h + 1) * dh);
    auto scores = tape.scale(tape.matmul(qh, kh, false, true), inv_sqrt);
    auto weights = tape.softmax_rows(scores);
    heads.push_back(tape.matmul(weights, vh));
  }
  auto merged = p.heads == 1 ? heads[0] : tape.concat_cols(heads);
  return tape.add_row(tape.matmul(merged, p.wo), p.bo);
}

// Pre-LN transformer encoder block:
//   x = x + attn(ln1(x));  x = x + ffn(ln2(x))
// with a plain two-layer GeLU feed-forward.
template <class Real>
struct EncoderBlockParams {
  TensorPtr<Real> ln1_g, ln1_b, ln2_g, ln2_b;
  AttentionParams<Real> attn;
  TensorPtr<Real> ffn_w1, ffn_b1, ffn_w2, ffn_b2;

  static EncoderBlockParams make(std::size_t model_dim, std::size_t heads,
                                 std::size_t ffn_dim, std::mt19937_64& rng) {
    EncoderBlockParams p;
    p.ln1_g = make_tensor<Real>(1, model_dim, Real(1));
    p.ln1_b = make_tensor<Real>(1, model_dim);
    p.ln2_g = make_tensor<Real>(1, model_dim, Real(1));
    p.ln2_b = make_tensor<Real>(1, model_dim);
    p.attn = AttentionParams<Real>::make(model_dim, heads, rng);
    p.ffn_w1 = make_tensor<Real>(model_dim, ffn_dim);
    p.ffn_b1 = make_tensor<Real>(1, ffn_dim);
    p.ffn_w2 = make_tensor<Real>(ffn_dim, model_dim);
    p.ffn_b2 = make_tensor<Real>(1, model_dim);
    init_fan_in_uniform(*p.ffn_w1, rng);
    init_fan_in_uniform(*p.ffn_w2, rng);
    return p;
  }

  template <class Fn>
  void visit(const std::string& prefix, Fn&& fn) const {
    fn(prefix + ".ln1_g", ln1_g);
    fn(prefix + ".ln1_b", ln1_b);
    attn.visit(prefix + ".attn", fn);
    fn(prefix + ".ln2_g", ln2_g);
    fn(prefix + ".ln2_b", ln2_b);
    fn(prefix + ".ffn_w1", ffn_w1);
    fn(prefix + ".ffn_b1", ffn_b1);
    fn(prefix + ".ffn_w2", ffn_w2);
    fn(prefix + ".ffn_b2", ffn_b2);
  }
};

template <class Real>
TensorPtr<Real> encoder_block_forward(Tape<Real>& tape, TensorPtr<Real> x,
                                      const EncoderBlockParams<Real>& p) {
  auto a = multi_head_attention(
      tape, tape.layer_norm(x, p.ln1_g, p.ln1_b, Real(kLayerNormEps)), p.attn);
  x = tape.add(x, a);
  auto h = tape.layer_norm(x, p.ln2_g, p.ln2_b, Real(kLayerNormEps));
  h = tape.gelu(tape.add_row(tape.matmul(h, p.ffn_w1), p.ffn_b1));
  h = tape.add_row(tape.matmul(h, p.ffn_w2), p.ffn_b2);
  return tape.add(x, h);
}

}  // namespace quari

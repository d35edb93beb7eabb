#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "quari/lowrank.hpp"
#include "quari/nn.hpp"
#include "quari/rng.hpp"

namespace quari {

struct HypernetConfig {
  std::size_t embed_dim = 0;    // E
  std::size_t rank = 64;        // r
  std::size_t model_dim = 256;  // M
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t ffn_dim = 1024;
  std::size_t refine_steps = 4;  // L
  // When true the control token carries over between refinement steps
  // instead of being re-formed from the encoded query each step.
  bool control_carry = false;

  void validate() const {
    require(embed_dim >= 1, ErrorCategory::config, "embed_dim must be >= 1");
    require(rank >= 1, ErrorCategory::config, "rank must be >= 1");
    require(refine_steps >= 1, ErrorCategory::config,
            "refine_steps must be >= 1");
    require(model_dim >= 1 && layers >= 1 && heads >= 1 && ffn_dim >= 1,
            ErrorCategory::config, "all hypernet dimensions must be >= 1");
    require(model_dim % heads == 0, ErrorCategory::config,
            "model_dim must be divisible by heads");
  }

  std::size_t token_count() const { return 2 * rank + 1; }
};

// Standard base-10000 sinusoidal positional encoding over token indices
// 0..seq-1 (the control token is index 0).
template <class Real>
Tensor2<Real> sinusoidal_positional_encoding(std::size_t seq,
                                             std::size_t model_dim) {
  Tensor2<Real> pe(seq, model_dim);
  for (std::size_t pos = 0; pos < seq; ++pos) {
    for (std::size_t i = 0; i < model_dim; i += 2) {
      const double angle =
          double(pos) /
          std::pow(10000.0, double(i) / double(model_dim));
      pe.at(pos, i) = Real(std::sin(angle));
      if (i + 1 < model_dim) pe.at(pos, i + 1) = Real(std::cos(angle));
    }
  }
  return pe;
}

template <class Real>
struct HypernetParams {
  HypernetConfig config;
  MlpParams<Real> query_encoder;       // E -> M
  TensorPtr<Real> timestep_table;      // L x M, learned
  std::vector<EncoderBlockParams<Real>> blocks;
  MlpParams<Real> mlp_u, mlp_v, mlp_q;  // M -> E

  static HypernetParams init(const HypernetConfig& cfg, std::mt19937_64 rng) {
    cfg.validate();
    HypernetParams p;
    p.config = cfg;
    p.query_encoder = MlpParams<Real>::make(cfg.embed_dim, cfg.model_dim,
                                            cfg.model_dim, rng);
    p.timestep_table = make_tensor<Real>(cfg.refine_steps, cfg.model_dim);
    init_trunc_normal(*p.timestep_table, rng);
    p.blocks.reserve(cfg.layers);
    for (std::size_t l = 0; l < cfg.layers; ++l)
      p.blocks.push_back(EncoderBlockParams<Real>::make(
          cfg.model_dim, cfg.heads, cfg.ffn_dim, rng));
    p.mlp_u = MlpParams<Real>::make(cfg.model_dim, cfg.model_dim,
                                    cfg.embed_dim, rng);
    p.mlp_v = MlpParams<Real>::make(cfg.model_dim, cfg.model_dim,
                                    cfg.embed_dim, rng);
    p.mlp_q = MlpParams<Real>::make(cfg.model_dim, cfg.model_dim,
                                    cfg.embed_dim, rng);
    return p;
  }

  template <class Fn>
  void visit(Fn&& fn) const {
    query_encoder.visit("query_encoder", fn);
    fn(std::string("timestep_table"), timestep_table);
    for (std::size_t l = 0; l < blocks.size(); ++l)
      blocks[l].visit("block" + std::to_string(l), fn);
    mlp_u.visit("mlp_u", fn);
    mlp_v.visit("mlp_v", fn);
    mlp_q.visit("mlp_q", fn);
  }

  std::vector<std::pair<std::string, TensorPtr<Real>>> named_tensors() const {
    std::vector<std::pair<std::string, TensorPtr<Real>>> out;
    visit([&](const std::string& name, const TensorPtr<Real>& t) {
      out.emplace_back(name, t);
    });
    return out;
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    visit([&](const std::string&, const TensorPtr<Real>& t) { n += t->size(); });
    return n;
  }

  void set_requires_grad(bool on) const {
    visit([on](const std::string&, const TensorPtr<Real>& t) {
      t->requires_grad = on;
      if (on) t->ensure_grad();
    });
  }

  void zero_grad() const {
    visit([](const std::string&, const TensorPtr<Real>& t) { t->zero_grad(); });
  }
};

// Per-query refinement state: 1 control token plus r U-tokens and r V-tokens
// in model dimension M. U/V tokens are exactly zero at step 0.
template <class Real>
struct TokenBank {
  TensorPtr<Real> control;  // 1 x M
  TensorPtr<Real> u_tokens; // r x M
  TensorPtr<Real> v_tokens; // r x M
  std::size_t step = 0;
};

template <class Real>
TokenBank<Real> init_token_bank(Tape<Real>& tape, const HypernetConfig& cfg) {
  TokenBank<Real> bank;
  bank.control = tape.constant(Tensor2<Real>(1, cfg.model_dim));
  bank.u_tokens = tape.constant(Tensor2<Real>(cfg.rank, cfg.model_dim));
  bank.v_tokens = tape.constant(Tensor2<Real>(cfg.rank, cfg.model_dim));
  bank.step = 0;
  return bank;
}

// Control token before timestep addition: two-layer MLP encoding of q.
template <class Real>
TensorPtr<Real> encode_query(Tape<Real>& tape, const HypernetParams<Real>& p,
                             TensorPtr<Real> q) {
  require(q->rows == 1 && q->cols == p.config.embed_dim,
          ErrorCategory::dimension, "encode_query: q must be 1 x embed_dim");
  return mlp_forward(tape, q, p.query_encoder);
}

// One refinement step: assemble [control; U-tokens; V-tokens], add the
// step-t timestep embedding to the control slot and transient sinusoidal
// positional encodings to the whole sequence, run the shared transformer,
// and apply residual updates to the U/V tokens. The returned control slot
// holds the transformer's control output for this step.
template <class Real>
TokenBank<Real> refine_step(Tape<Real>& tape, const HypernetParams<Real>& p,
                            const TokenBank<Real>& bank,
                            TensorPtr<Real> control_base, std::size_t t) {
  const HypernetConfig& cfg = p.config;
  require(t < cfg.refine_steps, ErrorCategory::state,
          "refine_step: t out of range");
  const std::size_t r = cfg.rank;
  TensorPtr<Real> base = control_base;
  if (cfg.control_carry && bank.step > 0) base = bank.control;
  auto control_in =
      tape.add(base, tape.slice_rows(p.timestep_table, t, t + 1));
  auto seq_in = tape.concat_rows({control_in, bank.u_tokens, bank.v_tokens});
  seq_in = tape.add(seq_in, tape.constant(sinusoidal_positional_encoding<Real>(
                                cfg.token_count(), cfg.model_dim)));
  auto seq = seq_in;
  for (const auto& block : p.blocks)
    seq = encoder_block_forward(tape, seq, block);
  // The encoder is residual, so its raw output contains the input tokens;
  // the token update is the net change, keeping the transient positional
  // encodings out of the carried state.
  auto delta = tape.sub(seq, seq_in);
  TokenBank<Real> next;
  next.control = tape.slice_rows(seq, 0, 1);
  next.u_tokens = tape.add(bank.u_tokens, tape.slice_rows(delta, 1, 1 + r));
  next.v_tokens =
      tape.add(bank.v_tokens, tape.slice_rows(delta, 1 + r, 1 + 2 * r));
  next.step = bank.step + 1;
  return next;
}

namespace detail {

// Factor decoding without the refinement-state check; row j of each result
// is the decoded u_j / v_j, so the factors as E x r matrices are the
// transposes of these.
template <class Real>
std::pair<TensorPtr<Real>, TensorPtr<Real>> decode_factor_rows(
    Tape<Real>& tape, const HypernetParams<Real>& p,
    const TokenBank<Real>& bank) {
  return {mlp_forward(tape, bank.u_tokens, p.mlp_u),
          mlp_forward(tape, bank.v_tokens, p.mlp_v)};
}

}  // namespace detail

template <class Real>
std::pair<TensorPtr<Real>, TensorPtr<Real>> decode_transform_rows(
    Tape<Real>& tape, const HypernetParams<Real>& p,
    const TokenBank<Real>& bank) {
  require(bank.step == p.config.refine_steps, ErrorCategory::state,
          "decode_transform: token bank not fully refined");
  return detail::decode_factor_rows(tape, p, bank);
}

template <class Real>
TensorPtr<Real> decode_query(Tape<Real>& tape, const HypernetParams<Real>& p,
                             const TokenBank<Real>& bank) {
  require(bank.step == p.config.refine_steps, ErrorCategory::state,
          "decode_query: token bank not fully refined");
  return mlp_forward(tape, bank.control, p.mlp_q);
}

template <class Real>
struct HypernetOutput {
  TensorPtr<Real> qprime;  // 1 x E
  TensorPtr<Real> u_rows;  // r x E, row j = u_j
  TensorPtr<Real> v_rows;  // r x E, row j = v_j
};

// (q', T) = H(q): encode, L refinement steps, decode.
template <class Real>
HypernetOutput<Real> hypernet_forward(Tape<Real>& tape,
                                      const HypernetParams<Real>& p,
                                      TensorPtr<Real> q) {
  auto control_base = encode_query(tape, p, q);
  auto bank = init_token_bank(tape, p.config);
  for (std::size_t t = 0; t < p.config.refine_steps; ++t)
    bank = refine_step(tape, p, bank, control_base, t);
  auto [u_rows, v_rows] = decode_transform_rows(tape, p, bank);
  return {decode_query(tape, p, bank), u_rows, v_rows};
}

// Materialize the plain low-rank transform (factors as E x r) from decoded
// factor row matrices.
template <class Real>
LowRankTransform<Real> to_transform(const Tensor2<Real>& u_rows,
                                    const Tensor2<Real>& v_rows) {
  Tensor2<Real> u(u_rows.cols, u_rows.rows), v(v_rows.cols, v_rows.rows);
  for (std::size_t i = 0; i < u_rows.rows; ++i)
    for (std::size_t j = 0; j < u_rows.cols; ++j) {
      u.at(j, i) = u_rows.at(i, j);
      v.at(j, i) = v_rows.at(i, j);
    }
  return LowRankTransform<Real>::from_factors(std::move(u), std::move(v));
}

}  // namespace quari

#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "quari/hypernet.hpp"

using namespace quari;

namespace {

using Mat = std::vector<std::vector<double>>;

Mat to_mat(const Tensor2<double>& t) {
  Mat m(t.rows, std::vector<double>(t.cols));
  for (std::size_t i = 0; i < t.rows; ++i)
    for (std::size_t j = 0; j < t.cols; ++j) m[i][j] = t.at(i, j);
  return m;
}

Mat mul(const Mat& a, const Mat& b) {
  Mat c(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < b.size(); ++k)
      for (std::size_t j = 0; j < b[0].size(); ++j)
        c[i][j] += a[i][k] * b[k][j];
  return c;
}

void add_bias(Mat& a, const Mat& b) {
  for (auto& row : a)
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += b[0][j];
}

Mat layer_norm(const Mat& x, const Mat& g, const Mat& b, double eps) {
  Mat y = x;
  for (auto& row : y) {
    double mean = 0;
    for (double v : row) mean += v;
    mean /= row.size();
    double var = 0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= row.size();
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < row.size(); ++j)
      row[j] = (row[j] - mean) * inv * g[0][j] + b[0][j];
  }
  return y;
}

Mat gelu(Mat x) {
  const double c = 0.7978845608028654, k = 0.044715;
  for (auto& row : x)
    for (double& v : row)
      v = 0.5 * v * (1.0 + std::tanh(c * (v + k * v * v * v)));
  return x;
}

Mat mlp(const Mat& x, const MlpParams<double>& p) {
  Mat h = mul(x, to_mat(*p.w1));
  add_bias(h, to_mat(*p.b1));
  h = gelu(layer_norm(h, to_mat(*p.ln_g), to_mat(*p.ln_b), kLayerNormEps));
  Mat y = mul(h, to_mat(*p.w2));
  add_bias(y, to_mat(*p.b2));
  return y;
}

Mat attention(const Mat& x, const AttentionParams<double>& p) {
  const std::size_t n = x.size(), m = x[0].size();
  const std::size_t heads = p.heads, dh = m / heads;
  Mat q = mul(x, to_mat(*p.wq)), k = mul(x, to_mat(*p.wk)),
      v = mul(x, to_mat(*p.wv));
  add_bias(q, to_mat(*p.bq));
  add_bias(k, to_mat(*p.bk));
  add_bias(v, to_mat(*p.bv));
  Mat concat(n, std::vector<double>(m, 0.0));
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> logits(n);
      double mx = -1e300;
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0;
        for (std::size_t d = 0; d < dh; ++d)
          s += q[i][h * dh + d] * k[j][h * dh + d];
        logits[j] = s / std::sqrt(double(dh));
        mx = std::max(mx, logits[j]);
      }
      double z = 0;
      for (double l : logits) z += std::exp(l - mx);
      for (std::size_t d = 0; d < dh; ++d) {
        double acc = 0;
        for (std::size_t j = 0; j < n; ++j)
          acc += std::exp(logits[j] - mx) / z * v[j][h * dh + d];
        concat[i][h * dh + d] = acc;
      }
    }
  }
  Mat out = mul(concat, to_mat(*p.wo));
  add_bias(out, to_mat(*p.bo));
  return out;
}

Mat encoder_block(const Mat& x, const EncoderBlockParams<double>& p) {
  // pre-LN: x + attn(LN1(x)), then y + ffn(LN2(y)) with GeLU FFN
  Mat h = layer_norm(x, to_mat(*p.ln1_g), to_mat(*p.ln1_b), kLayerNormEps);
  Mat a = attention(h, p.attn);
  Mat y = x;
  for (std::size_t i = 0; i < y.size(); ++i)
    for (std::size_t j = 0; j < y[0].size(); ++j) y[i][j] += a[i][j];
  Mat h2 = layer_norm(y, to_mat(*p.ln2_g), to_mat(*p.ln2_b), kLayerNormEps);
  Mat f = mul(h2, to_mat(*p.ffn_w1));
  add_bias(f, to_mat(*p.ffn_b1));
  f = gelu(f);
  Mat f2 = mul(f, to_mat(*p.ffn_w2));
  add_bias(f2, to_mat(*p.ffn_b2));
  for (std::size_t i = 0; i < y.size(); ++i)
    for (std::size_t j = 0; j < y[0].size(); ++j) y[i][j] += f2[i][j];
  return y;
}

// Plain-loop reimplementation of the full forward pass.
struct NaiveOut {
  Mat qprime, u_rows, v_rows;
};

NaiveOut naive_forward(const HypernetParams<double>& p, const Mat& q) {
  const HypernetConfig& cfg = p.config;
  const std::size_t r = cfg.rank, m = cfg.model_dim;
  Mat control_base = mlp(q, p.query_encoder);
  Mat u(r, std::vector<double>(m, 0.0)), v(r, std::vector<double>(m, 0.0));
  Mat pe = to_mat(
      sinusoidal_positional_encoding<double>(cfg.token_count(), m));
  Mat ts = to_mat(*p.timestep_table);
  Mat control;
  for (std::size_t t = 0; t < cfg.refine_steps; ++t) {
    Mat seq(cfg.token_count(), std::vector<double>(m));
    for (std::size_t j = 0; j < m; ++j)
      seq[0][j] = control_base[0][j] + ts[t][j] + pe[0][j];
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        seq[1 + i][j] = u[i][j] + pe[1 + i][j];
        seq[1 + r + i][j] = v[i][j] + pe[1 + r + i][j];
      }
    Mat in = seq;
    for (const auto& blk : p.blocks) seq = encoder_block(seq, blk);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        u[i][j] += seq[1 + i][j] - in[1 + i][j];
        v[i][j] += seq[1 + r + i][j] - in[1 + r + i][j];
      }
    control = {seq[0]};
  }
  return {mlp(control, p.mlp_q), mlp(u, p.mlp_u), mlp(v, p.mlp_v)};
}

HypernetConfig tiny_config() {
  HypernetConfig cfg;
  cfg.embed_dim = 10;
  cfg.rank = 3;
  cfg.model_dim = 8;
  cfg.heads = 2;
  cfg.ffn_dim = 16;
  cfg.layers = 2;
  cfg.refine_steps = 2;
  return cfg;
}

}  // namespace

TEST_CASE("forward pass matches an unrolled plain-loop reimplementation") {
  std::mt19937_64 rng(101);
  auto params = HypernetParams<double>::init(tiny_config(), rng);
  // larger weights so the deltas are far from zero
  for (auto& [name, t] : params.named_tensors())
    for (double& x : t->data) x *= 6.0;

  std::normal_distribution<double> n(0, 1);
  Tensor2<double> q(1, 10);
  for (double& x : q.data) x = n(rng);
  Mat qm = to_mat(q);

  Tape<double> tape;
  auto out = hypernet_forward(tape, params, tape.constant(std::move(q)));
  NaiveOut ref = naive_forward(params, qm);

  for (std::size_t j = 0; j < 10; ++j)
    CHECK(out.qprime->at(0, j) ==
          doctest::Approx(ref.qprime[0][j]).epsilon(1e-10));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 10; ++j) {
      CHECK(out.u_rows->at(i, j) ==
            doctest::Approx(ref.u_rows[i][j]).epsilon(1e-10));
      CHECK(out.v_rows->at(i, j) ==
            doctest::Approx(ref.v_rows[i][j]).epsilon(1e-10));
    }
}

TEST_CASE("zero transformer weights leave the token bank at zero") {
  std::mt19937_64 rng(7);
  auto params = HypernetParams<double>::init(tiny_config(), rng);
  for (auto& blk : params.blocks)
    blk.visit("b", [](const std::string&, const TensorPtr<double>& t) {
      for (double& x : t->data) x = 0.0;
    });
  // LN gains of zero make each residual branch exactly zero
  Tensor2<double> q(1, 10);
  q.data[0] = 1.0;
  Tape<double> tape;
  auto control = encode_query(tape, params, tape.constant(std::move(q)));
  auto bank = init_token_bank(tape, params.config);
  for (std::size_t t = 0; t < params.config.refine_steps; ++t)
    bank = refine_step(tape, params, bank, control, t);
  for (double x : bank.u_tokens->data) CHECK(x == 0.0);
  for (double x : bank.v_tokens->data) CHECK(x == 0.0);
  // decoded factor rows collapse to the decoder's value at zero
  auto [u_rows, v_rows] = decode_transform_rows(tape, params, bank);
  for (std::size_t i = 1; i < u_rows->rows; ++i)
    for (std::size_t j = 0; j < u_rows->cols; ++j)
      CHECK(u_rows->at(i, j) == doctest::Approx(u_rows->at(0, j)));
}

TEST_CASE("token bank starts at exactly zero") {
  Tape<double> tape;
  auto bank = init_token_bank(tape, tiny_config());
  CHECK(bank.step == 0);
  for (double x : bank.u_tokens->data) CHECK(x == 0.0);
  for (double x : bank.v_tokens->data) CHECK(x == 0.0);
  for (double x : bank.control->data) CHECK(x == 0.0);
}

TEST_CASE("decoding an unrefined bank is a state error") {
  std::mt19937_64 rng(3);
  auto params = HypernetParams<double>::init(tiny_config(), rng);
  Tape<double> tape;
  auto bank = init_token_bank(tape, params.config);
  CHECK_THROWS_AS((void)decode_transform_rows(tape, params, bank), Error);
  CHECK_THROWS_AS((void)decode_query(tape, params, bank), Error);

  Tensor2<double> q(1, 10);
  auto control = encode_query(tape, params, tape.constant(std::move(q)));
  bank = refine_step(tape, params, bank, control, 0);
  CHECK_THROWS_AS((void)decode_query(tape, params, bank), Error);
  bank = refine_step(tape, params, bank, control, 1);
  CHECK_NOTHROW((void)decode_query(tape, params, bank));
  CHECK_THROWS_AS(refine_step(tape, params, bank, control, 2), Error);
}

TEST_CASE("transform factors have the configured shape and bounded rank") {
  std::mt19937_64 rng(13);
  auto params = HypernetParams<double>::init(tiny_config(), rng);
  Tensor2<double> q(1, 10);
  std::normal_distribution<double> n(0, 1);
  for (double& x : q.data) x = n(rng);
  Tape<double> tape;
  auto out = hypernet_forward(tape, params, tape.constant(std::move(q)));
  auto t = to_transform<double>(*out.u_rows, *out.v_rows);
  CHECK(t.embed_dim() == 10);
  CHECK(t.rank() == 3);
  // dense() is E x E but only rank r: every column lies in span(U)
  Tensor2<double> dense = t.dense();
  CHECK(dense.rows == 10);
  CHECK(dense.cols == 10);
  // dense == sum_j u_j v_j^T, checked entrywise
  for (std::size_t i = 0; i < 10; ++i)
    for (std::size_t j = 0; j < 10; ++j) {
      double s = 0;
      for (std::size_t kk = 0; kk < 3; ++kk)
        s += out.u_rows->at(kk, i) * out.v_rows->at(kk, j);
      CHECK(dense.at(i, j) == doctest::Approx(s).epsilon(1e-12));
    }
}

TEST_CASE("same seed gives bitwise-identical parameters and outputs") {
  auto run = [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto params = HypernetParams<double>::init(tiny_config(), rng);
    Tensor2<double> q(1, 10);
    for (std::size_t i = 0; i < 10; ++i) q.data[i] = 0.1 * double(i);
    Tape<double> tape;
    auto out = hypernet_forward(tape, params, tape.constant(std::move(q)));
    return out.qprime->data;
  };
  auto a = run(99), b = run(99), c = run(100);
  CHECK(a == b);
  CHECK(a != c);
}

TEST_CASE("control_carry changes the result only when steps > 1") {
  std::mt19937_64 rng(19);
  auto cfg = tiny_config();
  auto params = HypernetParams<double>::init(cfg, rng);
  for (auto& [name, t] : params.named_tensors())
    for (double& x : t->data) x *= 6.0;
  Tensor2<double> q(1, 10);
  std::normal_distribution<double> n(0, 1);
  for (double& x : q.data) x = n(rng);

  auto forward_with = [&](bool carry) {
    HypernetParams<double> p2 = params;
    p2.config.control_carry = carry;
    Tape<double> tape;
    Tensor2<double> qc = q;
    auto out = hypernet_forward(tape, p2, tape.constant(std::move(qc)));
    return out.qprime->data;
  };
  CHECK(forward_with(false) != forward_with(true));

  // with a single refinement step the carry flag has nothing to carry
  auto cfg1 = cfg;
  cfg1.refine_steps = 1;
  std::mt19937_64 rng2(19);
  auto p1 = HypernetParams<double>::init(cfg1, rng2);
  auto fwd1 = [&](bool carry) {
    HypernetParams<double> p2 = p1;
    p2.config.control_carry = carry;
    Tape<double> tape;
    Tensor2<double> qc = q;
    auto out = hypernet_forward(tape, p2, tape.constant(std::move(qc)));
    return out.qprime->data;
  };
  CHECK(fwd1(false) == fwd1(true));
}

TEST_CASE("sinusoidal positional encoding fixed values") {
  auto pe = sinusoidal_positional_encoding<double>(4, 6);
  CHECK(pe.at(0, 0) == doctest::Approx(0.0));   // sin 0
  CHECK(pe.at(0, 1) == doctest::Approx(1.0));   // cos 0
  CHECK(pe.at(1, 0) == doctest::Approx(std::sin(1.0)));
  CHECK(pe.at(2, 0) == doctest::Approx(std::sin(2.0)));
  CHECK(pe.at(1, 2) ==
        doctest::Approx(std::sin(1.0 / std::pow(10000.0, 2.0 / 6.0))));
}

TEST_CASE("config validation") {
  HypernetConfig cfg = tiny_config();
  cfg.model_dim = 10;  // not divisible by heads=2? it is; use heads=3
  cfg.heads = 3;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = tiny_config();
  cfg.embed_dim = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = tiny_config();
  cfg.refine_steps = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  CHECK(tiny_config().token_count() == 7);
}

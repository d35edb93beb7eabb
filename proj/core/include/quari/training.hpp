#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "quari/hypernet.hpp"
#include "quari/rng.hpp"

namespace quari {

enum class NoiseMode { none, elementwise, scalar_u };

inline NoiseMode parse_noise_mode(const std::string& s) {
  if (s == "none") return NoiseMode::none;
  if (s == "elementwise") return NoiseMode::elementwise;
  if (s == "scalar") return NoiseMode::scalar_u;
  fail(ErrorCategory::config, "unknown noise_mode '" + s + "'");
}

// q <- q + u (.) eps with u ~ U[0,1] and eps ~ N(0,1). The elementwise mode
// draws both per coordinate; the scalar mode draws one u per sample.
// Training-time only; targets are never noised.
template <class Real, class Urng>
void add_query_noise(Real* q, std::size_t dim, Urng& rng, NoiseMode mode) {
  if (mode == NoiseMode::none) return;
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  if (mode == NoiseMode::scalar_u) {
    const double u = uni(rng);
    for (std::size_t i = 0; i < dim; ++i)
      q[i] += static_cast<Real>(u * normal(rng));
  } else {
    for (std::size_t i = 0; i < dim; ++i)
      q[i] += static_cast<Real>(uni(rng) * normal(rng));
  }
}

// ---- semi-positive mining ------------------------------------------------

struct NeighborEntry {
  std::uint32_t id = 0;   // corpus row of the neighbor
  double cosine = 0.0;
  double weight = 0.0;    // softmax over the item's neighbor cosines
};

// Exact brute-force neighbor lists over precomputed backbone embeddings.
// Each item carries its 100 nearest neighbors (self excluded), cosines
// sorted non-increasing, and softmax weights over those cosines at unit
// temperature.
class MiningIndex {
 public:
  static constexpr std::size_t kNeighbors = 100;

  static MiningIndex build(const Tensor2<double>& corpus) {
    require(corpus.rows >= kNeighbors + 1, ErrorCategory::config,
            "mining corpus must hold at least 101 items");
    MiningIndex idx;
    const std::size_t n = corpus.rows, e = corpus.cols;
    std::vector<double> inv_norm(n);
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0;
      const double* r = corpus.row_ptr(i);
      for (std::size_t j = 0; j < e; ++j) s += r[j] * r[j];
      inv_norm[i] = s > 0 ? 1.0 / std::sqrt(s) : 0.0;
    }
    idx.neighbors_.resize(n);
    std::vector<std::pair<double, std::uint32_t>> scored(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double* ri = corpus.row_ptr(i);
      for (std::size_t j = 0; j < n; ++j) {
        double dot = 0;
        const double* rj = corpus.row_ptr(j);
        for (std::size_t k = 0; k < e; ++k) dot += ri[k] * rj[k];
        scored[j] = {dot * inv_norm[i] * inv_norm[j],
                     static_cast<std::uint32_t>(j)};
      }
      scored[i].first = -2.0;  // exclude self
      std::partial_sort(scored.begin(), scored.begin() + kNeighbors,
                        scored.end(), [](const auto& a, const auto& b) {
                          if (a.first != b.first) return a.first > b.first;
                          return a.second < b.second;
                        });
      auto& list = idx.neighbors_[i];
      list.resize(kNeighbors);
      double mx = scored[0].first;
      double z = 0;
      for (std::size_t j = 0; j < kNeighbors; ++j)
        z += std::exp(scored[j].first - mx);
      for (std::size_t j = 0; j < kNeighbors; ++j) {
        list[j].id = scored[j].second;
        list[j].cosine = scored[j].first;
        list[j].weight = std::exp(scored[j].first - mx) / z;
      }
    }
    return idx;
  }

  const std::vector<NeighborEntry>& neighbors(std::size_t item) const {
    return neighbors_[item];
  }
  std::size_t size() const { return neighbors_.size(); }

 private:
  std::vector<std::vector<NeighborEntry>> neighbors_;
};

struct SemiPositive {
  std::size_t column = 0;  // batch column index j
  double weight = 0.0;     // w_{i,j} in (0,1)
};

// For each batch row i, the top-2 (by backbone cosine) of target i's
// neighbors that landed in this batch, with their softmax weights.
inline std::vector<std::vector<SemiPositive>> mine_semi_positives(
    const MiningIndex& index, const std::vector<std::size_t>& target_rows) {
  const std::size_t b = target_rows.size();
  std::unordered_map<std::size_t, std::size_t> row_to_col;
  row_to_col.reserve(b);
  for (std::size_t j = 0; j < b; ++j) row_to_col.emplace(target_rows[j], j);
  std::vector<std::vector<SemiPositive>> out(b);
  for (std::size_t i = 0; i < b; ++i) {
    for (const NeighborEntry& nb : index.neighbors(target_rows[i])) {
      auto it = row_to_col.find(nb.id);
      if (it == row_to_col.end() || it->second == i) continue;
      out[i].push_back({it->second, nb.weight});
      if (out[i].size() == 2) break;
    }
  }
  return out;
}

// Full B x B weight matrix alpha: 1 on the diagonal, w_{i,j} for
// semi-positives, 0 elsewhere.
template <class Real>
Tensor2<Real> make_alpha(std::size_t b,
                         const std::vector<std::vector<SemiPositive>>& semi) {
  Tensor2<Real> alpha(b, b);
  for (std::size_t i = 0; i < b; ++i) {
    alpha.at(i, i) = Real(1);
    for (const SemiPositive& sp : semi[i])
      alpha.at(i, sp.column) = Real(sp.weight);
  }
  return alpha;
}

// ---- similarity and loss ---------------------------------------------------

// S[i][j] = sim(q'_i, T_i d_j) / tau; row i uses transform T_i for every
// column. With normalize=true both sides are L2-normalized (cosine); rows of
// the transformed targets whose norm vanishes score 0 and a warning is
// logged once.
template <class Real>
TensorPtr<Real> batch_similarity(Tape<Real>& tape,
                                 const std::vector<HypernetOutput<Real>>& out,
                                 TensorPtr<Real> targets, Real tau,
                                 bool normalize = true) {
  require(tau > Real(0), ErrorCategory::config, "tau must be > 0");
  const std::size_t b = out.size();
  require(targets->rows == b, ErrorCategory::dimension,
          "batch_similarity: one target row per query required");
  static bool warned = false;
  std::vector<TensorPtr<Real>> rows;
  rows.reserve(b);
  for (std::size_t i = 0; i < b; ++i) {
    // z = V rows * D^T (r x B), transformed targets = (U rows)^T z (E x B).
    auto z = tape.matmul(out[i].v_rows, targets, false, true);
    auto transformed = tape.transpose(tape.matmul(out[i].u_rows, z, true));
    TensorPtr<Real> row;
    if (normalize) {
      for (std::size_t j = 0; j < transformed->rows && !warned; ++j) {
        Real s = 0;
        const Real* r = transformed->row_ptr(j);
        for (std::size_t k = 0; k < transformed->cols; ++k) s += r[k] * r[k];
        if (std::sqrt(s) <= Real(1e-12)) {
          std::cerr << "warning: zero-norm transformed embedding, scoring 0\n";
          warned = true;
        }
      }
      auto qn = tape.l2_normalize_rows(out[i].qprime);
      auto dn = tape.l2_normalize_rows(transformed);
      row = tape.matmul(qn, dn, false, true);
    } else {
      row = tape.matmul(out[i].qprime, transformed, false, true);
    }
    rows.push_back(tape.scale(row, Real(1) / tau));
  }
  return tape.concat_rows(rows);
}

// Symmetric weighted contrastive loss (row softmax + column softmax),
// L = (1/2B) sum_i [ -sum_j a_{i,j} log p_{i,j} - sum_j a_{j,i} log q_{j,i} ].
template <class Real>
TensorPtr<Real> symmetric_contrastive_loss(Tape<Real>& tape, TensorPtr<Real> s,
                                           const Tensor2<Real>& alpha) {
  const std::size_t b = s->rows;
  require(s->cols == b, ErrorCategory::dimension, "loss: S must be square");
  require(alpha.rows == b && alpha.cols == b, ErrorCategory::dimension,
          "loss: alpha must match S");
  for (std::size_t i = 0; i < b; ++i)
    require(alpha.at(i, i) == Real(1), ErrorCategory::config,
            "loss: alpha diagonal must be 1");
  Tensor2<Real> alpha_t(b, b);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < b; ++j) alpha_t.at(i, j) = alpha.at(j, i);
  auto row_term = tape.sum_all(tape.mul_const(tape.log_softmax_rows(s), alpha));
  auto col_term = tape.sum_all(
      tape.mul_const(tape.log_softmax_rows(tape.transpose(s)), alpha_t));
  return tape.scale(tape.add(row_term, col_term),
                    Real(-1) / (Real(2) * Real(b)));
}

// ---- optimizer -------------------------------------------------------------

struct OptimizerState {
  double lr_max = 1e-5;
  double lr_min = 2e-7;
  double weight_decay = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t cycle_length = 1;  // steps per cosine cycle
  std::size_t step = 0;
  std::size_t skipped = 0;  // steps dropped due to non-finite gradients
  // First/second moments, keyed by parameter order at first use.
  std::vector<std::vector<double>> m, v;
};

// Cosine-annealed learning rate cycling between lr_max and lr_min.
inline double lr_at(std::size_t step, const OptimizerState& st) {
  require(st.cycle_length > 0, ErrorCategory::config,
          "cycle_length must be > 0");
  const double phase =
      double(step % st.cycle_length) / double(st.cycle_length);
  return st.lr_min +
         0.5 * (st.lr_max - st.lr_min) * (1.0 + std::cos(M_PI * phase));
}

// Decoupled-weight-decay Adam step over an ordered parameter list. A step
// with any non-finite gradient is skipped entirely. Moments and update
// arithmetic stay f64 regardless of the parameter storage type.
template <class Real>
void adamw_step(
    const std::vector<std::pair<std::string, TensorPtr<Real>>>& params,
    OptimizerState& st) {
  if (st.m.empty()) {
    st.m.resize(params.size());
    st.v.resize(params.size());
    for (std::size_t p = 0; p < params.size(); ++p) {
      st.m[p].assign(params[p].second->size(), 0.0);
      st.v[p].assign(params[p].second->size(), 0.0);
    }
  }
  require(st.m.size() == params.size(), ErrorCategory::state,
          "optimizer state does not match parameter list");
  for (const auto& [name, t] : params) {
    for (Real g : t->grad)
      if (!std::isfinite(double(g))) {
        ++st.skipped;
        ++st.step;
        return;
      }
  }
  const double lr = lr_at(st.step, st);
  const std::size_t t_step = st.step + 1;
  const double bc1 = 1.0 - std::pow(st.beta1, double(t_step));
  const double bc2 = 1.0 - std::pow(st.beta2, double(t_step));
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& tensor = *params[p].second;
    auto& m = st.m[p];
    auto& v = st.v[p];
    require(m.size() == tensor.size(), ErrorCategory::dimension,
            "moment shape mismatch for " + params[p].first);
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      const double g = double(tensor.grad[i]);
      m[i] = st.beta1 * m[i] + (1.0 - st.beta1) * g;
      v[i] = st.beta2 * v[i] + (1.0 - st.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      tensor.data[i] = Real(
          double(tensor.data[i]) -
          lr * (mhat / (std::sqrt(vhat) + st.eps) +
                st.weight_decay * double(tensor.data[i])));
    }
  }
  ++st.step;
}

// ---- train loop ------------------------------------------------------------

struct TrainSettings {
  std::size_t batch = 320;
  double tau = 0.07;
  double lr_max = 1e-5;
  double lr_min = 2e-7;
  double weight_decay = 1e-2;
  std::size_t epochs = 1;
  std::uint64_t seed = 0;
  NoiseMode noise_mode = NoiseMode::elementwise;
  bool loss_norm = true;  // L2-normalize inside the loss (cosine form)
  std::size_t max_steps = 0;        // 0 = no cap
  std::size_t checkpoint_every = 0; // 0 = final checkpoint only
};

template <class Real>
struct TrainDatasetT {
  Tensor2<Real> queries;  // nq x E
  Tensor2<Real> targets;  // nt x E; also the mining corpus
  std::vector<std::pair<std::uint64_t, std::uint64_t>> pairs;
};
using TrainDataset = TrainDatasetT<double>;

struct EpochStats {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double batch_top1 = 0.0;  // fraction of rows whose diagonal wins its row
};

struct TrainLog {
  std::vector<EpochStats> epochs;
  std::size_t steps = 0;
  std::size_t skipped_steps = 0;
};

template <class Real>
using CheckpointFnT =
    std::function<void(std::size_t step, const HypernetParams<Real>&)>;
using CheckpointFn = CheckpointFnT<double>;

// One optimization run: sample batch, noise queries, per-query hypernet
// forward, batched similarity, mined-alpha contrastive loss, backward,
// AdamW step. Deterministic for a fixed seed in a single-threaded run.
// The parameter/activation type is templated; the mining corpus and the
// optimizer moments are always f64.
template <class Real>
TrainLog train(HypernetParams<Real>& params,
               const TrainDatasetT<Real>& dataset, const MiningIndex& mining,
               const TrainSettings& s,
               CheckpointFnT<Real> checkpoint = nullptr) {
  const std::size_t e = params.config.embed_dim;
  require(dataset.queries.cols == e && dataset.targets.cols == e,
          ErrorCategory::dimension, "dataset dimension != hypernet embed_dim");
  require(!dataset.pairs.empty(), ErrorCategory::config,
          "training dataset has no pairs");
  require(mining.size() == dataset.targets.rows, ErrorCategory::config,
          "mining index does not cover the target corpus");

  SeedSplitter split(s.seed);
  auto batch_rng = split.stream("train/batch");
  auto noise_rng = split.stream("train/noise");

  OptimizerState opt;
  opt.lr_max = s.lr_max;
  opt.lr_min = s.lr_min;
  opt.weight_decay = s.weight_decay;
  const std::size_t bsz0 =
      std::max<std::size_t>(1, std::min(s.batch, dataset.pairs.size()));
  opt.cycle_length = std::max<std::size_t>(1, dataset.pairs.size() / bsz0);

  params.set_requires_grad(true);
  auto named = params.named_tensors();

  TrainLog log;
  std::vector<std::size_t> order(dataset.pairs.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < s.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), batch_rng);
    double loss_sum = 0;
    double top1_sum = 0;
    std::size_t batches = 0;
    const std::size_t bsz = std::min(s.batch, order.size());
    for (std::size_t start = 0; start + bsz <= order.size(); start += bsz) {
      if (s.max_steps && log.steps >= s.max_steps) break;
      const std::size_t b = bsz;
      Tensor2<Real> batch_q(b, e), batch_d(b, e);
      std::vector<std::size_t> target_rows(b);
      for (std::size_t i = 0; i < b; ++i) {
        const auto& pr = dataset.pairs[order[start + i]];
        std::copy_n(dataset.queries.row_ptr(pr.first), e, batch_q.row_ptr(i));
        std::copy_n(dataset.targets.row_ptr(pr.second), e, batch_d.row_ptr(i));
        target_rows[i] = pr.second;
        add_query_noise(batch_q.row_ptr(i), e, noise_rng, s.noise_mode);
      }
      auto semi = mine_semi_positives(mining, target_rows);
      auto alpha = make_alpha<Real>(b, semi);

      Tape<Real> tape;
      auto targets = tape.constant(std::move(batch_d));
      std::vector<HypernetOutput<Real>> outs;
      outs.reserve(b);
      for (std::size_t i = 0; i < b; ++i) {
        Tensor2<Real> qrow(1, e);
        std::copy_n(batch_q.row_ptr(i), e, qrow.data.begin());
        outs.push_back(
            hypernet_forward(tape, params, tape.constant(std::move(qrow))));
      }
      auto sim = batch_similarity(tape, outs, targets, Real(s.tau), s.loss_norm);
      auto loss = symmetric_contrastive_loss(tape, sim, alpha);
      const double loss_value = double(loss->data[0]);
      if (!std::isfinite(loss_value)) {
        std::cerr << "fatal: non-finite loss at step " << log.steps << "\n";
        for (std::size_t i = 0; i < b; ++i) {
          std::cerr << "batch row " << i << " target_row " << target_rows[i]
                    << " q[0..3]=";
          for (std::size_t k = 0; k < std::min<std::size_t>(4, e); ++k)
            std::cerr << batch_q.at(i, k) << " ";
          std::cerr << "\n";
        }
        fail(ErrorCategory::internal, "NaN loss; offending batch dumped");
      }
      params.zero_grad();
      tape.backward(loss);
      adamw_step(named, opt);

      // Diagnostics: does the matched target win its row?
      std::size_t hits = 0;
      for (std::size_t i = 0; i < b; ++i) {
        const Real* row = sim->row_ptr(i);
        std::size_t best = 0;
        for (std::size_t j = 1; j < b; ++j)
          if (row[j] > row[best]) best = j;
        if (best == i) ++hits;
      }
      loss_sum += loss_value;
      top1_sum += double(hits) / double(b);
      ++batches;
      ++log.steps;
      if (checkpoint && s.checkpoint_every &&
          log.steps % s.checkpoint_every == 0)
        checkpoint(log.steps, params);
    }
    if (batches) {
      log.epochs.push_back(
          {epoch, loss_sum / double(batches), top1_sum / double(batches)});
    }
    if (s.max_steps && log.steps >= s.max_steps) break;
  }
  log.skipped_steps = opt.skipped;
  if (checkpoint) checkpoint(log.steps, params);
  return log;
}

}  // namespace quari

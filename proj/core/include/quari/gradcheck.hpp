#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "quari/hypernet.hpp"
#include "quari/rng.hpp"
#include "quari/training.hpp"

namespace quari {

struct GradCheckReport {
  double max_rel_err = 0;
  std::string worst_tensor;
  double worst_fd = 0, worst_analytic = 0;
  std::size_t checked = 0;
  std::vector<std::pair<std::string, double>> per_tensor;
};

struct GradCheckSpec {
  HypernetConfig config;
  std::size_t batch = 4;
  // The check point matters: at the raw trunc-normal(0.02) init the factor
  // decoders are bias-dominated, and their LayerNorm curvature swamps an
  // h=1e-4 central difference (the analytic gradient is fine; the FD probe
  // is not). Scaling the parameters to O(0.1) and keeping the softmax mild
  // puts every tensor in a regime where central differences converge.
  double param_scale = 1.0;
  double tau = 1.0;
  double h = 1e-4;
  // Entries sampled per parameter tensor (every tensor is always covered;
  // small tensors are checked exhaustively).
  std::size_t samples_per_tensor = 6;
  std::uint64_t seed = 0;
};

// Central finite differences against the tape gradients through the whole
// training-step computation: per-query hypernet forward, batched adapted
// similarity, mined-alpha symmetric contrastive loss.
inline GradCheckReport grad_check(const GradCheckSpec& gc) {
  SeedSplitter split(gc.seed);
  auto init_rng = split.stream("gradcheck/init");
  auto params = HypernetParams<double>::init(gc.config, init_rng);
  for (auto& [name, tensor] : params.named_tensors())
    for (double& x : tensor->data) x *= gc.param_scale;
  params.set_requires_grad(true);

  const std::size_t e = gc.config.embed_dim;
  const std::size_t b = gc.batch;
  auto data_rng = split.stream("gradcheck/data");
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor2<double> queries(b, e), targets(b, e);
  for (double& x : queries.data) x = normal(data_rng);
  for (double& x : targets.data) x = normal(data_rng);
  auto noise_rng = split.stream("gradcheck/noise");
  for (std::size_t i = 0; i < b; ++i)
    add_query_noise(queries.row_ptr(i), e, noise_rng, NoiseMode::elementwise);

  // A fixed mined-alpha pattern so the weighted loss terms get exercised.
  std::vector<std::vector<SemiPositive>> semi(b);
  if (b >= 2) semi[0] = {{1, 0.25}};
  if (b >= 4) semi[2] = {{3, 0.1}, {1, 0.05}};
  Tensor2<double> alpha = make_alpha<double>(b, semi);

  // Analytic gradients once.
  params.zero_grad();
  {
    Tape<double> tape;
    Tensor2<double> tcopy = targets;
    auto t = tape.constant(std::move(tcopy));
    std::vector<HypernetOutput<double>> outs;
    outs.reserve(b);
    for (std::size_t i = 0; i < b; ++i) {
      Tensor2<double> qrow(1, e);
      std::copy_n(queries.row_ptr(i), e, qrow.data.begin());
      outs.push_back(
          hypernet_forward(tape, params, tape.constant(std::move(qrow))));
    }
    auto sim = batch_similarity(tape, outs, t, gc.tau, true);
    auto loss = symmetric_contrastive_loss(tape, sim, alpha);
    tape.backward(loss);
  }

  auto forward_only = [&]() {
    Tape<double> tape;
    params.set_requires_grad(false);
    Tensor2<double> tcopy = targets;
    auto t = tape.constant(std::move(tcopy));
    std::vector<HypernetOutput<double>> outs;
    outs.reserve(b);
    for (std::size_t i = 0; i < b; ++i) {
      Tensor2<double> qrow(1, e);
      std::copy_n(queries.row_ptr(i), e, qrow.data.begin());
      outs.push_back(
          hypernet_forward(tape, params, tape.constant(std::move(qrow))));
    }
    auto sim = batch_similarity(tape, outs, t, gc.tau, true);
    auto loss = symmetric_contrastive_loss(tape, sim, alpha);
    params.set_requires_grad(true);
    return loss->data[0];
  };

  GradCheckReport rep;
  auto pick_rng = split.stream("gradcheck/pick");
  for (auto& [name, tensor] : params.named_tensors()) {
    double tensor_err = 0;
    std::vector<std::size_t> idx;
    const std::size_t n = tensor->data.size();
    if (n <= gc.samples_per_tensor) {
      idx.resize(n);
      for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    } else {
      std::uniform_int_distribution<std::size_t> uni(0, n - 1);
      while (idx.size() < gc.samples_per_tensor) {
        std::size_t i = uni(pick_rng);
        if (std::find(idx.begin(), idx.end(), i) == idx.end())
          idx.push_back(i);
      }
    }
    for (std::size_t i : idx) {
      const double saved = tensor->data[i];
      tensor->data[i] = saved + gc.h;
      const double lp = forward_only();
      tensor->data[i] = saved - gc.h;
      const double lm = forward_only();
      tensor->data[i] = saved;
      const double fd = (lp - lm) / (2.0 * gc.h);
      const double an = tensor->grad[i];
      const double scale = std::max(std::abs(fd), std::abs(an));
      const double rel = scale < 1e-7 ? 0.0 : std::abs(fd - an) / scale;
      tensor_err = std::max(tensor_err, rel);
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_tensor = name;
        rep.worst_fd = fd;
        rep.worst_analytic = an;
      }
      ++rep.checked;
    }
    rep.per_tensor.emplace_back(name, tensor_err);
  }
  return rep;
}

}  // namespace quari

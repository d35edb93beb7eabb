#include "quari/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "quari/error.hpp"
#include "quari/io.hpp"
#include "quari/rng.hpp"

namespace quari {

namespace {

std::string tagged_id(const char* prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s%06zu", prefix, i);
  return buf;
}

Tensor2<double> random_gaussian(std::size_t rows, std::size_t cols,
                                std::mt19937_64& rng) {
  Tensor2<double> t(rows, cols);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (double& x : t.data) x = normal(rng);
  return t;
}

void normalize_row(double* row, std::size_t n) {
  double s = 0;
  for (std::size_t i = 0; i < n; ++i) s += row[i] * row[i];
  if (s <= 0) return;
  const double inv = 1.0 / std::sqrt(s);
  for (std::size_t i = 0; i < n; ++i) row[i] *= inv;
}

Tensor2<float> to_f32(const Tensor2<double>& t) {
  Tensor2<float> out(t.rows, t.cols);
  for (std::size_t i = 0; i < t.data.size(); ++i)
    out.data[i] = static_cast<float>(t.data[i]);
  return out;
}

// q = normalize(A_c d + sigma * eta), eta ~ N(0,1)^E.
Tensor2<double> make_queries(const std::vector<Tensor2<double>>& maps,
                             const Tensor2<double>& targets,
                             const std::vector<std::size_t>& target_rows,
                             const std::vector<std::size_t>& clusters,
                             double sigma, std::mt19937_64& rng) {
  const std::size_t e = targets.cols;
  Tensor2<double> queries(target_rows.size(), e);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t i = 0; i < target_rows.size(); ++i) {
    const Tensor2<double>& a = maps[clusters[i]];
    const double* d = targets.row_ptr(target_rows[i]);
    double* q = queries.row_ptr(i);
    for (std::size_t row = 0; row < e; ++row) {
      double acc = 0;
      const double* ar = a.row_ptr(row);
      for (std::size_t col = 0; col < e; ++col) acc += ar[col] * d[col];
      q[row] = acc;
    }
    for (std::size_t row = 0; row < e; ++row) q[row] += sigma * normal(rng);
    normalize_row(q, e);
  }
  return queries;
}

}  // namespace

void SynthSpec::validate() const {
  require(clusters >= 1 && dim >= 1 && targets_per_cluster >= 1,
          ErrorCategory::config, "synth: counts must be >= 1");
  require(rank_true >= 1 && rank_true <= dim, ErrorCategory::config,
          "synth: rank_true must be in [1, dim]");
  require(eval_queries_per_cluster <= targets_per_cluster,
          ErrorCategory::config,
          "synth: eval queries per cluster exceed targets per cluster");
  require(noise >= 0, ErrorCategory::config, "synth: noise must be >= 0");
}

SynthData generate_synthetic(const SynthSpec& spec) {
  spec.validate();
  SynthData data;
  data.spec = spec;
  SeedSplitter split(spec.seed);
  const std::size_t e = spec.dim;
  const std::size_t nt = spec.clusters * spec.targets_per_cluster;

  // Hidden rank-r cluster maps A_c = G1 * G2 (Gaussian factors have rank
  // exactly rank_true almost surely).
  auto map_rng = split.stream("synth/maps");
  data.true_maps.reserve(spec.clusters);
  for (std::size_t c = 0; c < spec.clusters; ++c) {
    const Tensor2<double> g1 = random_gaussian(e, spec.rank_true, map_rng);
    const Tensor2<double> g2 = random_gaussian(spec.rank_true, e, map_rng);
    data.true_maps.push_back(matmul_value(g1, g2));
  }

  auto target_rng = split.stream("synth/targets");
  Tensor2<double> targets = random_gaussian(nt, e, target_rng);
  for (std::size_t i = 0; i < nt; ++i) normalize_row(targets.row_ptr(i), e);
  data.targets = to_f32(targets);
  data.target_cluster.resize(nt);
  data.target_ids.resize(nt);
  for (std::size_t i = 0; i < nt; ++i) {
    data.target_cluster[i] = i / spec.targets_per_cluster;
    data.target_ids[i] = tagged_id("t", i);
  }

  // Gallery: targets followed by distractors.
  auto distractor_rng = split.stream("synth/distractors");
  Tensor2<double> distractors =
      random_gaussian(spec.distractors, e, distractor_rng);
  for (std::size_t i = 0; i < spec.distractors; ++i)
    normalize_row(distractors.row_ptr(i), e);
  data.gallery = Tensor2<float>(nt + spec.distractors, e);
  std::copy(data.targets.data.begin(), data.targets.data.end(),
            data.gallery.data.begin());
  for (std::size_t i = 0; i < distractors.data.size(); ++i)
    data.gallery.data[nt * e + i] = static_cast<float>(distractors.data[i]);
  data.gallery_ids = data.target_ids;
  for (std::size_t i = 0; i < spec.distractors; ++i)
    data.gallery_ids.push_back(tagged_id("d", i));

  // Queries: a per-cluster sample of targets, pushed through the cluster map.
  auto pick_rng = split.stream("synth/query_pick");
  for (std::size_t c = 0; c < spec.clusters; ++c) {
    std::vector<std::size_t> local(spec.targets_per_cluster);
    std::iota(local.begin(), local.end(), c * spec.targets_per_cluster);
    std::shuffle(local.begin(), local.end(), pick_rng);
    for (std::size_t i = 0; i < spec.eval_queries_per_cluster; ++i) {
      data.query_target_row.push_back(local[i]);
      data.query_cluster.push_back(c);
    }
  }
  auto query_rng = split.stream("synth/queries");
  data.queries = to_f32(make_queries(data.true_maps, targets,
                                     data.query_target_row, data.query_cluster,
                                     spec.noise, query_rng));
  data.query_ids.resize(data.query_target_row.size());
  data.pairs.reserve(data.query_target_row.size());
  for (std::size_t i = 0; i < data.query_ids.size(); ++i) {
    data.query_ids[i] = tagged_id("q", i);
    data.pairs.emplace_back(i, data.query_target_row[i]);
  }

  // Judgments: the matched target (grade 1) and its two nearest same-cluster
  // targets by cosine (grade 0.5).
  for (std::size_t i = 0; i < data.query_target_row.size(); ++i) {
    const std::size_t row = data.query_target_row[i];
    const std::size_t c = data.query_cluster[i];
    auto& judg = data.judgments[data.query_ids[i]];
    judg[data.target_ids[row]] = 1.0;
    std::vector<std::pair<double, std::size_t>> near;
    const double* d = targets.row_ptr(row);
    const std::size_t lo = c * spec.targets_per_cluster;
    for (std::size_t j = lo; j < lo + spec.targets_per_cluster; ++j) {
      if (j == row) continue;
      double dot = 0;
      const double* o = targets.row_ptr(j);
      for (std::size_t k = 0; k < e; ++k) dot += d[k] * o[k];
      near.emplace_back(dot, j);
    }
    std::partial_sort(near.begin(),
                      near.begin() + std::min<std::size_t>(2, near.size()),
                      near.end(), [](const auto& a, const auto& b) {
                        if (a.first != b.first) return a.first > b.first;
                        return a.second < b.second;
                      });
    for (std::size_t k = 0; k < std::min<std::size_t>(2, near.size()); ++k)
      judg[data.target_ids[near[k].second]] = 0.5;
  }
  return data;
}

SynthCalibration calibrate_synthetic(const SynthData& data) {
  const std::size_t e = data.spec.dim;
  const std::size_t n = data.gallery.rows;
  const std::size_t nq = data.queries.rows;
  SynthCalibration cal;

  // Baseline: raw cosine (all rows are unit norm by construction).
  std::size_t base_hits = 0;
  for (std::size_t i = 0; i < nq; ++i) {
    const float* q = data.queries.row_ptr(i);
    double best = -2;
    std::size_t best_row = 0;
    for (std::size_t j = 0; j < n; ++j) {
      double dot = 0;
      const float* g = data.gallery.row_ptr(j);
      for (std::size_t k = 0; k < e; ++k) dot += double(q[k]) * double(g[k]);
      if (dot > best) {
        best = dot;
        best_row = j;
      }
    }
    if (best_row == data.query_target_row[i]) ++base_hits;
  }
  cal.baseline_recall1 = double(base_hits) / double(nq);

  // Oracle: score cos(q, A_c d) with the true cluster map; transform the
  // gallery once per cluster.
  std::size_t oracle_hits = 0;
  for (std::size_t c = 0; c < data.spec.clusters; ++c) {
    const Tensor2<double>& a = data.true_maps[c];
    Tensor2<double> transformed(n, e);
    for (std::size_t j = 0; j < n; ++j) {
      const float* g = data.gallery.row_ptr(j);
      double* o = transformed.row_ptr(j);
      for (std::size_t row = 0; row < e; ++row) {
        double acc = 0;
        const double* ar = a.row_ptr(row);
        for (std::size_t k = 0; k < e; ++k) acc += ar[k] * double(g[k]);
        o[row] = acc;
      }
      normalize_row(o, e);
    }
    for (std::size_t i = 0; i < nq; ++i) {
      if (data.query_cluster[i] != c) continue;
      const float* q = data.queries.row_ptr(i);
      double best = -2;
      std::size_t best_row = 0;
      for (std::size_t j = 0; j < n; ++j) {
        double dot = 0;
        const double* o = transformed.row_ptr(j);
        for (std::size_t k = 0; k < e; ++k) dot += double(q[k]) * o[k];
        if (dot > best) {
          best = dot;
          best_row = j;
        }
      }
      if (best_row == data.query_target_row[i]) ++oracle_hits;
    }
  }
  cal.oracle_recall1 = double(oracle_hits) / double(nq);
  return cal;
}

void write_synthetic(const SynthData& data, const std::string& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  require(!ec, ErrorCategory::io, "cannot create output dir " + out_dir);
  auto path = [&](const char* name) { return out_dir + "/" + name; };

  write_qemb(path("queries.qemb"), data.queries.rows, data.queries.cols,
             data.queries.data.data());
  write_ids(path("queries.ids"), data.query_ids);
  write_qemb(path("targets.qemb"), data.targets.rows, data.targets.cols,
             data.targets.data.data());
  write_ids(path("targets.ids"), data.target_ids);
  write_qemb(path("gallery.qemb"), data.gallery.rows, data.gallery.cols,
             data.gallery.data.data());
  write_ids(path("gallery.ids"), data.gallery_ids);
  write_qprs(path("pairs.qprs"), data.pairs);
  write_judgments(path("judgments.tsv"), data.judgments);

  const SynthCalibration cal = calibrate_synthetic(data);
  std::ofstream out(path("calibration.tsv"), std::ios::binary);
  require(out.good(), ErrorCategory::io, "cannot write calibration.tsv");
  char buf[128];
  std::snprintf(buf, sizeof(buf),
                "baseline_recall1\t%.6g\noracle_recall1\t%.6g\n",
                cal.baseline_recall1, cal.oracle_recall1);
  out << buf;
}

}  // namespace quari

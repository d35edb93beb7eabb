#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "quari/eval.hpp"
#include "quari/tensor.hpp"

namespace quari {

// Desk-scale synthetic retrieval benchmark. Each cluster carries a hidden
// rank-r linear map A_c; queries are noisy images of their matched target
// under that map, so a query-conditioned linear transform is the ground
// truth mechanism and any retrieval lift is attributable to learning it.
struct SynthSpec {
  std::size_t clusters = 8;
  std::size_t dim = 64;
  std::size_t rank_true = 8;
  std::size_t eval_queries_per_cluster = 25;
  std::size_t targets_per_cluster = 250;
  std::size_t distractors = 20000;
  double noise = 0.5;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SynthData {
  SynthSpec spec;
  // Queries sample eval_queries_per_cluster targets per cluster; pairs index
  // (queries, targets) rows.
  Tensor2<float> queries;
  std::vector<std::string> query_ids;
  std::vector<std::size_t> query_target_row;  // matched target per query
  std::vector<std::size_t> query_cluster;
  std::vector<std::pair<std::uint64_t, std::uint64_t>> pairs;
  // Targets double as the mining corpus and the head of the gallery.
  Tensor2<float> targets;
  std::vector<std::string> target_ids;
  std::vector<std::size_t> target_cluster;
  // Gallery = targets followed by distractors.
  Tensor2<float> gallery;
  std::vector<std::string> gallery_ids;
  Judgments judgments;
  // Hidden per-cluster maps, kept for the known-transform oracle.
  std::vector<Tensor2<double>> true_maps;
};

SynthData generate_synthetic(const SynthSpec& spec);

// Calibration: recall@1 of raw cosine retrieval and of scoring with the true
// cluster map, both over the full gallery.
struct SynthCalibration {
  double baseline_recall1 = 0;
  double oracle_recall1 = 0;
};

SynthCalibration calibrate_synthetic(const SynthData& data);

// Writes queries/targets/gallery QEMB(+ids), pairs QPRS, judgments TSV and
// the calibration TSV into `out_dir`. Byte-identical for identical specs.
void write_synthetic(const SynthData& data, const std::string& out_dir);

}  // namespace quari

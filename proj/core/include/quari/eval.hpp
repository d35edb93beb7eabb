#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace quari {

// Per-query graded relevance: item id -> grade (>0 means relevant; binary
// tasks use 0/1).
using QueryJudgments = std::map<std::string, double>;
using Judgments = std::map<std::string, QueryJudgments>;

// Ordered item ids for one query (scores already applied; metrics depend on
// order only).
using RankedIds = std::vector<std::string>;

// AP@k with the truncated normalizer min(R, k), binary relevance. Returns
// nullopt for queries with no positive items (excluded from macro means).
std::optional<double> average_precision_at_k(const RankedIds& ranking,
                                             const QueryJudgments& judg,
                                             std::size_t k);

// Graded nDCG@k; ideal DCG over the full judged set truncated at k. Returns
// nullopt when the ideal DCG is zero.
std::optional<double> ndcg_at_k(const RankedIds& ranking,
                                const QueryJudgments& judg, std::size_t k);

// Reciprocal rank of the first relevant retrieved item; 0 when none is.
double mrr(const RankedIds& ranking, const QueryJudgments& judg);

struct MetricReport {
  std::size_t k = 0;
  std::size_t query_count = 0;     // queries with at least one positive
  std::size_t excluded_count = 0;  // queries dropped from the macro means
  // metric name -> per-query values (aligned with query_ids) and macro mean
  std::vector<std::string> query_ids;
  std::map<std::string, std::vector<double>> per_query;
  std::map<std::string, double> means;
};

// Evaluates mAP@k, nDCG@k and MRR over all judged queries present in
// `rankings`. Queries with judgments but no ranking are treated as empty
// rankings.
MetricReport evaluate(const std::map<std::string, RankedIds>& rankings,
                      const Judgments& judgments, std::size_t k);

struct CompareRow {
  std::string metric;
  double baseline_mean = 0;
  double adapted_mean = 0;
  double delta = 0;
  std::size_t wins = 0;    // adapted strictly better per query
  std::size_t losses = 0;  // adapted strictly worse
  std::size_t ties = 0;
};

// Side-by-side deltas; both reports must cover the same query set.
std::vector<CompareRow> compare_runs(const MetricReport& baseline,
                                     const MetricReport& adapted);

}  // namespace quari

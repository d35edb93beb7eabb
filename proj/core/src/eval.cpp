#include "quari/eval.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "quari/error.hpp"

namespace quari {

std::optional<double> average_precision_at_k(const RankedIds& ranking,
                                             const QueryJudgments& judg,
                                             std::size_t k) {
  require(k >= 1, ErrorCategory::usage, "AP@k: k must be >= 1");
  std::size_t total_pos = 0;
  for (const auto& [id, grade] : judg)
    if (grade > 0) ++total_pos;
  if (total_pos == 0) return std::nullopt;
  std::size_t hits = 0;
  double ap = 0;
  const std::size_t depth = std::min(k, ranking.size());
  for (std::size_t i = 0; i < depth; ++i) {
    auto it = judg.find(ranking[i]);
    if (it != judg.end() && it->second > 0) {
      ++hits;
      ap += double(hits) / double(i + 1);
    }
  }
  return ap / double(std::min(total_pos, k));
}

std::optional<double> ndcg_at_k(const RankedIds& ranking,
                                const QueryJudgments& judg, std::size_t k) {
  require(k >= 1, ErrorCategory::usage, "nDCG@k: k must be >= 1");
  double dcg = 0;
  const std::size_t depth = std::min(k, ranking.size());
  for (std::size_t i = 0; i < depth; ++i) {
    auto it = judg.find(ranking[i]);
    if (it != judg.end() && it->second > 0)
      dcg += it->second / std::log2(double(i + 2));
  }
  std::vector<double> grades;
  grades.reserve(judg.size());
  for (const auto& [id, grade] : judg)
    if (grade > 0) grades.push_back(grade);
  std::sort(grades.begin(), grades.end(), std::greater<double>());
  double idcg = 0;
  for (std::size_t i = 0; i < std::min(k, grades.size()); ++i)
    idcg += grades[i] / std::log2(double(i + 2));
  if (idcg == 0) return std::nullopt;
  return dcg / idcg;
}

double mrr(const RankedIds& ranking, const QueryJudgments& judg) {
  for (std::size_t i = 0; i < ranking.size(); ++i) {
    auto it = judg.find(ranking[i]);
    if (it != judg.end() && it->second > 0) return 1.0 / double(i + 1);
  }
  return 0.0;
}

MetricReport evaluate(const std::map<std::string, RankedIds>& rankings,
                      const Judgments& judgments, std::size_t k) {
  MetricReport rep;
  rep.k = k;
  static const RankedIds kEmpty;
  for (const auto& [qid, judg] : judgments) {
    auto rit = rankings.find(qid);
    const RankedIds& ranking = rit == rankings.end() ? kEmpty : rit->second;
    auto ap = average_precision_at_k(ranking, judg, k);
    auto nd = ndcg_at_k(ranking, judg, k);
    if (!ap || !nd) {
      ++rep.excluded_count;
      continue;
    }
    rep.query_ids.push_back(qid);
    rep.per_query["map"].push_back(*ap);
    rep.per_query["ndcg"].push_back(*nd);
    rep.per_query["mrr"].push_back(mrr(ranking, judg));
  }
  rep.query_count = rep.query_ids.size();
  for (const auto& [name, values] : rep.per_query) {
    double sum = 0;
    for (double v : values) sum += v;
    rep.means[name] = values.empty() ? 0.0 : sum / double(values.size());
  }
  return rep;
}

std::vector<CompareRow> compare_runs(const MetricReport& baseline,
                                     const MetricReport& adapted) {
  if (baseline.query_ids != adapted.query_ids) {
    std::set<std::string> a(baseline.query_ids.begin(),
                            baseline.query_ids.end());
    std::set<std::string> b(adapted.query_ids.begin(),
                            adapted.query_ids.end());
    std::string diff;
    for (const auto& q : a)
      if (!b.count(q)) diff += " -" + q;
    for (const auto& q : b)
      if (!a.count(q)) diff += " +" + q;
    fail(ErrorCategory::usage, "query sets differ:" + diff);
  }
  require(baseline.k == adapted.k, ErrorCategory::usage,
          "compare: k settings differ");
  std::vector<CompareRow> rows;
  for (const auto& [metric, base_vals] : baseline.per_query) {
    auto it = adapted.per_query.find(metric);
    require(it != adapted.per_query.end(), ErrorCategory::internal,
            "metric missing from adapted report: " + metric);
    const auto& adapt_vals = it->second;
    CompareRow row;
    row.metric = metric;
    row.baseline_mean = baseline.means.at(metric);
    row.adapted_mean = adapted.means.at(metric);
    row.delta = row.adapted_mean - row.baseline_mean;
    for (std::size_t i = 0; i < base_vals.size(); ++i) {
      if (adapt_vals[i] > base_vals[i])
        ++row.wins;
      else if (adapt_vals[i] < base_vals[i])
        ++row.losses;
      else
        ++row.ties;
    }
    rows.push_back(row);
  }
  return rows;
}

}  // namespace quari

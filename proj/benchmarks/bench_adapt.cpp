#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "quari/retrieval.hpp"

namespace {

using quari::GalleryView;
using quari::LowRankTransform;
using quari::Tensor2;

struct BenchData {
  std::size_t n, e, r;
  std::vector<float> gallery;
  std::vector<std::string> ids;
  std::vector<float> q;
  LowRankTransform<float> t;

  BenchData(std::size_t n_, std::size_t e_, std::size_t r_)
      : n(n_), e(e_), r(r_), gallery(n_ * e_), ids(n_), q(e_) {
    std::mt19937_64 rng(42);
    std::normal_distribution<float> nd(0, 1);
    for (float& x : gallery) x = nd(rng);
    for (float& x : q) x = nd(rng);
    for (std::size_t i = 0; i < n; ++i) ids[i] = "g" + std::to_string(i);
    Tensor2<float> u(e, r), v(e, r);
    for (float& x : u.data) x = nd(rng);
    for (float& x : v.data) x = nd(rng);
    t = LowRankTransform<float>::from_factors(std::move(u), std::move(v));
  }

  GalleryView<float> view() const { return {n, e, gallery.data(), &ids}; }
};

void bm_adapted_lowrank(benchmark::State& state) {
  BenchData d(std::size_t(state.range(0)), std::size_t(state.range(1)),
              std::size_t(state.range(2)));
  std::vector<double> scores;
  for (auto _ : state) {
    quari::adapted_scores_lowrank(d.t, d.q.data(), d.view(), scores);
    benchmark::DoNotOptimize(scores.data());
  }
  state.SetItemsProcessed(std::int64_t(state.iterations()) *
                          std::int64_t(d.n));
}

void bm_adapted_dense(benchmark::State& state) {
  BenchData d(std::size_t(state.range(0)), std::size_t(state.range(1)),
              std::size_t(state.range(2)));
  std::vector<double> scores;
  for (auto _ : state) {
    quari::adapted_scores_dense(d.t, d.q.data(), d.view(), scores);
    benchmark::DoNotOptimize(scores.data());
  }
  state.SetItemsProcessed(std::int64_t(state.iterations()) *
                          std::int64_t(d.n));
}

void bm_baseline_cosine(benchmark::State& state) {
  BenchData d(std::size_t(state.range(0)), std::size_t(state.range(1)), 4);
  for (auto _ : state) {
    auto res = quari::baseline_search(d.view(), d.q.data(), 10);
    benchmark::DoNotOptimize(res.entries.data());
  }
  state.SetItemsProcessed(std::int64_t(state.iterations()) *
                          std::int64_t(d.n));
}

}  // namespace

// args: {gallery size N, embedding dim E, transform rank r}
BENCHMARK(bm_adapted_lowrank)
    ->Args({2000, 256, 32})
    ->Args({2000, 768, 64})
    ->Args({20000, 768, 64})
    ->Unit(benchmark::kMillisecond);
BENCHMARK(bm_adapted_dense)
    ->Args({2000, 256, 32})
    ->Args({2000, 768, 64})
    ->Unit(benchmark::kMillisecond);
BENCHMARK(bm_baseline_cosine)
    ->Args({20000, 768})
    ->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();

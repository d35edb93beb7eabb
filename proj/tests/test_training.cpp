#include <doctest.h>

#include <cmath>
#include <random>

#include "quari/training.hpp"

using namespace quari;

TEST_CASE("query noise second moment is dim/3") {
  // q += u (.) eps termwise with u ~ U[0,1], eps ~ N(0,1):
  // E[||noise||^2] = dim * E[u^2] E[eps^2] = dim / 3.
  const std::size_t dim = 64, draws = 100000;
  std::mt19937_64 rng(12345);
  double sum_sq = 0;
  std::vector<double> q(dim, 0.0);
  for (std::size_t i = 0; i < draws; ++i) {
    std::fill(q.begin(), q.end(), 0.0);
    add_query_noise(q.data(), dim, rng, NoiseMode::elementwise);
    for (double x : q) sum_sq += x * x;
  }
  const double moment = sum_sq / double(draws);
  CHECK(moment == doctest::Approx(dim / 3.0).epsilon(0.05));
}

TEST_CASE("scalar noise mode shares one amplitude per draw") {
  // with a single u the coordinates are conditionally iid N(0, u^2); the
  // second moment stays dim/3 but per-draw amplitudes correlate.
  const std::size_t dim = 64, draws = 100000;
  std::mt19937_64 rng(4242);
  double sum_sq = 0;
  std::vector<double> q(dim, 0.0);
  for (std::size_t i = 0; i < draws; ++i) {
    std::fill(q.begin(), q.end(), 0.0);
    add_query_noise(q.data(), dim, rng, NoiseMode::scalar_u);
    for (double x : q) sum_sq += x * x;
  }
  CHECK(sum_sq / double(draws) == doctest::Approx(dim / 3.0).epsilon(0.05));
}

TEST_CASE("noise mode none leaves the query untouched") {
  std::mt19937_64 rng(1);
  std::vector<double> q = {1.0, -2.0, 3.0};
  add_query_noise(q.data(), 3, rng, NoiseMode::none);
  CHECK(q == std::vector<double>{1.0, -2.0, 3.0});
}

TEST_CASE("noise mode parsing") {
  CHECK(parse_noise_mode("none") == NoiseMode::none);
  CHECK(parse_noise_mode("elementwise") == NoiseMode::elementwise);
  CHECK(parse_noise_mode("scalar") == NoiseMode::scalar_u);
  CHECK_THROWS_AS((void)parse_noise_mode("bogus"), Error);
}

namespace {

// 101 one-hot-ish items: rows 0 and 1 identical, rows 2..100 on distinct axes.
Tensor2<double> duplicate_corpus() {
  Tensor2<double> c(101, 102);
  c.at(0, 0) = 1.0;
  c.at(1, 0) = 1.0;
  for (std::size_t i = 2; i < 101; ++i) c.at(i, i) = 1.0;
  return c;
}

}  // namespace

TEST_CASE("mining weights: one duplicate among orthogonal items") {
  MiningIndex idx = MiningIndex::build(duplicate_corpus());
  const auto& nb = idx.neighbors(0);
  REQUIRE(nb.size() == 100);
  CHECK(nb[0].id == 1);
  CHECK(nb[0].cosine == doctest::Approx(1.0));
  // softmax over {1, 0 x 99}: e / (e + 99)
  const double expect = std::exp(1.0) / (std::exp(1.0) + 99.0);
  CHECK(nb[0].weight == doctest::Approx(expect).epsilon(1e-12));
  CHECK(nb[1].weight == doctest::Approx(1.0 / (std::exp(1.0) + 99.0)));
  double total = 0;
  for (const auto& e : nb) total += e.weight;
  CHECK(total == doctest::Approx(1.0));
}

TEST_CASE("mining weights: identical items give the uniform 0.01") {
  Tensor2<double> c(101, 4);
  for (std::size_t i = 0; i < 101; ++i) c.at(i, 1) = 2.5;
  MiningIndex idx = MiningIndex::build(c);
  for (const auto& e : idx.neighbors(42)) {
    CHECK(e.cosine == doctest::Approx(1.0));
    CHECK(e.weight == doctest::Approx(0.01).epsilon(1e-12));
  }
  // tie-break by item id, self excluded
  CHECK(idx.neighbors(0)[0].id == 1);
  CHECK(idx.neighbors(1)[0].id == 0);
}

TEST_CASE("mining rejects a corpus below 101 items") {
  Tensor2<double> c(100, 8);
  CHECK_THROWS_AS((void)MiningIndex::build(c), Error);
}

TEST_CASE("semi-positive mining picks at most top-2 in-batch neighbors") {
  MiningIndex idx = MiningIndex::build(duplicate_corpus());
  // batch targets: 0 and its duplicate 1, plus two orthogonal rows
  std::vector<std::size_t> rows = {0, 1, 5, 9};
  auto semi = mine_semi_positives(idx, rows);
  REQUIRE(semi.size() == 4);
  REQUIRE(semi[0].size() == 2);  // duplicate + one orthogonal in-batch item
  CHECK(semi[0][0].column == 1);
  CHECK(semi[0][0].weight ==
        doctest::Approx(std::exp(1.0) / (std::exp(1.0) + 99.0)));
  CHECK(semi[0][1].weight == doctest::Approx(1.0 / (std::exp(1.0) + 99.0)));
  // row 2 (=corpus 5): orthogonal to everything, so its neighbor softmax is
  // uniform over 100 zero cosines
  for (const auto& sp : semi[2])
    CHECK(sp.weight == doctest::Approx(0.01));

  Tensor2<double> alpha = make_alpha<double>(4, semi);
  for (std::size_t i = 0; i < 4; ++i) CHECK(alpha.at(i, i) == 1.0);
  CHECK(alpha.at(0, 1) == doctest::Approx(semi[0][0].weight));
  CHECK(alpha.at(3, 0) == doctest::Approx(semi[3][0].weight));
}

namespace {

TensorPtr<double> watched(Tape<double>& tape, Tensor2<double> v) {
  auto t = make_tensor(std::move(v));
  tape.watch(t);
  return t;
}

}  // namespace

TEST_CASE("loss anchors") {
  SUBCASE("uniform similarities give exactly log B") {
    for (std::size_t b : {2, 3, 5}) {
      Tape<double> tape;
      auto s = watched(tape, Tensor2<double>(b, b));  // all zeros
      Tensor2<double> alpha = make_alpha<double>(
          b, std::vector<std::vector<SemiPositive>>(b));
      auto loss = symmetric_contrastive_loss(tape, s, alpha);
      CHECK(loss->data[0] == doctest::Approx(std::log(double(b))).epsilon(1e-12));
    }
  }

  SUBCASE("saturated cosine diagonal at tau=0.07 is below 1e-3") {
    const std::size_t b = 4;
    Tensor2<double> s(b, b);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < b; ++j)
        s.at(i, j) = (i == j ? 1.0 : -1.0) / 0.07;
    Tape<double> tape;
    auto sp = watched(tape, std::move(s));
    Tensor2<double> alpha =
        make_alpha<double>(b, std::vector<std::vector<SemiPositive>>(b));
    auto loss = symmetric_contrastive_loss(tape, sp, alpha);
    CHECK(loss->data[0] >= 0.0);
    CHECK(loss->data[0] <= 1e-3);
  }

  SUBCASE("B=3 semi-positive value matches scalar arithmetic") {
    // S fixed; alpha has one off-diagonal weight w at (0,1).
    Tensor2<double> s = Tensor2<double>::from(
        {{2.0, 1.0, 0.0}, {0.5, 1.5, -0.5}, {0.0, 0.25, 1.0}});
    const double w = 0.3;
    std::vector<std::vector<SemiPositive>> semi(3);
    semi[0] = {{1, w}};
    Tensor2<double> alpha = make_alpha<double>(3, semi);

    auto lse3 = [](double a, double b, double c) {
      double m = std::max({a, b, c});
      return m + std::log(std::exp(a - m) + std::exp(b - m) + std::exp(c - m));
    };
    double row = 0, col = 0;
    // rows: -sum_j alpha_ij (s_ij - lse(row i))
    double l0 = lse3(2.0, 1.0, 0.0), l1 = lse3(0.5, 1.5, -0.5),
           l2 = lse3(0.0, 0.25, 1.0);
    row -= (2.0 - l0) + w * (1.0 - l0);
    row -= (1.5 - l1);
    row -= (1.0 - l2);
    // columns: -sum_i alpha_ij (s_ij - lse(col j)) on S^T rows
    double c0 = lse3(2.0, 0.5, 0.0), c1 = lse3(1.0, 1.5, 0.25),
           c2 = lse3(0.0, -0.5, 1.0);
    col -= (2.0 - c0);
    col -= (1.5 - c1) + w * (1.0 - c1);
    col -= (1.0 - c2);
    const double expect = (row + col) / (2.0 * 3.0);

    Tape<double> tape;
    auto sp = watched(tape, std::move(s));
    auto loss = symmetric_contrastive_loss(tape, sp, alpha);
    CHECK(loss->data[0] == doctest::Approx(expect).epsilon(1e-12));
  }

  SUBCASE("alpha diagonal must be exactly one") {
    Tape<double> tape;
    auto s = watched(tape, Tensor2<double>(2, 2));
    Tensor2<double> alpha(2, 2);
    alpha.at(0, 0) = 1.0;
    alpha.at(1, 1) = 0.5;
    CHECK_THROWS_AS((void)symmetric_contrastive_loss(tape, s, alpha), Error);
  }
}

TEST_CASE("batch similarity is scale-invariant in cosine form") {
  std::mt19937_64 rng(55);
  std::normal_distribution<double> n(0, 1);
  const std::size_t b = 3, e = 8, r = 2;
  Tensor2<double> targets(b, e);
  for (double& x : targets.data) x = n(rng);

  auto build = [&](double qscale) {
    std::mt19937_64 local(77);
    Tape<double> tape;
    Tensor2<double> tc = targets;
    auto t = tape.constant(std::move(tc));
    std::vector<HypernetOutput<double>> outs;
    for (std::size_t i = 0; i < b; ++i) {
      Tensor2<double> u(r, e), v(r, e), q(1, e);
      for (double& x : u.data) x = n(local);
      for (double& x : v.data) x = n(local);
      for (double& x : q.data) x = n(local) * qscale;
      outs.push_back({tape.constant(std::move(q)), tape.constant(std::move(u)),
                      tape.constant(std::move(v))});
    }
    auto sim = batch_similarity(tape, outs, t, 0.07, true);
    return sim->data;
  };
  auto a = build(1.0), c = build(10.0);
  for (std::size_t i = 0; i < a.size(); ++i)
    CHECK(a[i] == doctest::Approx(c[i]).epsilon(1e-9));
}

TEST_CASE("batch similarity matches a scalar oracle for B=1, r=1") {
  // u = e0, v = e1, q' = e0, d = (3,4): T d = u (v . d) = 4 e0,
  // cos(q', T d) = 1, S = 1/tau.
  Tape<double> tape;
  auto u = tape.constant(Tensor2<double>::from({{1.0, 0.0}}));
  auto v = tape.constant(Tensor2<double>::from({{0.0, 1.0}}));
  auto q = tape.constant(Tensor2<double>::from({{1.0, 0.0}}));
  auto d = tape.constant(Tensor2<double>::from({{3.0, 4.0}}));
  std::vector<HypernetOutput<double>> outs = {{q, u, v}};
  auto sim = batch_similarity(tape, outs, d, 0.07, true);
  CHECK(sim->data[0] == doctest::Approx(1.0 / 0.07).epsilon(1e-12));
}

TEST_CASE("cosine learning-rate schedule anchors") {
  OptimizerState st;
  st.lr_max = 1e-5;
  st.lr_min = 2e-7;
  st.cycle_length = 100;
  CHECK(lr_at(0, st) == doctest::Approx(1e-5));
  CHECK(lr_at(50, st) == doctest::Approx(5.1e-6));  // midpoint of the cycle
  CHECK(lr_at(100, st) == doctest::Approx(1e-5));   // cycles back up
  CHECK(lr_at(99, st) > st.lr_min);
  CHECK(lr_at(99, st) < lr_at(98, st));
}

TEST_CASE("adamw first step matches scalar arithmetic") {
  auto t = make_tensor<double>(1, 1);
  t->data[0] = 0.5;
  t->requires_grad = true;
  t->ensure_grad();
  t->grad[0] = 0.2;
  std::vector<std::pair<std::string, TensorPtr<double>>> named = {{"w", t}};
  OptimizerState st;
  st.lr_max = st.lr_min = 1e-2;  // constant lr for the oracle
  st.weight_decay = 0.1;
  st.cycle_length = 10;
  adamw_step(named, st);
  // m = 0.1 g, v = 0.001 g^2, mhat = g, vhat = g^2
  // step = lr * (g / (|g| + eps) + wd * x)
  const double expect =
      0.5 - 1e-2 * (0.2 / (std::sqrt(0.04) + 1e-8) + 0.1 * 0.5);
  CHECK(t->data[0] == doctest::Approx(expect).epsilon(1e-12));
  CHECK(st.step == 1);
}

TEST_CASE("adamw decouples weight decay from the gradient") {
  auto t = make_tensor<double>(1, 1);
  t->data[0] = 2.0;
  t->requires_grad = true;
  t->ensure_grad();
  t->grad[0] = 0.0;
  std::vector<std::pair<std::string, TensorPtr<double>>> named = {{"w", t}};
  OptimizerState st;
  st.lr_max = st.lr_min = 1e-3;
  st.weight_decay = 0.5;
  st.cycle_length = 10;
  adamw_step(named, st);
  // zero gradient: pure multiplicative shrink by lr * wd
  CHECK(t->data[0] == doctest::Approx(2.0 * (1.0 - 1e-3 * 0.5)).epsilon(1e-12));
}

TEST_CASE("adamw skips the whole step on a non-finite gradient") {
  auto a = make_tensor<double>(1, 1);
  auto b = make_tensor<double>(1, 1);
  a->data[0] = 1.0;
  b->data[0] = 1.0;
  for (auto& t : {a, b}) {
    t->requires_grad = true;
    t->ensure_grad();
  }
  a->grad[0] = std::nan("");
  b->grad[0] = 0.5;
  std::vector<std::pair<std::string, TensorPtr<double>>> named = {{"a", a},
                                                                  {"b", b}};
  OptimizerState st;
  st.cycle_length = 10;
  adamw_step(named, st);
  CHECK(a->data[0] == 1.0);
  CHECK(b->data[0] == 1.0);  // untouched: the step is skipped atomically
  CHECK(st.skipped == 1);
  CHECK(st.step == 1);
}

namespace {

TrainDataset tiny_dataset(std::size_t n, std::size_t e, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0, 1);
  TrainDataset d;
  d.queries = Tensor2<double>(n, e);
  d.targets = Tensor2<double>(n, e);
  for (double& x : d.targets.data) x = nd(rng);
  // queries = noisy copies of their targets so the task is learnable
  for (std::size_t i = 0; i < n * e; ++i)
    d.queries.data[i] = d.targets.data[i] + 0.1 * nd(rng);
  for (std::size_t i = 0; i < n; ++i) d.pairs.emplace_back(i, i);
  return d;
}

HypernetConfig train_config(std::size_t e) {
  HypernetConfig cfg;
  cfg.embed_dim = e;
  cfg.rank = 2;
  cfg.model_dim = 16;
  cfg.heads = 2;
  cfg.ffn_dim = 32;
  cfg.layers = 1;
  cfg.refine_steps = 1;
  return cfg;
}

}  // namespace

TEST_CASE("training descends on a tiny dataset") {
  auto data = tiny_dataset(101, 8, 3);
  auto mining = MiningIndex::build(data.targets);
  std::mt19937_64 rng(9);
  auto params = HypernetParams<double>::init(train_config(8), rng);

  TrainSettings s;
  s.batch = 16;
  s.epochs = 30;
  s.seed = 5;
  s.lr_max = 3e-3;
  s.lr_min = 1e-4;
  s.noise_mode = NoiseMode::none;
  auto log = train(params, data, mining, s);
  REQUIRE(log.epochs.size() == 30);
  CHECK(log.epochs.back().mean_loss < log.epochs.front().mean_loss);
  CHECK(log.skipped_steps == 0);
}

TEST_CASE("training is bitwise deterministic for a fixed seed") {
  auto data = tiny_dataset(101, 6, 21);
  auto mining = MiningIndex::build(data.targets);
  auto run = [&]() {
    std::mt19937_64 rng(33);
    auto params = HypernetParams<double>::init(train_config(6), rng);
    TrainSettings s;
    s.batch = 8;
    s.epochs = 2;
    s.seed = 77;
    train(params, data, mining, s);
    std::vector<double> flat;
    for (auto& [name, t] : params.named_tensors())
      flat.insert(flat.end(), t->data.begin(), t->data.end());
    return flat;
  };
  CHECK(run() == run());
}

TEST_CASE("max_steps caps the optimizer steps") {
  auto data = tiny_dataset(101, 6, 2);
  auto mining = MiningIndex::build(data.targets);
  std::mt19937_64 rng(1);
  auto params = HypernetParams<double>::init(train_config(6), rng);
  TrainSettings s;
  s.batch = 8;
  s.epochs = 100;
  s.max_steps = 5;
  std::size_t checkpoints = 0, last_step = 0;
  s.checkpoint_every = 2;
  auto log = train(params, data, mining, s,
                   CheckpointFn([&](std::size_t step,
                                    const HypernetParams<double>&) {
                     ++checkpoints;
                     last_step = step;
                   }));
  CHECK(log.steps == 5);
  CHECK(last_step == 5);       // final checkpoint always fires
  CHECK(checkpoints == 3);     // steps 2, 4 and the final one
}

TEST_CASE("train validates dimensions and pairs") {
  auto data = tiny_dataset(101, 6, 2);
  auto mining = MiningIndex::build(data.targets);
  std::mt19937_64 rng(1);
  auto params = HypernetParams<double>::init(train_config(8), rng);
  TrainSettings s;
  CHECK_THROWS_AS((void)train(params, data, mining, s), Error);

  auto params6 = HypernetParams<double>::init(train_config(6), rng);
  TrainDataset empty = data;
  empty.pairs.clear();
  CHECK_THROWS_AS((void)train(params6, empty, mining, s), Error);
}

// quari: hypernetwork-adapted retrieval toolkit.
//
// Subcommands: gen-synth, train, check-grad, index, search, rerank, eval,
// bench. All randomness flows from --seed through named substreams, so
// identical invocations produce identical output bytes.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <random>
#include <thread>

#include <CLI11.hpp>

#include "quari/error.hpp"
#include "quari/eval.hpp"
#include "quari/gradcheck.hpp"
#include "quari/hypernet.hpp"
#include "quari/io.hpp"
#include "quari/retrieval.hpp"
#include "quari/rng.hpp"
#include "quari/synth.hpp"
#include "quari/training.hpp"

namespace {

using namespace quari;

void emit(const std::string& text, const std::string& out_path) {
  if (out_path.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream out(out_path, std::ios::binary);
  require(out.good(), ErrorCategory::io, "cannot open " + out_path);
  out << text;
  require(out.good(), ErrorCategory::io, "write failed: " + out_path);
}

std::size_t default_threads() {
  const unsigned hc = std::thread::hardware_concurrency();
  return hc ? hc : 1;
}

Tensor2<double> widen(const EmbeddingFile& f) {
  Tensor2<double> t(f.n, f.e);
  for (std::size_t i = 0; i < f.data.size(); ++i) t.data[i] = f.data[i];
  return t;
}

// One hypernet pass in inference mode: q -> (q' as f32, T as f32).
struct AdaptedQuery {
  std::vector<float> qprime;
  LowRankTransform<float> transform;
};

AdaptedQuery adapt_query(const HypernetParams<double>& params, const float* q) {
  const std::size_t e = params.config.embed_dim;
  Tape<double> tape;
  Tensor2<double> qrow(1, e);
  for (std::size_t i = 0; i < e; ++i) qrow.data[i] = q[i];
  auto out = hypernet_forward(tape, params, tape.constant(std::move(qrow)));
  AdaptedQuery a;
  a.qprime.resize(e);
  for (std::size_t i = 0; i < e; ++i)
    a.qprime[i] = static_cast<float>(out.qprime->data[i]);
  a.transform =
      cast_transform<float>(to_transform<double>(*out.u_rows, *out.v_rows));
  return a;
}

int cmd_gen_synth(const SynthSpec& spec, const std::string& out_dir) {
  SynthData data = generate_synthetic(spec);
  write_synthetic(data, out_dir);
  SynthCalibration cal = calibrate_synthetic(data);
  std::printf("baseline_recall1\t%.6g\noracle_recall1\t%.6g\n",
              cal.baseline_recall1, cal.oracle_recall1);
  return 0;
}

struct TrainArgs {
  std::string queries, targets, pairs, config_path, out;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::size_t max_steps = 0;
  std::size_t checkpoint_every = 0;
};

int cmd_train(const TrainArgs& a) {
  RunConfig cfg = a.config_path.empty() ? RunConfig::parse("")
                                        : RunConfig::load(a.config_path);
  EmbeddingFile qf = read_qemb(a.queries);
  EmbeddingFile tf = read_qemb(a.targets);
  require(qf.e == tf.e, ErrorCategory::dimension,
          "query dim " + std::to_string(qf.e) + " != target dim " +
              std::to_string(tf.e));
  TrainDataset data;
  data.queries = widen(qf);
  data.targets = widen(tf);
  data.pairs = read_qprs(a.pairs);
  for (const auto& pr : data.pairs)
    require(pr.first < qf.n && pr.second < tf.n, ErrorCategory::format,
            "pair row out of range");

  const std::uint64_t seed = a.seed_set ? a.seed : cfg.seed();
  TrainSettings s;
  s.batch = cfg.batch();
  s.tau = cfg.tau();
  s.lr_max = cfg.lr_max();
  s.lr_min = cfg.lr_min();
  s.weight_decay = cfg.weight_decay();
  s.epochs = cfg.epochs();
  s.seed = seed;
  s.noise_mode = parse_noise_mode(cfg.noise_mode());
  s.loss_norm = cfg.loss_norm();
  s.max_steps = a.max_steps;
  s.checkpoint_every = a.checkpoint_every;

  SeedSplitter split(seed);
  auto init_rng = split.stream("hypernet/init");
  auto params =
      HypernetParams<double>::init(cfg.hypernet_config(qf.e), init_rng);

  MiningIndex mining = MiningIndex::build(data.targets);
  TrainLog log = train(params, data, mining, s,
                       CheckpointFn([&](std::size_t,
                                        const HypernetParams<double>& p) {
                         save_checkpoint(a.out, p);
                       }));
  for (const EpochStats& ep : log.epochs)
    std::printf("epoch\t%zu\tloss\t%.6g\tbatch_top1\t%.6g\n", ep.epoch,
                ep.mean_loss, ep.batch_top1);
  std::printf("steps\t%zu\nskipped_steps\t%zu\ncheckpoint\t%s\n", log.steps,
              log.skipped_steps, a.out.c_str());
  return 0;
}

int cmd_check_grad(std::uint64_t seed) {
  GradCheckSpec gc;
  gc.config.embed_dim = 16;
  gc.config.rank = 4;
  gc.config.model_dim = 32;
  gc.config.heads = 4;
  gc.config.ffn_dim = 64;
  gc.config.layers = 2;
  gc.config.refine_steps = 2;
  gc.batch = 4;
  gc.seed = seed;
  GradCheckReport rep = grad_check(gc);
  std::printf("max_rel_err\t%.3e\tworst\t%s\tchecked\t%zu\n", rep.max_rel_err,
              rep.worst_tensor.c_str(), rep.checked);
  return rep.max_rel_err <= 1e-4 ? 0 : 1;
}

int cmd_index(const std::string& qemb, const std::string& ids,
              const std::string& out) {
  GalleryIndex g = load_gallery(qemb, ids, /*mmap=*/true);
  std::size_t nonfinite = 0;
  for (std::size_t i = 0; i < g.n * g.e; ++i)
    if (!std::isfinite(g.data[i])) ++nonfinite;
  if (!out.empty()) {
    write_qemb(out + ".qemb", g.n, g.e, g.data);
    write_ids(out + ".ids", g.ids);
  }
  std::printf("items\t%zu\ndim\t%zu\nnonfinite\t%zu\n", g.n, g.e, nonfinite);
  return 0;
}

struct SearchArgs {
  std::string gallery, queries, query_ids, adapt, out;
  std::size_t k = 100;
  std::size_t threads = 0;
};

int cmd_search(const SearchArgs& a) {
  require(a.k >= 1, ErrorCategory::usage, "k must be >= 1");
  GalleryIndex g = load_gallery(a.gallery + ".qemb", a.gallery + ".ids");
  GalleryView<float> view = view_of(g);
  EmbeddingFile qf = read_qemb(a.queries);
  std::vector<std::string> qids = read_ids(a.query_ids);
  require(qids.size() == qf.n, ErrorCategory::dimension,
          "query id count != query rows");
  require(qf.e == g.e, ErrorCategory::dimension,
          "query dim != gallery dim");
  const std::size_t threads = a.threads ? a.threads : default_threads();

  HypernetParams<double> params;
  if (!a.adapt.empty()) {
    params = load_checkpoint(a.adapt);
    require(params.config.embed_dim == g.e, ErrorCategory::dimension,
            "checkpoint embed_dim != gallery dim");
    params.set_requires_grad(false);
  }

  std::vector<RankedList> lists(qf.n);
  for (std::size_t i = 0; i < qf.n; ++i) {
    const float* q = qf.data.data() + i * qf.e;
    if (a.adapt.empty()) {
      lists[i] = baseline_search(view, q, a.k, threads);
    } else {
      AdaptedQuery aq = adapt_query(params, q);
      lists[i] = adapted_search_lowrank(aq.transform, aq.qprime.data(), view,
                                        a.k, threads);
    }
    lists[i].query_id = qids[i];
  }
  emit(format_rankings(lists, g.ids), a.out);
  return 0;
}

struct RerankArgs {
  std::string gallery, queries, query_ids, adapt, candidates, out;
};

int cmd_rerank(const RerankArgs& a) {
  GalleryIndex g = load_gallery(a.gallery + ".qemb", a.gallery + ".ids");
  GalleryView<float> view = view_of(g);
  EmbeddingFile qf = read_qemb(a.queries);
  std::vector<std::string> qids = read_ids(a.query_ids);
  require(qids.size() == qf.n, ErrorCategory::dimension,
          "query id count != query rows");
  require(qf.e == g.e, ErrorCategory::dimension, "query dim != gallery dim");
  auto cand = read_candidates(a.candidates);

  std::map<std::string, std::uint32_t> row_of;
  for (std::size_t i = 0; i < g.n; ++i)
    row_of[g.ids[i]] = static_cast<std::uint32_t>(i);

  HypernetParams<double> params = load_checkpoint(a.adapt);
  require(params.config.embed_dim == g.e, ErrorCategory::dimension,
          "checkpoint embed_dim != gallery dim");
  params.set_requires_grad(false);

  std::vector<RankedList> lists;
  for (std::size_t i = 0; i < qf.n; ++i) {
    auto it = cand.find(qids[i]);
    if (it == cand.end()) continue;
    std::vector<std::uint32_t> rows;
    rows.reserve(it->second.size());
    for (const std::string& id : it->second) {
      auto rit = row_of.find(id);
      require(rit != row_of.end(), ErrorCategory::usage,
              "candidate item " + id + " not in gallery");
      rows.push_back(rit->second);
    }
    AdaptedQuery aq = adapt_query(params, qf.data.data() + i * qf.e);
    RankedList rl = rerank(aq.transform, aq.qprime.data(), view, rows);
    rl.query_id = qids[i];
    lists.push_back(std::move(rl));
  }
  emit(format_rankings(lists, g.ids), a.out);
  return 0;
}

struct EvalArgs {
  std::string rankings, judgments, baseline, out;
  std::size_t k = 100;
};

int cmd_eval(const EvalArgs& a) {
  require(a.k >= 1, ErrorCategory::usage, "k must be >= 1");
  Judgments judg = read_judgments(a.judgments);
  MetricReport run = evaluate(read_rankings(a.rankings), judg, a.k);
  if (a.baseline.empty()) {
    emit(format_metric_report(run), a.out);
  } else {
    MetricReport base = evaluate(read_rankings(a.baseline), judg, a.k);
    emit(format_compare(compare_runs(base, run)), a.out);
  }
  return 0;
}

struct BenchArgs {
  std::size_t n = 100000, e = 768, r = 64;
  std::size_t threads = 0;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_bench(const BenchArgs& a) {
  require(a.n >= 1 && a.e >= 1 && a.r >= 1 && a.r <= a.e,
          ErrorCategory::usage, "need n,e >= 1 and 1 <= r <= e");
  SeedSplitter split(a.seed);
  auto rng = split.stream("bench/data");
  std::normal_distribution<float> normal(0.0f, 1.0f);
  std::vector<float> rows(a.n * a.e);
  for (float& x : rows) x = normal(rng);
  std::vector<std::string> ids(a.n);  // ids unused by the kernel
  GalleryIndex g = GalleryIndex::own(a.n, a.e, std::move(rows),
                                     std::move(ids));
  Tensor2<float> u(a.e, a.r), v(a.e, a.r);
  for (float& x : u.data) x = normal(rng) * 0.1f;
  for (float& x : v.data) x = normal(rng) * 0.1f;
  auto t = LowRankTransform<float>::from_factors(std::move(u), std::move(v));

  const std::size_t shards = a.threads ? a.threads : default_threads();
  ThroughputReport rep = batch_adapt_throughput(t, view_of(g), shards);
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "n\t%zu\ne\t%zu\nr\t%zu\nshards\t%zu\n"
                "dense_seconds\t%.6g\nlowrank_seconds\t%.6g\n"
                "dense_items_per_sec\t%.6g\nlowrank_items_per_sec\t%.6g\n"
                "speedup\t%.6g\nflop_ratio\t%.6g\nspeedup_at_least_5x\t%d\n"
                "checksum\t%.6g\n",
                rep.n, rep.e, rep.r, rep.shards, rep.dense_seconds,
                rep.lowrank_seconds, rep.dense_items_per_sec,
                rep.lowrank_items_per_sec, rep.speedup, rep.flop_ratio,
                rep.speedup_at_least_5x ? 1 : 0, rep.checksum);
  emit(buf, a.out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hypernetwork-adapted retrieval toolkit"};
  app.require_subcommand(1);

  // gen-synth
  SynthSpec spec;
  std::string synth_out;
  auto* gen = app.add_subcommand(
      "gen-synth", "generate the synthetic clustered retrieval benchmark");
  gen->add_option("--out", synth_out, "output directory")->required();
  gen->add_option("--seed", spec.seed, "random seed");
  gen->add_option("--clusters", spec.clusters, "cluster count");
  gen->add_option("--dim", spec.dim, "embedding dimension");
  gen->add_option("--rank-true", spec.rank_true, "rank of the hidden maps");
  gen->add_option("--eval-per-cluster", spec.eval_queries_per_cluster,
                  "held-out eval queries per cluster");
  gen->add_option("--targets-per-cluster", spec.targets_per_cluster,
                  "targets per cluster");
  gen->add_option("--distractors", spec.distractors, "distractor count");
  gen->add_option("--noise", spec.noise, "query noise level");

  // train
  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "train the hypernetwork");
  tr->add_option("--queries", ta.queries, "training queries .qemb")->required();
  tr->add_option("--targets", ta.targets, "target corpus .qemb")->required();
  tr->add_option("--pairs", ta.pairs, "matched pairs .qprs")->required();
  tr->add_option("--config", ta.config_path, "run config (key = value)");
  tr->add_option("--out", ta.out, "checkpoint output path")->required();
  auto* seed_opt = tr->add_option("--seed", ta.seed, "override config seed");
  tr->add_option("--max-steps", ta.max_steps, "stop after this many steps");
  tr->add_option("--checkpoint-every", ta.checkpoint_every,
                 "checkpoint interval in steps");
  tr->add_option("--threads", "accepted for symmetry; training is "
                 "single-threaded for determinism");

  // check-grad
  std::uint64_t cg_seed = 0;
  auto* cg = app.add_subcommand(
      "check-grad", "finite-difference check of the training gradients");
  cg->add_option("--seed", cg_seed, "random seed");

  // index
  std::string ix_emb, ix_ids, ix_out;
  auto* ix = app.add_subcommand("index", "validate (and copy) a gallery");
  ix->add_option("--embeddings", ix_emb, "gallery .qemb")->required();
  ix->add_option("--ids", ix_ids, "gallery .ids")->required();
  ix->add_option("--out", ix_out, "write validated copy to PREFIX.{qemb,ids}");

  // search
  SearchArgs sa;
  auto* se = app.add_subcommand("search", "rank a gallery for each query");
  se->add_option("--gallery", sa.gallery, "gallery PREFIX (.qemb/.ids)")
      ->required();
  se->add_option("--queries", sa.queries, "queries .qemb")->required();
  se->add_option("--query-ids", sa.query_ids, "query ids file")->required();
  se->add_option("--k", sa.k, "list depth");
  se->add_option("--adapt", sa.adapt,
                 "hypernetwork checkpoint; omit for raw cosine baseline");
  se->add_option("--threads", sa.threads, "scoring threads");
  se->add_option("--out", sa.out, "rankings TSV (default stdout)");

  // rerank
  RerankArgs ra;
  auto* rr = app.add_subcommand("rerank",
                                "rescore fixed candidate lists per query");
  rr->add_option("--gallery", ra.gallery, "gallery PREFIX")->required();
  rr->add_option("--queries", ra.queries, "queries .qemb")->required();
  rr->add_option("--query-ids", ra.query_ids, "query ids file")->required();
  rr->add_option("--adapt", ra.adapt, "hypernetwork checkpoint")->required();
  rr->add_option("--candidates", ra.candidates,
                 "query_id<TAB>item_id candidate TSV")->required();
  rr->add_option("--out", ra.out, "rankings TSV (default stdout)");

  // eval
  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "score rankings against judgments");
  ev->add_option("--rankings", ea.rankings, "rankings TSV")->required();
  ev->add_option("--judgments", ea.judgments, "judgments TSV")->required();
  ev->add_option("--k", ea.k, "cutoff for mAP/nDCG");
  ev->add_option("--baseline", ea.baseline,
                 "baseline rankings TSV; emits a side-by-side delta table");
  ev->add_option("--out", ea.out, "report TSV (default stdout)");

  // bench
  BenchArgs ba;
  auto* be = app.add_subcommand(
      "bench", "dense vs factored adapted-scoring throughput");
  be->add_option("--n", ba.n, "gallery size");
  be->add_option("--e", ba.e, "embedding dimension");
  be->add_option("--r", ba.r, "transform rank");
  be->add_option("--threads", ba.threads, "shards");
  be->add_option("--seed", ba.seed, "random seed");
  be->add_option("--out", ba.out, "report TSV (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_synth(spec, synth_out);
    if (tr->parsed()) {
      ta.seed_set = seed_opt->count() > 0;
      return cmd_train(ta);
    }
    if (cg->parsed()) return cmd_check_grad(cg_seed);
    if (ix->parsed()) return cmd_index(ix_emb, ix_ids, ix_out);
    if (se->parsed()) return cmd_search(sa);
    if (rr->parsed()) return cmd_rerank(ra);
    if (ev->parsed()) return cmd_eval(ea);
    if (be->parsed()) return cmd_bench(ba);
  } catch (const quari::Error& e) {
    std::cerr << e.formatted() << "\n";
    return e.category() == quari::ErrorCategory::usage ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error:internal: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

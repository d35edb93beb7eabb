#include "quari/retrieval.hpp"

#include <atomic>

namespace quari {

namespace {

// Plain f32 kernels used only for the timing comparison; both paths use the
// same accumulation width so the measured ratio reflects FLOPs, not
// precision policy.
float dot_f32(const float* a, const float* b, std::size_t n) {
  float s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return s0 + s1 + s2 + s3;
}

template <class Fn>
double timed_sharded(std::size_t n, std::size_t shards, Fn&& body) {
  const auto start = std::chrono::steady_clock::now();
  if (shards <= 1) {
    body(std::size_t(0), n);
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (n + shards - 1) / shards;
    for (std::size_t s = 0; s < shards; ++s) {
      const std::size_t lo = s * chunk, hi = std::min(n, lo + chunk);
      if (lo < hi) pool.emplace_back([&body, lo, hi]() { body(lo, hi); });
    }
    for (auto& th : pool) th.join();
  }
  return std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                       start)
      .count();
}

}  // namespace

ThroughputReport batch_adapt_throughput(const LowRankTransform<float>& t,
                                        const GalleryView<float>& g,
                                        std::size_t shards) {
  const std::size_t e = g.e, r = t.rank(), n = g.n;
  require(t.embed_dim() == e, ErrorCategory::dimension,
          "transform dimension != gallery dimension");
  if (shards == 0) shards = 1;

  ThroughputReport rep;
  rep.n = n;
  rep.e = e;
  rep.r = r;
  rep.shards = shards;
  rep.flop_ratio = double(2 * e * e + 2 * e) / double(2 * e * r + 2 * r * r);

  // Query side is shared by both paths; use an all-ones probe.
  std::vector<float> qprime(e, 1.0f);
  const float qn = std::sqrt(float(e));
  std::vector<float> a(r, 0.0f);  // U^T qhat'
  for (std::size_t i = 0; i < e; ++i) {
    const float qi = qprime[i] / qn;
    const float* ur = t.u.row_ptr(i);
    for (std::size_t j = 0; j < r; ++j) a[j] += qi * ur[j];
  }

  std::vector<double> shard_sums_dense(shards, 0.0);
  std::vector<double> shard_sums_low(shards, 0.0);
  const std::size_t chunk = (n + shards - 1) / shards;

  const Tensor2<float> dense = t.dense();
  rep.dense_seconds = timed_sharded(n, shards, [&](std::size_t lo,
                                                   std::size_t hi) {
    std::vector<float> y(e);
    double local = 0;
    for (std::size_t i = lo; i < hi; ++i) {
      const float* d = g.row(i);
      for (std::size_t row = 0; row < e; ++row)
        y[row] = dot_f32(dense.row_ptr(row), d, e);
      const float nrm = std::sqrt(dot_f32(y.data(), y.data(), e));
      float s = 0;
      if (nrm > 1e-12f) s = dot_f32(qprime.data(), y.data(), e) / (qn * nrm);
      local += s;
    }
    shard_sums_dense[lo / chunk] = local;
  });

  rep.lowrank_seconds = timed_sharded(n, shards, [&](std::size_t lo,
                                                     std::size_t hi) {
    std::vector<float> z(r);
    double local = 0;
    for (std::size_t i = lo; i < hi; ++i) {
      const float* d = g.row(i);
      for (std::size_t j = 0; j < r; ++j) z[j] = 0;
      for (std::size_t row = 0; row < e; ++row) {
        const float dv = d[row];
        const float* vr = t.v.row_ptr(row);
        for (std::size_t j = 0; j < r; ++j) z[j] += dv * vr[j];
      }
      float nsq = 0;
      for (std::size_t ii = 0; ii < r; ++ii)
        nsq += z[ii] * dot_f32(t.gram.row_ptr(ii), z.data(), r);
      float s = 0;
      if (nsq > 1e-24f) s = dot_f32(a.data(), z.data(), r) / std::sqrt(nsq);
      local += s;
    }
    shard_sums_low[lo / chunk] = local;
  });

  for (std::size_t s = 0; s < shards; ++s)
    rep.checksum += shard_sums_dense[s] - shard_sums_low[s];
  rep.dense_items_per_sec =
      rep.dense_seconds > 0 ? double(n) / rep.dense_seconds : 0;
  rep.lowrank_items_per_sec =
      rep.lowrank_seconds > 0 ? double(n) / rep.lowrank_seconds : 0;
  rep.speedup =
      rep.lowrank_seconds > 0 ? rep.dense_seconds / rep.lowrank_seconds : 0;
  rep.speedup_at_least_5x = rep.speedup >= 5.0;
  return rep;
}

}  // namespace quari

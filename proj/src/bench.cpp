#include "burstmamba/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>

#include "burstmamba/rng.hpp"
#include "burstmamba/ssm.hpp"

namespace burstmamba {

Tensor naive_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  if (q.rank() != 2 || k.shape() != q.shape() || v.shape() != q.shape())
    throw ShapeError("attention: q, k, v must share one (L, D) shape");
  const auto n = q.dim(0), d = q.dim(1);
  const float scale = 1.0f / std::sqrt(static_cast<float>(d));
  const float* qp = q.data().data();
  const float* kp = k.data().data();
  const float* vp = v.data().data();
  std::vector<float> out(static_cast<std::size_t>(n * d), 0.0f), s(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    float mx = -INFINITY;
    for (std::int64_t j = 0; j < n; ++j) {
      float dot = 0;
      for (std::int64_t c = 0; c < d; ++c) dot += qp[i * d + c] * kp[j * d + c];
      s[j] = dot * scale;
      mx = std::max(mx, s[j]);
    }
    double z = 0;
    float* o = out.data() + i * d;
    for (std::int64_t j = 0; j < n; ++j) {
      const float e = std::exp(s[j] - mx);
      z += e;
      for (std::int64_t c = 0; c < d; ++c) o[c] += e * vp[j * d + c];
    }
    for (std::int64_t c = 0; c < d; ++c) o[c] = static_cast<float>(o[c] / z);
  }
  return Tensor({n, d}, std::move(out));
}

namespace {

// Repetitions go round-robin over the lengths so that a slow stretch on a
// shared host lands on every length instead of skewing one median.
std::vector<double> interleaved_medians(const std::vector<std::function<void()>>& fns, int reps) {
  for (const auto& fn : fns) fn();  // warm-up
  std::vector<std::vector<double>> t(fns.size());
  for (int r = 0; r < reps; ++r)
    for (std::size_t i = 0; i < fns.size(); ++i) {
      const auto a = std::chrono::steady_clock::now();
      fns[i]();
      const auto b = std::chrono::steady_clock::now();
      t[i].push_back(std::chrono::duration<double, std::micro>(b - a).count());
    }
  std::vector<double> med;
  for (auto& v : t) {
    std::sort(v.begin(), v.end());
    const auto m = v.size() / 2;
    med.push_back(v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]));
  }
  return med;
}

Tensor random_matrix(Rng& rng, std::int64_t n, std::int64_t d) {
  std::vector<float> v(static_cast<std::size_t>(n * d));
  for (auto& x : v) x = static_cast<float>(rng.uniform(-1, 1));
  return Tensor({n, d}, std::move(v));
}

}  // namespace

std::vector<BenchRow> run_bench(const BenchOptions& opt) {
  if (opt.reps < 1) throw Error("bench: reps must be at least 1");
  if (opt.lengths.empty()) throw Error("bench: no lengths given");
  for (auto l : opt.lengths)
    if (l < 1) throw Error("bench: lengths must be positive");
  autograd::NoGradGuard guard;
  Rng rng = Rng::stream(opt.seed, "bench");
  const auto params = SsmParams::init(opt.dim, opt.state_dim, rng);
  std::vector<Tensor> xs, qs, ks, vs;
  for (auto l : opt.lengths) xs.push_back(random_matrix(rng, l, opt.dim));
  for (auto l : opt.lengths) {
    qs.push_back(random_matrix(rng, l, opt.dim));
    ks.push_back(random_matrix(rng, l, opt.dim));
    vs.push_back(random_matrix(rng, l, opt.dim));
  }
  std::vector<std::function<void()>> scan, attn;
  for (std::size_t i = 0; i < opt.lengths.size(); ++i) {
    scan.push_back([&, i] { (void)selective_scan(xs[i], params); });
    attn.push_back([&, i] { (void)naive_attention(qs[i], ks[i], vs[i]); });
  }
  const auto ms = interleaved_medians(scan, opt.reps), ma = interleaved_medians(attn, opt.reps);
  std::vector<BenchRow> rows;
  for (std::size_t i = 0; i < opt.lengths.size(); ++i) rows.push_back({"selective_scan", opt.lengths[i], ms[i]});
  for (std::size_t i = 0; i < opt.lengths.size(); ++i) rows.push_back({"attention", opt.lengths[i], ma[i]});
  return rows;
}

std::string bench_csv(const std::vector<BenchRow>& rows, int reps) {
  std::string out = "kernel,length,median_us\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%lld,%.1f\n", r.kernel.c_str(), static_cast<long long>(r.length), r.median_us);
    out += buf;
  }
  if (reps == 1) out += "# noisy: single repetition per length\n";
  return out;
}

std::vector<double> doubling_ratios(const std::vector<BenchRow>& rows, const std::string& kernel) {
  std::vector<const BenchRow*> sel;
  for (const auto& r : rows)
    if (r.kernel == kernel) sel.push_back(&r);
  std::vector<double> out;
  for (std::size_t i = 1; i < sel.size(); ++i) out.push_back(sel[i]->median_us / sel[i - 1]->median_us);
  return out;
}

}  // namespace burstmamba

#include "burstmamba/selfcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>

#include "burstmamba/blocks.hpp"
#include "burstmamba/model.hpp"
#include "burstmamba/ops.hpp"
#include "burstmamba/rng.hpp"
#include "burstmamba/serialization.hpp"
#include "burstmamba/ssm.hpp"
#include "burstmamba/wavelet.hpp"

namespace burstmamba {

double gradient_error(const std::function<Tensor64(const std::vector<Tensor64>&)>& fn,
                      std::vector<Tensor64> inputs, std::size_t per_input, std::uint64_t seed, double h) {
  for (auto& t : inputs) t.set_requires_grad(true);
  const auto analytic = gradients(fn(inputs), inputs);
  Rng rng(seed);
  double num = 0, den = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const auto n = static_cast<std::size_t>(inputs[k].numel());
    std::vector<std::size_t> coords;
    if (n <= per_input)
      for (std::size_t i = 0; i < n; ++i) coords.push_back(i);
    else
      for (std::size_t i = 0; i < per_input; ++i) coords.push_back(rng.below(n));
    for (auto i : coords) {
      auto d = inputs[k].mutable_data();
      const double saved = d[i];
      double fp, fm;
      {
        autograd::NoGradGuard g;
        d[i] = saved + h;
        fp = fn(inputs).item();
        d[i] = saved - h;
        fm = fn(inputs).item();
        d[i] = saved;
      }
      const double fd = (fp - fm) / (2 * h), an = analytic[k][i];
      num += (fd - an) * (fd - an);
      den += std::max(fd * fd, an * an);
    }
  }
  return den > 0 ? std::sqrt(num / den) : std::sqrt(num);
}

namespace {

template <class T>
BasicTensor<T> uniform(Rng& rng, Shape shape, double lo, double hi) {
  std::vector<T> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
  return BasicTensor<T>(std::move(shape), std::move(v));
}

template <class A, class B>
double rel_error(const A& got, const B& want) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < want.size(); ++i) {
    num = std::max(num, std::abs(double(got[i]) - double(want[i])));
    den = std::max(den, std::abs(double(want[i])));
  }
  return den > 0 ? num / den : num;
}

template <class T>
BasicSsmParams<T> random_ssm(Rng& rng, std::int64_t d, std::int64_t n, ScanMode mode) {
  auto p = BasicSsmParams<T>::init(d, n, rng, mode);
  p.b_weight = uniform<T>(rng, {n, d}, -1, 1);
  p.c_weight = uniform<T>(rng, {n, d}, -1, 1);
  p.dt_weight = uniform<T>(rng, {d, d}, -0.5, 0.5);
  p.dt_bias = uniform<T>(rng, {d}, -2, 0.5);
  p.b_bias = uniform<T>(rng, {n}, -1, 1);
  p.c_bias = uniform<T>(rng, {n}, -1, 1);
  p.d_skip = uniform<T>(rng, {d}, -1, 1);
  p.a_diag = uniform<T>(rng, {n}, -3, -0.05);
  return p;
}

Tensor64 weighted_sum(const Tensor64& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  return sum(mul(y, uniform<double>(rng, y.shape(), -1, 1)));
}

std::vector<FlowMap> random_flows(Rng& rng, std::int64_t l, std::int64_t h, std::int64_t w, double mag) {
  std::vector<FlowMap> flows{FlowMap::zeros(h, w)};
  for (std::int64_t b = 1; b < l; ++b) {
    auto f = FlowMap::zeros(h, w);
    for (auto& v : f.du) v = static_cast<float>(rng.uniform(-mag, mag));
    for (auto& v : f.dv) v = static_cast<float>(rng.uniform(-mag, mag));
    flows.push_back(std::move(f));
  }
  return flows;
}

double dot(const Tensor64& a, const Tensor64& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.vec().size(); ++i) s += a.vec()[i] * b.vec()[i];
  return s;
}

CheckResult below(const char* group, const char* name, double value, double limit) {
  return {name, group, value, limit, std::isfinite(value) && value < limit};
}

// --- scans

CheckResult scan_conv_vs_recurrent() {
  Rng rng(101);
  double worst = 0;
  for (int i = 0; i < 100; ++i) {
    const std::int64_t l = 1 + rng.below(64), d = 1 + rng.below(8), n = 1 + rng.below(16);
    auto p = random_ssm<float>(rng, d, n, ScanMode::time_invariant);
    const auto x = uniform<float>(rng, {l, d}, -2, 2);
    worst = std::max(worst, rel_error(scan_convolutional(x, p).vec(), scan_recurrent(x, p, true).vec()));
  }
  return below("scan", "convolutional = recurrent (fixed)", worst, 1e-5);
}

CheckResult scan_parallel_vs_sequential() {
  Rng rng(102);
  double worst = 0;
  for (int i = 0; i < 100; ++i) {
    const std::int64_t l = 1 + rng.below(64), d = 1 + rng.below(8), n = 1 + rng.below(16);
    auto p = random_ssm<float>(rng, d, n, ScanMode::selective);
    const auto x = uniform<float>(rng, {1 + static_cast<std::int64_t>(rng.below(2)), l, d}, -2, 2);
    worst = std::max(worst, rel_error(selective_scan_parallel(x, p).vec(), selective_scan(x, p).vec()));
  }
  return below("scan", "parallel = sequential (selective)", worst, 1e-5);
}

// --- discretization

CheckResult zoh_extended() {
  double worst = 0;
  for (int i = 0; i <= 60; ++i) {
    const double dt = std::pow(10.0, -6.0 + 6.0 * i / 60.0);
    for (int j = 0; j <= 90; ++j) {
      const double a = -std::pow(10.0, -8.0 + 9.0 * j / 90.0);
      const double b = 1.3;
      const auto got = discretize_zoh(a, b, dt);
      const long double z = static_cast<long double>(dt) * a;
      const long double abar = std::exp(z);
      const long double bbar = std::expm1(z) / static_cast<long double>(a) * b;
      worst = std::max(worst, static_cast<double>(std::abs((got.a_bar - abar) / abar)));
      worst = std::max(worst, static_cast<double>(std::abs((got.b_bar - bbar) / bbar)));
    }
  }
  return below("zoh", "closed form vs extended precision", worst, 1e-10);
}

// --- wavelet

std::vector<CheckResult> wavelet_checks() {
  Rng rng(103);
  double rec = 0, energy = 0;
  auto sumsq = [](const Tensor& t) {
    double s = 0;
    for (float v : t.data()) s += double(v) * v;
    return s;
  };
  for (int i = 0; i < 100; ++i) {
    const std::int64_t c = 1 + rng.below(4), h = 2 * (1 + rng.below(8)), w = 2 * (1 + rng.below(8));
    const auto f = uniform<float>(rng, {c, h, w}, -2, 2);
    const auto bands = dwt_haar(f);
    rec = std::max(rec, rel_error(idwt_haar(bands).vec(), f.vec()));
    const double e_in = sumsq(f);
    const double e_out = sumsq(bands.ll) + sumsq(bands.lh) + sumsq(bands.hl) + sumsq(bands.hh);
    energy = std::max(energy, std::abs(e_out - e_in) / e_in);
  }
  return {below("wavelet", "haar perfect reconstruction", rec, 1e-6),
          below("wavelet", "haar energy preservation", energy, 1e-5)};
}

// --- OFS

std::vector<CheckResult> ofs_checks() {
  Rng rng(104);
  std::vector<CheckResult> out;
  {
    double mismatches = 0;
    for (int i = 0; i < 10; ++i) {
      const std::int64_t l = 1 + rng.below(5), c = 1 + rng.below(3), h = 1 + rng.below(7), w = 1 + rng.below(7);
      const auto f = uniform<float>(rng, {l, c, h, w}, -2, 2);
      const auto plan = std::make_shared<const OfsPlan>(identity_ofs_plan(l, h, w));
      const auto a = ofs_serialize(f, plan), b = serialize_temporal(f, ScanOrder::time_fwd);
      if (a.shape() != b.shape() || std::memcmp(a.vec().data(), b.vec().data(), a.vec().size() * sizeof(float)))
        mismatches += 1;
    }
    out.push_back(below("ofs", "zero flow = linear serialization (bitwise)", mismatches, 1));
  }
  {
    double worst = 0;
    for (int i = 0; i < 10; ++i) {
      const std::int64_t h = 6 + rng.below(6), w = 6 + rng.below(6), l = 3;
      const double ax = rng.uniform(-1, 1), ay = rng.uniform(-1, 1), c0 = rng.uniform(-1, 1);
      std::vector<float> v;
      for (std::int64_t b = 0; b < l; ++b)
        for (std::int64_t y = 0; y < h; ++y)
          for (std::int64_t x = 0; x < w; ++x) v.push_back(static_cast<float>(ax * x + ay * y + c0));
      const Tensor f({l, 1, h, w}, v);
      std::vector<FlowMap> flows{FlowMap::zeros(h, w)};
      for (std::int64_t b = 1; b < l; ++b)
        flows.push_back(FlowMap::constant(h, w, static_cast<float>(rng.uniform(-1.5, 1.5)),
                                          static_cast<float>(rng.uniform(-1.5, 1.5))));
      const auto plan = std::make_shared<const OfsPlan>(make_ofs_plan(flows, 0));
      const auto seq = ofs_serialize(f, plan);
      for (std::int64_t b = 0; b < l; ++b)
        for (std::int64_t y = 0; y < h; ++y)
          for (std::int64_t x = 0; x < w; ++x) {
            const double xs = double(x) - flows[b].du[0], ys = double(y) - flows[b].dv[0];
            if (xs < 0 || ys < 0 || xs > double(w - 1) || ys > double(h - 1)) continue;  // clamped border
            const double want = ax * xs + ay * ys + c0;
            worst = std::max(worst, std::abs(seq.at({y * w + x, b, 0}) - want));
          }
    }
    out.push_back(below("ofs", "bilinear exactness on affine images", worst, 1e-5));
  }
  {
    double worst = 0;
    for (int i = 0; i < 20; ++i) {
      const std::int64_t l = 1 + rng.below(5), c = 1 + rng.below(3), h = 2 + rng.below(6), w = 2 + rng.below(6);
      const auto plan = std::make_shared<const OfsPlan>(make_ofs_plan(random_flows(rng, l, h, w, 3.0), 0));
      const auto f = uniform<double>(rng, {l, c, h, w}, -1, 1);
      const auto g = uniform<double>(rng, {h * w, l, c}, -1, 1);
      const double lhs = dot(ofs_serialize(f, plan), g), rhs = dot(f, ofs_scatter(g, plan));
      worst = std::max(worst, std::abs(lhs - rhs) / std::max(1.0, std::abs(lhs)));
    }
    out.push_back(below("ofs", "scatter is the adjoint of serialize", worst, 1e-5));
  }
  return out;
}

// --- gradients

CheckResult grad_scan() {
  Rng rng(105);
  const auto p = random_ssm<double>(rng, 3, 4, ScanMode::selective);
  const auto x = uniform<double>(rng, {2, 7, 3}, -1, 1);
  const double e = gradient_error(
      [&](const std::vector<Tensor64>& in) {
        auto q = p;
        q.a_diag = in[1];
        q.b_weight = in[2];
        q.dt_weight = in[3];
        q.c_bias = in[4];
        return weighted_sum(selective_scan(in[0], q));
      },
      {x, p.a_diag, p.b_weight, p.dt_weight, p.c_bias});
  return below("grad", "selective scan", e, 1e-4);
}

CheckResult grad_spatial() {
  Rng rng(106);
  const auto blk = SpatialBlock::init(4, 2, 4, true, rng).cast<double>();
  const auto f = uniform<double>(rng, {4, 3, 2}, -1, 1);
  const double e = gradient_error(
      [&](const std::vector<Tensor64>& in) {
        auto b = blk;
        b.in_w = in[1];
        b.paths[2].dt_weight = in[2];
        b.paths[1].b_weight = in[3];
        b.ca.w1 = in[4];
        b.norm_g = in[5];
        return weighted_sum(spatial_block_forward(in[0], b));
      },
      {f, blk.in_w, blk.paths[2].dt_weight, blk.paths[1].b_weight, blk.ca.w1, blk.norm_g});
  return below("grad", "spatial block", e, 1e-4);
}

CheckResult grad_temporal() {
  Rng rng(107);
  auto fb = TemporalBlock::init(4, 2, 2, 2, true, rng);
  for (auto& g : fb.gain.mutable_data()) g = static_cast<float>(rng.uniform(0.5, 1.5));
  const auto blk = fb.cast<double>();
  const auto f = uniform<double>(rng, {2, 4, 4, 4}, -1, 1);
  const auto plan = std::make_shared<const OfsPlan>(make_ofs_plan(random_flows(rng, 2, 4, 4, 1.3), 0));
  const double e = gradient_error(
      [&](const std::vector<Tensor64>& in) {
        auto b = blk;
        b.conv1_w = in[1];
        b.fwd.a_diag = in[2];
        b.bwd.head.lin_w = in[3];
        b.fwd.head.reduce_w = in[4];
        b.bwd.d_skip = in[5];
        return weighted_sum(temporal_block_forward(in[0], plan, b).features);
      },
      {f, blk.conv1_w, blk.fwd.a_diag, blk.bwd.head.lin_w, blk.fwd.head.reduce_w, blk.bwd.d_skip});
  return below("grad", "temporal block", e, 1e-4);
}

CheckResult grad_upsampler() {
  Rng rng(108);
  const auto up = Upsampler::init(2, rng).cast<double>();
  const auto f = uniform<double>(rng, {2, 2, 3}, -1, 1);
  const double e = gradient_error(
      [&](const std::vector<Tensor64>& in) {
        auto u = up;
        u.up1_w = in[1];
        u.up2_b = in[2];
        u.out_w = in[3];
        return weighted_sum(upsample_x4(in[0], u));
      },
      {f, up.up1_w, up.up2_b, up.out_w});
  return below("grad", "upsampler", e, 1e-4);
}

CheckResult grad_model() {
  ModelConfig cfg;
  cfg.channels = 8;
  cfg.stacks = 1;
  cfg.state_dim = 2;
  cfg.d_psi = 2;
  auto m = Model::init(cfg).cast<double>();
  for (auto& g : m.temporal[0].gain.mutable_data()) g = 0.8;
  Rng rng(109);
  const auto burst = uniform<double>(rng, {2, 3, 6, 6}, 0, 1);
  const auto plan = std::make_shared<const OfsPlan>(make_ofs_plan(random_flows(rng, 2, 6, 6, 1.3), 0));
  const double e = gradient_error(
      [&](const std::vector<Tensor64>& in) {
        auto mm = m;
        mm.head_w = in[1];
        mm.temporal[0].conv2_w = in[2];
        mm.temporal[0].fwd.head.lin_w = in[3];
        mm.spatial[0].paths[3].dt_weight = in[4];
        mm.up.up2_w = in[5];
        return weighted_sum(model_forward(mm, in[0], plan, false).output);
      },
      {burst, m.head_w, m.temporal[0].conv2_w, m.temporal[0].fwd.head.lin_w, m.spatial[0].paths[3].dt_weight,
       m.up.up2_w},
      12);
  return below("grad", "toy model end to end", e, 1e-4);
}

}  // namespace

std::vector<CheckResult> run_selfcheck() {
  std::vector<CheckResult> r;
  r.push_back(scan_conv_vs_recurrent());
  r.push_back(scan_parallel_vs_sequential());
  r.push_back(zoh_extended());
  for (auto& c : wavelet_checks()) r.push_back(c);
  for (auto& c : ofs_checks()) r.push_back(c);
  r.push_back(grad_scan());
  r.push_back(grad_spatial());
  r.push_back(grad_temporal());
  r.push_back(grad_upsampler());
  r.push_back(grad_model());
  return r;
}

std::string format_selfcheck(const std::vector<CheckResult>& results) {
  std::string out;
  char buf[256];
  int failed = 0;
  for (const auto& c : results) {
    std::snprintf(buf, sizeof buf, "%-4s  %-8s %-44s %.3e < %.0e\n", c.pass ? "PASS" : "FAIL", c.group.c_str(),
                  c.name.c_str(), c.value, c.limit);
    out += buf;
    failed += !c.pass;
  }
  std::snprintf(buf, sizeof buf, "%zu checks, %d failed\n", results.size(), failed);
  return out + buf;
}

}  // namespace burstmamba

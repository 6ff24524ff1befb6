#include <cmath>
#include <cstring>

#include "burstmamba/ssm.hpp"
#include "doctest.h"
#include "oracle.hpp"
#include "test_support.hpp"

using namespace burstmamba;
using bmtest::grad_check;
using bmtest::max_rel_error;
using bmtest::random_tensor;
using bmtest::weighted_sum;

namespace {

template <class T>
oracle::Ssm to_oracle(const BasicSsmParams<T>& p) {
  oracle::Ssm o;
  o.D = static_cast<int>(p.dim());
  o.N = static_cast<int>(p.state_dim());
  auto v = [](const BasicTensor<T>& t) { return oracle::Vec(t.vec().begin(), t.vec().end()); };
  o.a = v(p.a_diag);
  o.bw = v(p.b_weight);
  o.bb = v(p.b_bias);
  o.cw = v(p.c_weight);
  o.cb = v(p.c_bias);
  o.dtw = v(p.dt_weight);
  o.dtb = v(p.dt_bias);
  if (p.use_skip) o.dskip = v(p.d_skip);
  return o;
}

// Params with O(1) random weights so every projection matters.
template <class T>
BasicSsmParams<T> random_params(Rng& rng, std::int64_t D, std::int64_t N, ScanMode mode) {
  auto p = BasicSsmParams<T>::init(D, N, rng, mode);
  p.b_weight = random_tensor<T>(rng, {N, D}, -1, 1);
  p.c_weight = random_tensor<T>(rng, {N, D}, -1, 1);
  p.dt_weight = random_tensor<T>(rng, {D, D}, -0.5, 0.5);
  p.dt_bias = random_tensor<T>(rng, {D}, -2, 0.5);
  p.b_bias = random_tensor<T>(rng, {N}, -1, 1);
  p.c_bias = random_tensor<T>(rng, {N}, -1, 1);
  p.d_skip = random_tensor<T>(rng, {D}, -1, 1);
  p.a_diag = random_tensor<T>(rng, {N}, -3, -0.05);
  return p;
}

// One-state, one-channel parameters with chosen a, delta, b, c.
SsmParams scalar_params(float a, double delta, float b, float c, float skip) {
  Rng rng(0);
  auto p = SsmParams::init(1, 1, rng, ScanMode::time_invariant);
  p.a_diag = Tensor::from({1}, {a});
  p.dt_bias = Tensor::from({1}, {static_cast<float>(std::log(std::expm1(delta)))});
  p.b_bias = Tensor::from({1}, {b});
  p.c_bias = Tensor::from({1}, {c});
  p.d_skip = Tensor::from({1}, {skip});
  return p;
}

std::vector<double> as_double(const Tensor& t) { return {t.vec().begin(), t.vec().end()}; }

}  // namespace

TEST_CASE("zoh closed form at a=-1, dt=1") {
  const auto s = discretize_zoh(-1.0, 1.0, 1.0);
  CHECK(s.a_bar == doctest::Approx(0.36787944117144233).epsilon(1e-15));
  CHECK(s.b_bar == doctest::Approx(0.63212055882855767).epsilon(1e-15));
}

TEST_CASE("zoh limits") {
  const auto tiny = discretize_zoh(-3.0, 5.0, 1e-12);
  CHECK(tiny.a_bar == doctest::Approx(1.0).epsilon(1e-11));
  CHECK(std::abs(tiny.b_bar) < 1e-10);
  const auto zero_a = discretize_zoh(0.0, 2.0, 0.5);
  CHECK(zero_a.a_bar == 1.0);
  CHECK(zero_a.b_bar == 1.0);
  CHECK_THROWS_AS(discretize_zoh(-1.0, 1.0, 0.0), Error);
  CHECK_THROWS_AS(discretize_zoh(-1.0, 1.0, -0.1), Error);
}

TEST_CASE("zoh matches extended precision across the series switch") {
  double worst = 0;
  for (int i = 0; i <= 60; ++i) {
    const double dt = std::pow(10.0, -6.0 + 6.0 * i / 60.0);
    for (int j = 0; j <= 90; ++j) {
      const double a = -std::pow(10.0, -8.0 + 9.0 * j / 90.0);
      const auto got = discretize_zoh(a, 1.3, dt);
      const auto want = oracle::zoh(a, 1.3, dt);
      worst = std::max(worst, std::abs(got.a_bar - static_cast<double>(want.a_bar)) /
                                  static_cast<double>(want.a_bar));
      worst = std::max(worst, std::abs(got.b_bar - static_cast<double>(want.b_bar)) /
                                  static_cast<double>(want.b_bar));
    }
  }
  CHECK(worst < 1e-10);
}

TEST_CASE("zoh perturbation hook changes the gain") {
  const double before = discretize_zoh(-1.0, 1.0, 1.0).b_bar;
  testing::set_zoh_perturbation(1e-3);
  const double after = discretize_zoh(-1.0, 1.0, 1.0).b_bar;
  testing::set_zoh_perturbation(0.0);
  CHECK(after != doctest::Approx(before).epsilon(1e-6));
  CHECK(discretize_zoh(-1.0, 1.0, 1.0).b_bar == before);
}

TEST_CASE("single step is C B_bar x + D x") {
  auto p = scalar_params(-0.7f, 0.3, 1.5f, -0.4f, 0.25f);
  auto y = scan_recurrent(Tensor::from({1, 1}, {2.0f}), p, true);
  const double delta = softplus(p.dt_bias).vec()[0];
  const double bbar = discretize_zoh(-0.7f, 1.5f, delta).b_bar;
  CHECK(y.item() == doctest::Approx(-0.4f * bbar * 2.0 + 0.25 * 2.0).epsilon(1e-6));
}

TEST_CASE("a = 0 with unit gains is a prefix sum") {
  auto p = scalar_params(0.0f, 1.0, 1.0f, 1.0f, 0.0f);
  auto x = Tensor::from({5, 1}, {1, 2, -3, 4, 0.5f});
  auto y = scan_recurrent(x, p, true);
  const std::vector<double> want{1, 3, 0, 4, 4.5};
  CHECK(max_rel_error(y.vec(), want) < 1e-6);
}

TEST_CASE("recurrence matches the step-by-step oracle") {
  Rng rng(21);
  for (int trial = 0; trial < 5; ++trial) {
    auto p = random_params<float>(rng, 2, 4, ScanMode::time_invariant);
    auto x = random_tensor(rng, {16, 2});
    const auto want = oracle::scan(as_double(x), 16, to_oracle(p), false);
    CHECK(max_rel_error(scan_recurrent(x, p, true).vec(), want) < 1e-6);
  }
}

TEST_CASE("kernel powers") {
  // a = -ln 2 with delta = 1 gives a_bar = 0.5; b chosen so b_bar = 1.
  const float a = static_cast<float>(-std::log(2.0));
  const double bb = 1.0 / zoh_gain(a, 1.0);
  auto p = scalar_params(a, 1.0, static_cast<float>(bb), 1.0f, 0.0f);
  auto k = build_kernel(p, 3);
  CHECK(k.shape() == Shape{4, 1});
  CHECK(max_rel_error(k.vec(), std::vector<double>{1, 0.5, 0.25, 0.125}) < 1e-6);

  auto k0 = build_kernel(p, 0);
  CHECK(k0.shape() == Shape{1, 1});
  CHECK(k0.vec()[0] == doctest::Approx(1.0).epsilon(1e-6));

  auto fast = scalar_params(-200.0f, 1.0, 2.0f, 3.0f, 0.0f);
  auto kz = build_kernel(fast, 4);
  CHECK(kz.vec()[0] == doctest::Approx(3.0 * 2.0 / 200.0).epsilon(1e-6));
  for (int j = 1; j < 5; ++j) CHECK(kz.vec()[j] == 0.0f);
}

TEST_CASE("convolutional form requires time-invariant parameters") {
  Rng rng(2);
  auto p = SsmParams::init(2, 3, rng, ScanMode::selective);
  CHECK_THROWS_AS(build_kernel(p, 3), Error);
  CHECK_THROWS_AS(scan_convolutional(Tensor({4, 2}), p), Error);
}

TEST_CASE("convolution equals recurrence") {
  Rng rng(22);
  auto p = random_params<float>(rng, 3, 8, ScanMode::time_invariant);
  SUBCASE("impulse response is the kernel") {
    p.use_skip = false;
    auto x = Tensor::from({4, 1}, {1, 0, 0, 0});
    auto q = random_params<float>(rng, 1, 8, ScanMode::time_invariant);
    q.use_skip = false;
    auto y = scan_convolutional(x, q);
    auto k = build_kernel(q, 3);
    CHECK(std::memcmp(y.vec().data(), k.vec().data(), 4 * sizeof(float)) == 0);
  }
  SUBCASE("random inputs") {
    auto x = random_tensor(rng, {32, 3});
    CHECK(max_rel_error(scan_convolutional(x, p).vec(), scan_recurrent(x, p, true).vec()) < 1e-5);
  }
  SUBCASE("zeros") {
    auto y = scan_convolutional(Tensor::zeros({6, 3}), p);
    for (float v : y.vec()) CHECK(v == 0.0f);
  }
}

TEST_CASE("constant projections reduce the selective scan to the fixed recurrence") {
  Rng rng(23);
  auto p = random_params<float>(rng, 3, 4, ScanMode::selective);
  p.b_weight = Tensor::zeros({4, 3});
  p.c_weight = Tensor::zeros({4, 3});
  p.dt_weight = Tensor::zeros({3, 3});
  auto x = random_tensor(rng, {2, 11, 3});
  auto a = selective_scan(x, p);
  auto b = scan_recurrent(x, p, true);
  CHECK(std::memcmp(a.vec().data(), b.vec().data(), a.vec().size() * sizeof(float)) == 0);
}

TEST_CASE("zero input without skip stays zero") {
  Rng rng(24);
  auto p = random_params<float>(rng, 3, 4, ScanMode::selective);
  p.d_skip = Tensor::zeros({3});
  auto y = selective_scan(Tensor::zeros({9, 3}), p);
  for (float v : y.vec()) CHECK(v == 0.0f);
}

TEST_CASE("selective scan matches the sequential oracle") {
  Rng rng(25);
  for (int trial = 0; trial < 5; ++trial) {
    auto p = random_params<float>(rng, 3, 4, ScanMode::selective);
    auto x = random_tensor(rng, {24, 3});
    const auto want = oracle::scan(as_double(x), 24, to_oracle(p), true);
    CHECK(max_rel_error(selective_scan(x, p).vec(), want) < 1e-6);
  }
}

TEST_CASE("parallel scan agrees with the sequential scan") {
  Rng rng(26);
  for (std::int64_t L : {1, 2, 3, 16, 19, 64, 67}) {
    auto p = random_params<float>(rng, 4, 6, ScanMode::selective);
    auto x = random_tensor(rng, {2, L, 4});
    auto seq = selective_scan(x, p);
    auto par = selective_scan_parallel(x, p);
    INFO("L = " << L);
    if (L == 1) {
      CHECK(std::memcmp(seq.vec().data(), par.vec().data(), seq.vec().size() * sizeof(float)) == 0);
    }
    CHECK(max_rel_error(par.vec(), seq.vec()) < 1e-5);
    const auto want = oracle::scan(as_double(reshape(slice(x, 0, 0, 1), {L, 4})), static_cast<int>(L),
                                   to_oracle(p), true);
    auto first = slice(par, 0, 0, 1);
    CHECK(max_rel_error(first.vec(), want) < 1e-5);
  }
}

TEST_CASE("fixed mode is linear in x") {
  Rng rng(27);
  auto p = random_params<float>(rng, 3, 5, ScanMode::time_invariant);
  auto x1 = random_tensor(rng, {20, 3});
  auto x2 = random_tensor(rng, {20, 3});
  const float alpha = 0.7f, beta = -1.3f;
  auto lhs = scan_recurrent(add(mul_scalar(x1, alpha), mul_scalar(x2, beta)), p, true);
  auto rhs = add(mul_scalar(scan_recurrent(x1, p, true), alpha), mul_scalar(scan_recurrent(x2, p, true), beta));
  CHECK(max_rel_error(lhs.vec(), rhs.vec()) < 1e-5);
}

TEST_CASE("long constant input stays bounded") {
  Rng rng(28);
  auto p = SsmParams::init(2, 4, rng, ScanMode::time_invariant);
  p.c_bias = Tensor::ones({4});
  p.use_skip = false;
  const std::int64_t L = 100000;
  auto y = scan_recurrent(Tensor::ones({L, 2}), p, true);
  // |y| <= sum_n |c_n| b_bar / (1 - a_bar)
  const auto delta = softplus(p.dt_bias).vec();
  for (std::int64_t d = 0; d < 2; ++d) {
    double bound = 0;
    for (std::int64_t n = 0; n < 4; ++n) {
      const auto z = discretize_zoh(p.a_diag.vec()[n], p.b_bias.vec()[n], delta[d]);
      bound += std::abs(z.b_bar) / (1 - z.a_bar);
    }
    for (std::int64_t t = 0; t < L; t += 997) CHECK(std::abs(y.at({t, d})) <= bound * (1 + 1e-5));
  }
}

TEST_CASE("scan gradients match finite differences") {
  Rng rng(29);
  for (auto mode : {ScanMode::selective, ScanMode::time_invariant}) {
    for (bool parallel : {false, true}) {
      auto p = random_params<double>(rng, 2, 3, mode);
      auto x = random_tensor<double>(rng, {8, 2});
      std::vector<Tensor64> inputs{x};
      for (auto* t : p.tensors()) inputs.push_back(*t);
      auto r = grad_check(
          [&](const std::vector<Tensor64>& in) {
            auto q = p;
            auto ts = q.tensors();
            for (std::size_t i = 0; i < ts.size(); ++i) *ts[i] = in[i + 1];
            return weighted_sum(parallel ? selective_scan_parallel(in[0], q) : selective_scan(in[0], q));
          },
          inputs);
      INFO("parallel " << parallel << " selective " << (mode == ScanMode::selective));
      CHECK(r.rel_error < 1e-4);
    }
  }
}

TEST_CASE("scan gradients in the series regime") {
  Rng rng(30);
  auto x = random_tensor<double>(rng, {1, 6, 2});
  auto delta = Tensor64({1, 6, 2}, 2e-5);
  auto a = Tensor64::from({2}, {-1.0, -3.0});
  auto b = random_tensor<double>(rng, {1, 6, 2});
  auto c = random_tensor<double>(rng, {1, 6, 2});
  auto r = grad_check(
      [](const std::vector<Tensor64>& in) {
        return weighted_sum(scan_core(in[0], in[1], in[2], in[3], in[4], Tensor64{}));
      },
      {x, delta, a, b, c}, 64, 1, 1e-6);
  CHECK(r.rel_error < 1e-4);
}

TEST_CASE("a clamp keeps the state matrix stable") {
  Rng rng(31);
  auto p = SsmParams::init(2, 3, rng);
  p.a_diag.mutable_data()[1] = 0.5f;
  p.clamp_a();
  for (float v : p.a_diag.vec()) CHECK(v <= -1e-4f);
  CHECK(p.a_diag.vec()[0] == -1.0f);
}

TEST_CASE("initial step sizes fall in the documented range") {
  Rng rng(32);
  auto p = SsmParams::init(64, 4, rng);
  const auto steps = softplus(p.dt_bias);
  for (float v : steps.vec()) {
    CHECK(v >= 0.999e-3f);
    CHECK(v <= 1.001e-1f);
  }
  CHECK_THROWS_AS(Tensor(Shape{0, 2}), ShapeError);
}

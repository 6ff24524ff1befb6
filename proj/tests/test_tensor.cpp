#include <cstring>
#include <filesystem>
#include <numeric>

#include "burstmamba/tensor_io.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace burstmamba;
using bmtest::grad_check;
using bmtest::random_tensor;
using bmtest::weighted_sum;

TEST_CASE("exp of zero is one") {
  CHECK(exp(Tensor::scalar(0.0f)).item() == 1.0f);
}

TEST_CASE("identity matmul returns the operand") {
  Rng rng(3);
  auto m = random_tensor(rng, {3, 3});
  auto eye = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto r = matmul(eye, m);
  CHECK(std::equal(r.data().begin(), r.data().end(), m.data().begin()));
}

TEST_CASE("scatter_add inverts gather for a permutation") {
  Rng rng(4);
  auto x = random_tensor(rng, {5, 3});
  Index perm{3, 0, 4, 1, 2};
  auto back = scatter_add(gather(x, 0, perm), 0, perm, 5);
  CHECK(std::equal(back.data().begin(), back.data().end(), x.data().begin()));
}

TEST_CASE("gather and scatter_add are adjoint") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_tensor<double>(rng, {4, 7, 3});
    Index idx;
    for (int k = 0; k < 9; ++k) idx.push_back(static_cast<std::int64_t>(rng.below(7)));
    auto y = random_tensor<double>(rng, {4, 9, 3});
    auto gx = gather(x, 1, idx);
    auto sy = scatter_add(y, 1, idx, 7);
    double lhs = 0, rhs = 0;
    for (std::size_t i = 0; i < gx.vec().size(); ++i) lhs += gx.vec()[i] * y.vec()[i];
    for (std::size_t i = 0; i < x.vec().size(); ++i) rhs += x.vec()[i] * sy.vec()[i];
    CHECK(std::abs(lhs - rhs) <= 1e-6 * std::max(1.0, std::abs(lhs)));
  }
}

TEST_CASE("backward of sum gives ones") {
  auto x = Tensor::from({2, 2}, {1, 2, 3, 4});
  x.set_requires_grad(true);
  backward(sum(x));
  for (float g : x.grad()) CHECK(g == 1.0f);
}

TEST_CASE("backward of sum(x*x) at 3 is 6") {
  auto x = Tensor::from({1}, {3});
  x.set_requires_grad(true);
  backward(sum(mul(x, x)));
  CHECK(x.grad()[0] == doctest::Approx(6.0));
}

TEST_CASE("repeated backward accumulates until zeroed") {
  auto x = Tensor::from({2}, {1, -1});
  x.set_requires_grad(true);
  auto loss = sum(mul_scalar(x, 2.0f));
  backward(loss);
  backward(loss);
  CHECK(x.grad()[0] == 4.0f);
  x.zero_grad();
  backward(loss);
  CHECK(x.grad()[0] == 2.0f);
}

TEST_CASE("backward rejects non-scalar and detached losses") {
  auto x = Tensor::from({2}, {1, 2});
  x.set_requires_grad(true);
  CHECK_THROWS_AS(backward(mul(x, x)), ShapeError);
  auto y = Tensor::from({2}, {1, 2});
  CHECK_THROWS_AS(backward(sum(y)), Error);
  {
    autograd::NoGradGuard guard;
    CHECK_THROWS_AS(backward(sum(x)), Error);
  }
}

TEST_CASE("shape mismatch names the operation and both shapes") {
  Tensor a({2, 3}), b({4, 5});
  try {
    matmul(a, b);
    FAIL("expected throw");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("(2,3)") != std::string::npos);
    CHECK(msg.find("(4,5)") != std::string::npos);
  }
  CHECK_THROWS_AS(add(Tensor({2, 3}), Tensor({3, 2})), ShapeError);
}

TEST_CASE("non-finite results are errors") {
  auto x = Tensor::from({1}, {100.0f});
  CHECK_THROWS_AS(exp(x), NumericError);
  CHECK_THROWS_AS(div(Tensor::ones({1}), Tensor::zeros({1})), NumericError);
}

TEST_CASE("tape is topologically ordered") {
  Rng rng(6);
  auto x = random_tensor(rng, {3, 3});
  x.set_requires_grad(true);
  auto y = silu(matmul(x, x));
  auto loss = sum(add(y, x));
  auto tape = autograd::Tape<float>::record(loss);
  CHECK(tape.size() >= 4);
  CHECK(tape.is_topological());
  CHECK(tape.nodes().back() == loss.node().get());
}

TEST_CASE("broadcasting add and mul") {
  auto a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  auto b = Tensor::from({3}, {10, 20, 30});
  auto c = add(a, b);
  CHECK(c.at({1, 2}) == 36.0f);
  auto d = mul(a, Tensor::from({2, 1}, {2, 3}));
  CHECK(d.at({1, 0}) == 12.0f);
}

TEST_CASE("pixel shuffle rearranges channel blocks into 2x2 cells") {
  auto x = Tensor::from({4, 1, 1}, {1, 2, 3, 4});
  auto y = pixel_shuffle(x, 2);
  CHECK(y.shape() == Shape{1, 2, 2});
  CHECK(y.at({0, 0, 0}) == 1.0f);
  CHECK(y.at({0, 0, 1}) == 2.0f);
  CHECK(y.at({0, 1, 0}) == 3.0f);
  CHECK(y.at({0, 1, 1}) == 4.0f);
}

TEST_CASE("conv2d matches a direct loop") {
  Rng rng(7);
  auto x = random_tensor<double>(rng, {2, 3, 5, 6});
  auto w = random_tensor<double>(rng, {4, 3, 3, 3});
  auto b = random_tensor<double>(rng, {4});
  for (int stride : {1, 2}) {
    auto y = conv2d(x, w, b, stride, 1);
    const auto ho = y.dim(2), wo = y.dim(3);
    double err = 0;
    for (int n = 0; n < 2; ++n)
      for (int o = 0; o < 4; ++o)
        for (int oy = 0; oy < ho; ++oy)
          for (int ox = 0; ox < wo; ++ox) {
            double acc = b.vec()[o];
            for (int c = 0; c < 3; ++c)
              for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 3; ++j) {
                  const int iy = oy * stride + i - 1, ix = ox * stride + j - 1;
                  if (iy < 0 || iy >= 5 || ix < 0 || ix >= 6) continue;
                  acc += w.at({o, c, i, j}) * x.at({n, c, iy, ix});
                }
            err = std::max(err, std::abs(acc - y.at({n, o, oy, ox})));
          }
    CHECK(err < 1e-12);
  }
}

TEST_CASE("every differentiable primitive matches finite differences") {
  Rng rng(11);
  const double tol = 1e-4;
  auto check = [&](const char* name, std::function<Tensor64(const std::vector<Tensor64>&)> fn,
                   std::vector<Tensor64> in) {
    auto r = grad_check(fn, std::move(in));
    INFO(name << " rel err " << r.rel_error);
    CHECK(r.rel_error < tol);
  };
  auto v = [&](Shape s) { return random_tensor<double>(rng, std::move(s)); };

  check("add", [](auto& t) { return weighted_sum(add(t[0], t[1])); }, {v({5}), v({5})});
  check("add-broadcast", [](auto& t) { return weighted_sum(add(t[0], t[1])); }, {v({2, 5}), v({5})});
  check("sub", [](auto& t) { return weighted_sum(sub(t[0], t[1])); }, {v({5}), v({1})});
  check("mul", [](auto& t) { return weighted_sum(mul(t[0], t[1])); }, {v({3, 1}), v({1, 5})});
  check("div", [](auto& t) { return weighted_sum(div(t[0], add_scalar(mul(t[1], t[1]), 1.0))); },
        {v({5}), v({5})});
  check("exp", [](auto& t) { return weighted_sum(exp(t[0])); }, {v({5})});
  check("softplus", [](auto& t) { return weighted_sum(softplus(t[0])); }, {v({5})});
  check("sigmoid", [](auto& t) { return weighted_sum(sigmoid(t[0])); }, {v({5})});
  check("silu", [](auto& t) { return weighted_sum(silu(t[0])); }, {v({5})});
  check("sum", [](auto& t) { return sum(mul(t[0], t[0])); }, {v({5})});
  check("mean", [](auto& t) { return mean(mul(t[0], t[0])); }, {v({5})});
  check("sum_axis", [](auto& t) { return weighted_sum(sum_axis(t[0], 1)); }, {v({2, 3, 4})});
  check("mean_axis", [](auto& t) { return weighted_sum(mean_axis(t[0], 0)); }, {v({3, 4})});
  check("matmul", [](auto& t) { return weighted_sum(matmul(t[0], t[1])); }, {v({3, 4}), v({4, 2})});
  check("linear", [](auto& t) { return weighted_sum(linear(t[0], t[1], t[2])); },
        {v({2, 3, 4}), v({5, 4}), v({5})});
  check("reshape", [](auto& t) { return weighted_sum(reshape(t[0], {3, 2})); }, {v({6})});
  check("transpose", [](auto& t) { return weighted_sum(transpose(t[0], {2, 0, 1})); }, {v({2, 3, 4})});
  check("slice", [](auto& t) { return weighted_sum(slice(t[0], 1, 1, 2)); }, {v({2, 4, 3})});
  check("pad", [](auto& t) { return weighted_sum(pad(t[0], {{1, 0}, {2, 1}})); }, {v({2, 3})});
  check("concat", [](auto& t) { return weighted_sum(concat<double>({t[0], t[1]}, 1)); },
        {v({2, 1, 3}), v({2, 2, 3})});
  check("broadcast_to", [](auto& t) { return weighted_sum(broadcast_to(t[0], {4, 3})); }, {v({1, 3})});
  check("gather", [](auto& t) { return weighted_sum(gather(t[0], 0, {2, 0, 2, 1})); }, {v({3, 2})});
  check("scatter_add", [](auto& t) { return weighted_sum(scatter_add(t[0], 0, {2, 0, 2}, 4)); },
        {v({3, 2})});
  check("conv2d", [](auto& t) { return weighted_sum(conv2d(t[0], t[1], t[2], 1, 1)); },
        {v({2, 3, 4, 5}), v({2, 3, 3, 3}), v({2})});
  check("conv2d-stride", [](auto& t) { return weighted_sum(conv2d(t[0], t[1], Tensor64{}, 2, 0)); },
        {v({3, 5, 5}), v({2, 3, 3, 3})});
  check("layer_norm", [](auto& t) { return weighted_sum(layer_norm(t[0], t[1], t[2])); },
        {v({3, 5}), v({5}), v({5})});
  check("pixel_shuffle", [](auto& t) { return weighted_sum(pixel_shuffle(t[0], 2)); }, {v({2, 8, 2, 3})});
  check("upsample", [](auto& t) { return weighted_sum(upsample_nearest2x(t[0])); }, {v({2, 2, 3})});
  check("composite",
        [](auto& t) { return mean(silu(add(matmul(t[0], t[1]), softplus(t[0])))); },
        {v({5, 5}), v({5, 5})});
}

TEST_CASE("identical seeds give identical tensors") {
  auto make = [] {
    Rng rng = Rng::stream(42, "init");
    auto a = random_tensor(rng, {8, 8});
    return silu(matmul(a, a));
  };
  auto x = make(), y = make();
  CHECK(std::memcmp(x.data().data(), y.data().data(), sizeof(float) * 64) == 0);
  CHECK(Rng::stream(1, "init").next_u64() != Rng::stream(1, "data").next_u64());
  CHECK(Rng(0).next_u64() == 0xe220a8397b1dcdafULL);
}

TEST_CASE(".nt round trip is bit exact") {
  Rng rng(8);
  auto t = random_tensor(rng, {3, 4, 5});
  auto bytes = encode_tensor(t);
  CHECK(bytes.size() == 4 + 4 + 12 + 60 * 4);
  auto back = decode_tensor(bytes);
  CHECK(back.shape() == t.shape());
  CHECK(std::memcmp(back.data().data(), t.data().data(), 60 * sizeof(float)) == 0);

  auto s = Tensor::scalar(-1.25e-7f);
  auto sb = decode_tensor(encode_tensor(s));
  CHECK(sb.shape().empty());
  CHECK(sb.item() == s.item());

  auto path = std::filesystem::temp_directory_path() / "bm_roundtrip.nt";
  save_tensor(t, path);
  auto loaded = load_tensor(path);
  CHECK(std::memcmp(loaded.data().data(), t.data().data(), 60 * sizeof(float)) == 0);
  std::filesystem::remove(path);
}

TEST_CASE(".nt parse errors report offsets") {
  auto bytes = encode_tensor(Tensor({2, 3}, 1.0f));
  auto truncated = std::vector<std::uint8_t>(bytes.begin(), bytes.end() - 5);
  try {
    decode_tensor(truncated);
    FAIL("expected throw");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("payload short: expected 24 bytes") != std::string::npos);
    CHECK(e.offset() == 16);
  }
  auto bad = bytes;
  bad[1] = 'X';
  CHECK_THROWS_AS(decode_tensor(bad), ParseError);
  auto zero_extent = bytes;
  zero_extent[8] = 0;
  try {
    decode_tensor(zero_extent);
    FAIL("expected throw");
  } catch (const ParseError& e) {
    CHECK(e.offset() == 8);
  }
}

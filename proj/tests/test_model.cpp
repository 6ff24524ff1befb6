#include <cstring>
#include <filesystem>

#include "block_oracle.hpp"
#include "burstmamba/model.hpp"
#include "burstmamba/tensor_io.hpp"
#include "doctest.h"
#include "json.hpp"
#include "test_support.hpp"

using namespace burstmamba;
using bmtest::grad_check;
using bmtest::max_rel_error;
using bmtest::random_tensor;
using bmtest::weighted_sum;
using oracle::v64;

namespace {

template <class T>
bool bitwise_equal(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.vec().data(), b.vec().data(), a.vec().size() * sizeof(T)) == 0;
}

std::vector<FlowMap> random_flows(Rng& rng, std::int64_t l, std::int64_t h, std::int64_t w, double mag) {
  std::vector<FlowMap> flows{FlowMap::zeros(h, w)};
  for (std::int64_t b = 1; b < l; ++b)
    flows.push_back(FlowMap::constant(h, w, static_cast<float>(rng.uniform(-mag, mag)),
                                      static_cast<float>(rng.uniform(-mag, mag))));
  return flows;
}

ModelConfig small_config(std::int64_t c = 8, std::int64_t k = 2, std::int64_t n = 4) {
  ModelConfig cfg;
  cfg.channels = c;
  cfg.stacks = k;
  cfg.state_dim = n;
  cfg.d_psi = 4;
  cfg.seed = 5;
  return cfg;
}

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "bm_test_model";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("config validation and JSON round trip") {
  ModelConfig cfg;
  cfg.channels = 12;
  cfg.input_mode = InputMode::rggb1;
  cfg.use_skip = false;
  cfg.seed = 42;
  auto back = ModelConfig::from_json(cfg.to_json());
  CHECK(config_mismatches(back, cfg).empty());
  CHECK(back.seed == 42);
  CHECK_THROWS_AS(ModelConfig::from_json(R"({"channels": 10})"), Error);  // ratio 4
  CHECK_THROWS_AS(ModelConfig::from_json(R"({"scale": 2})"), Error);
  CHECK_THROWS_AS(ModelConfig::from_json(R"({"stacks": 0})"), Error);
  CHECK_THROWS_AS(ModelConfig::from_json(R"({"chanels": 16})"), Error);
  CHECK_THROWS_AS(ModelConfig::from_json(R"({"input_mode": "bayer"})"), Error);
  CHECK_THROWS_AS(ModelConfig::from_json("{\"channels\": "), ParseError);
}

TEST_CASE("output shape for every burst length with one parameter set") {
  auto m = Model::init(ModelConfig{});
  const auto before = encode_checkpoint(m);
  Rng rng(1);
  for (std::int64_t l : {1, 2, 5, 14}) {
    auto burst = random_tensor(rng, {l, 3, 16, 16}, 0, 1);
    auto r = model_forward(m, burst, random_flows(rng, l, 16, 16, 0.8), false);
    CHECK(r.output.shape() == Shape{3, 64, 64});
    CHECK(r.key_deltas.size() == 2);
  }
  CHECK(encode_checkpoint(m) == before);
}

TEST_CASE("bad bursts are rejected") {
  auto m = Model::init(small_config());
  Rng rng(2);
  CHECK_THROWS_AS(model_forward(m, Tensor(Shape{0, 3, 4, 4}), {}, false), Error);
  CHECK_THROWS_AS(model_forward(m, Tensor(Shape{1, 1, 4, 4}), random_flows(rng, 1, 4, 4, 0), false), ShapeError);
  CHECK_THROWS_AS(model_forward(m, Tensor(Shape{2, 3, 4, 4}), random_flows(rng, 3, 4, 4, 0), false), Error);
  CHECK_THROWS_AS(model_forward(m, Tensor(Shape{3, 4, 4}), {}, true), ShapeError);
}

TEST_CASE("detached forward equals zero temporal gains bitwise") {
  auto m = Model::init(small_config());
  Rng rng(3);
  auto burst = random_tensor(rng, {3, 3, 8, 8}, 0, 1);
  const auto flows = random_flows(rng, 3, 8, 8, 1.2);
  auto detached = model_forward(m, burst, flows, true);
  CHECK(detached.warnings.size() == 1);
  CHECK(detached.key_deltas.empty());
  auto attached = model_forward(m, burst, flows, false);
  CHECK_FALSE(bitwise_equal(attached.output, detached.output));
  for (auto& t : m.temporal)
    for (auto& g : t.gain.mutable_data()) g = 0;
  CHECK(bitwise_equal(model_forward(m, burst, flows, false).output, detached.output));
}

TEST_CASE("detached output depends on the keyframe alone") {
  auto m = Model::init(small_config());
  Rng rng(4);
  auto a = random_tensor(rng, {4, 3, 8, 6}, 0, 1);
  auto b = random_tensor(rng, {4, 3, 8, 6}, 0, 1);
  for (std::int64_t i = 0; i < 3 * 8 * 6; ++i) b.mutable_data()[i] = a.vec()[i];
  auto key = slice(a, 0, 0, 1);
  const auto ya = model_forward(m, a, random_flows(rng, 4, 8, 6, 1), true).output;
  CHECK(bitwise_equal(ya, model_forward(m, b, random_flows(rng, 4, 8, 6, 1), true).output));
  auto single = model_forward(m, key, {}, true);
  CHECK(single.warnings.empty());
  CHECK(bitwise_equal(ya, single.output));
}

TEST_CASE("forward matches a direct composition of the dataflow") {
  auto m = Model::init(small_config());
  // make the temporal path count
  for (auto& t : m.temporal)
    for (auto& g : t.gain.mutable_data()) g = 0.7f;
  Rng rng(6);
  const int l = 3, h = 8, w = 8, c = 8;
  auto burst = random_tensor(rng, {l, 3, h, w}, 0, 1);
  std::vector<FlowMap> flows{FlowMap::zeros(h, w)};
  for (int b = 1; b < l; ++b) {
    auto f = FlowMap::zeros(h, w);
    for (auto& v : f.du) v = static_cast<float>(rng.uniform(-1.5, 1.5));
    for (auto& v : f.dv) v = static_cast<float>(rng.uniform(-1.5, 1.5));
    flows.push_back(f);
  }
  const auto got = model_forward(m, burst, flows, false).output;

  oracle::Vec feats;
  for (int b = 0; b < l; ++b) {
    const auto frame = oracle::Vec(burst.vec().begin() + b * 3 * h * w, burst.vec().begin() + (b + 1) * 3 * h * w);
    const auto f = oracle::conv(frame, 3, h, w, v64(m.head_w), v64(m.head_b), c, 3, 1, true);
    feats.insert(feats.end(), f.begin(), f.end());
  }
  oracle::Vec s(feats.begin(), feats.begin() + c * h * w);
  for (std::size_t k = 0; k < m.spatial.size(); ++k) {
    oracle::Vec delta;
    feats = oracle::temporal_block(feats, l, c, h, w, flows, m.temporal[k], &delta);
    for (int i = 0; i < c * h * w; ++i) s[i] += delta[i];
    s = oracle::spatial_block(s, c, h, w, m.spatial[k]);
  }
  const auto want = oracle::upsampler(s, c, h, w, m.up);
  CHECK(max_rel_error(got.vec(), want) < 1e-5);
}

TEST_CASE("single-channel mosaic input") {
  auto cfg = small_config();
  cfg.input_mode = InputMode::rggb1;
  auto m = Model::init(cfg);
  Rng rng(7);
  auto r = model_forward(m, random_tensor(rng, {2, 1, 6, 8}, 0, 1), random_flows(rng, 2, 6, 8, 1), false);
  CHECK(r.output.shape() == Shape{3, 24, 32});
  CHECK_THROWS_AS(model_forward(m, Tensor(Shape{1, 3, 6, 8}), {}, true), ShapeError);
}

TEST_CASE("initialization is deterministic in the seed") {
  auto a = Model::init(small_config());
  auto b = Model::init(small_config());
  CHECK(encode_checkpoint(a) == encode_checkpoint(b));
  auto cfg = small_config();
  cfg.seed = 6;
  CHECK(encode_checkpoint(Model::init(cfg)) != encode_checkpoint(a));
}

TEST_CASE("checkpoint round trip is bitwise") {
  auto m = Model::init(small_config());
  Rng rng(8);
  for (auto& p : m.parameters())
    for (auto& v : p.tensor->mutable_data()) v += static_cast<float>(rng.uniform(-0.01, 0.01));
  const auto path = temp_path("roundtrip.bmck");
  save_checkpoint(m, path);
  auto back = load_checkpoint(path);
  CHECK(config_mismatches(back.config, m.config).empty());
  const auto pa = m.parameters();
  const auto pb = back.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].name == pb[i].name);
    CHECK(bitwise_equal(*pa[i].tensor, *pb[i].tensor));
  }
  auto burst = random_tensor(rng, {2, 3, 6, 6}, 0, 1);
  const auto flows = random_flows(rng, 2, 6, 6, 1);
  CHECK(bitwise_equal(model_forward(m, burst, flows, false).output, model_forward(back, burst, flows, false).output));
}

TEST_CASE("checkpoint errors name the problem") {
  auto m = Model::init(ModelConfig{});
  const auto path = temp_path("c16.bmck");
  save_checkpoint(m, path);

  ModelConfig wide;
  wide.channels = 32;
  try {
    load_checkpoint(path, wide);
    FAIL("expected a mismatch");
  } catch (const Error& e) {
    CHECK(std::string(e.what()) == "channels: archive 16 ≠ config 32");
  }

  // drop one tensor from the manifest
  auto bytes = encode_checkpoint(m);
  const auto len = get_u64(bytes, 8);
  auto manifest = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(len));
  auto& list = manifest["tensors"];
  const auto dropped = list[5]["name"].get<std::string>();
  list.erase(5);
  const auto text = manifest.dump();
  std::vector<std::uint8_t> edited(bytes.begin(), bytes.begin() + 8);
  put_u64(edited, text.size());
  edited.insert(edited.end(), text.begin(), text.end());
  edited.insert(edited.end(), bytes.begin() + 16 + static_cast<std::ptrdiff_t>(len), bytes.end());
  try {
    decode_checkpoint(edited);
    FAIL("expected a missing tensor");
  } catch (const Error& e) {
    CHECK(std::string(e.what()) == "missing tensor: " + dropped);
  }

  auto corrupt = bytes;
  corrupt[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(corrupt), ParseError);
  CHECK_THROWS_AS(decode_checkpoint(std::span<const std::uint8_t>(bytes.data(), 40)), ParseError);
  CHECK_THROWS_AS(load_checkpoint(temp_path("does_not_exist.bmck")), IoError);
}

TEST_CASE("parameter count does not depend on the burst") {
  auto m = Model::init(ModelConfig{});
  const auto n = m.parameter_count();
  std::int64_t temporal = 0;
  for (auto& p : m.temporal_parameters()) temporal += p.tensor->numel();
  CHECK(temporal > 0);
  CHECK(temporal < n);
  CHECK(n == Model::init(ModelConfig{}).parameter_count());
}

TEST_CASE("full model gradients") {
  auto cfg = small_config(8, 1, 2);
  cfg.d_psi = 2;
  auto m = Model::init(cfg).cast<double>();
  for (auto& g : m.temporal[0].gain.mutable_data()) g = 0.8;
  Rng rng(9);
  auto burst = random_tensor<double>(rng, {2, 3, 8, 8}, 0, 1);
  auto plan = std::make_shared<const OfsPlan>(make_ofs_plan(random_flows(rng, 2, 8, 8, 1.3), 0));
  auto r = grad_check(
      [&](const std::vector<Tensor64>& in) {
        auto mm = m;
        mm.head_w = in[1];
        mm.temporal[0].conv2_w = in[2];
        mm.temporal[0].fwd.head.lin_w = in[3];
        mm.temporal[0].bwd.a_diag = in[4];
        mm.spatial[0].paths[3].dt_weight = in[5];
        mm.spatial[0].out_w = in[6];
        mm.up.up2_w = in[7];
        return weighted_sum(model_forward(mm, in[0], plan, false).output);
      },
      {burst, m.head_w, m.temporal[0].conv2_w, m.temporal[0].fwd.head.lin_w, m.temporal[0].bwd.a_diag,
       m.spatial[0].paths[3].dt_weight, m.spatial[0].out_w, m.up.up2_w},
      24);
  INFO(r.checked);
  CHECK(r.rel_error < 1e-4);
}

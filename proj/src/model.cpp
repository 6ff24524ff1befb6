#include "burstmamba/model.hpp"

#include <cmath>
#include <cstring>
#include <map>
#include <sstream>

#include "burstmamba/ops.hpp"
#include "burstmamba/tensor_io.hpp"
#include "json.hpp"

namespace burstmamba {

using nlohmann::json;

std::string input_mode_name(InputMode m) { return m == InputMode::rgb3 ? "rgb3" : "rggb1"; }

InputMode parse_input_mode(const std::string& s) {
  if (s == "rgb3") return InputMode::rgb3;
  if (s == "rggb1") return InputMode::rggb1;
  throw Error("input_mode: expected rgb3 or rggb1, got '" + s + "'");
}

void ModelConfig::validate() const {
  if (channels < 1) throw Error("channels must be >= 1");
  if (stacks < 1) throw Error("stacks must be >= 1");
  if (state_dim < 1) throw Error("state_dim must be >= 1");
  if (scale != 4) throw Error("scale must be 4, got " + std::to_string(scale));
  if (ratio < 1 || channels % ratio)
    throw Error("channels " + std::to_string(channels) + " not divisible by ratio " + std::to_string(ratio));
  if (d_psi < 1) throw Error("d_psi must be >= 1");
  if (step_groups < 0 || channels % groups())
    throw Error("step_groups " + std::to_string(step_groups) + " must divide channels " + std::to_string(channels));
}

std::string ModelConfig::to_json() const {
  json j = {{"channels", channels},   {"stacks", stacks}, {"state_dim", state_dim},
            {"scale", scale},         {"input_mode", input_mode_name(input_mode)},
            {"use_skip", use_skip},   {"ratio", ratio},   {"d_psi", d_psi},
            {"step_groups", step_groups}, {"seed", seed}};
  return j.dump(2);
}

namespace {

ModelConfig config_from(const json& j) {
  if (!j.is_object()) throw Error("model config: expected a JSON object");
  ModelConfig c;
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "channels") c.channels = v.get<std::int64_t>();
      else if (key == "stacks") c.stacks = v.get<std::int64_t>();
      else if (key == "state_dim") c.state_dim = v.get<std::int64_t>();
      else if (key == "scale") c.scale = v.get<std::int64_t>();
      else if (key == "input_mode") c.input_mode = parse_input_mode(v.get<std::string>());
      else if (key == "use_skip") c.use_skip = v.get<bool>();
      else if (key == "ratio") c.ratio = v.get<std::int64_t>();
      else if (key == "d_psi") c.d_psi = v.get<std::int64_t>();
      else if (key == "step_groups") c.step_groups = v.get<std::int64_t>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else throw Error("model config: unknown field '" + key + "'");
    } catch (const json::exception& e) {
      throw Error("model config: bad value for '" + key + "': " + e.what());
    }
  }
  c.validate();
  return c;
}

}  // namespace

ModelConfig ModelConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError("model config: " + std::string(e.what()), e.byte);
  }
  return config_from(j);
}

ModelConfig ModelConfig::load(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return from_json(std::string(bytes.begin(), bytes.end()));
}

std::vector<std::string> config_mismatches(const ModelConfig& a, const ModelConfig& e) {
  std::vector<std::string> out;
  auto check = [&out](const char* name, const auto& x, const auto& y) {
    if (x == y) return;
    std::ostringstream s;
    s << std::boolalpha << name << ": archive " << x << " ≠ config " << y;
    out.push_back(s.str());
  };
  check("channels", a.channels, e.channels);
  check("stacks", a.stacks, e.stacks);
  check("state_dim", a.state_dim, e.state_dim);
  check("scale", a.scale, e.scale);
  check("input_mode", input_mode_name(a.input_mode), input_mode_name(e.input_mode));
  check("use_skip", a.use_skip, e.use_skip);
  check("ratio", a.ratio, e.ratio);
  check("d_psi", a.d_psi, e.d_psi);
  check("step_groups", a.step_groups, e.step_groups);
  return out;
}

template <class T>
BasicModel<T> BasicModel<T>::init(const ModelConfig& cfg) {
  cfg.validate();
  BasicModel m;
  m.config = cfg;
  const auto c = cfg.channels, cin = cfg.in_channels();
  auto rng = Rng::stream(cfg.seed, "head");
  m.head_w = init_uniform<T>(rng, {c, cin, 3, 3}, 1.0 / std::sqrt(9.0 * double(cin)));
  m.head_b = BasicTensor<T>::zeros({c});
  for (std::int64_t k = 0; k < cfg.stacks; ++k) {
    auto rt = Rng::indexed(cfg.seed, "temporal", static_cast<std::uint64_t>(k));
    m.temporal.push_back(BasicTemporalBlock<T>::init(c, cfg.state_dim, cfg.d_psi, cfg.groups(), cfg.use_skip, rt));
    auto rs = Rng::indexed(cfg.seed, "spatial", static_cast<std::uint64_t>(k));
    m.spatial.push_back(BasicSpatialBlock<T>::init(c, cfg.state_dim, cfg.ratio, cfg.use_skip, rs));
  }
  auto ru = Rng::stream(cfg.seed, "upsampler");
  m.up = BasicUpsampler<T>::init(c, ru);
  return m;
}

template <class T>
ParamList<T> BasicModel<T>::parameters() {
  ParamList<T> out{{"head.w", &head_w}, {"head.b", &head_b}};
  for (std::size_t k = 0; k < temporal.size(); ++k) {
    temporal[k].collect("stack" + std::to_string(k) + ".temporal", out);
    spatial[k].collect("stack" + std::to_string(k) + ".spatial", out);
  }
  up.collect("up", out);
  return out;
}

template <class T>
std::vector<std::pair<std::string, const BasicTensor<T>*>> BasicModel<T>::parameters() const {
  std::vector<std::pair<std::string, const BasicTensor<T>*>> out;
  for (auto& p : const_cast<BasicModel*>(this)->parameters()) out.emplace_back(p.name, p.tensor);
  return out;
}

template <class T>
ParamList<T> BasicModel<T>::temporal_parameters() {
  ParamList<T> out;
  for (std::size_t k = 0; k < temporal.size(); ++k) temporal[k].collect("stack" + std::to_string(k) + ".temporal", out);
  return out;
}

template <class T>
std::int64_t BasicModel<T>::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& [name, t] : parameters()) n += t->numel();
  return n;
}

template <class T>
void BasicModel<T>::clamp_a() {
  for (auto& t : temporal) t.clamp_a();
  for (auto& s : spatial) s.clamp_a();
}

template <class T>
ForwardResult<T> model_forward(const BasicModel<T>& model, const BasicTensor<T>& burst,
                               const std::shared_ptr<const OfsPlan>& plan, bool detached) {
  const auto& cfg = model.config;
  if (burst.rank() != 4) throw ShapeError("model: expected burst (L,c_in,H,W), got " + shape_str(burst.shape()));
  const auto l = burst.dim(0), h = burst.dim(2), w = burst.dim(3), c = cfg.channels;
  if (l < 1) throw Error("model: empty burst");
  if (burst.dim(1) != cfg.in_channels())
    throw ShapeError("model: " + input_mode_name(cfg.input_mode) + " expects " + std::to_string(cfg.in_channels()) +
                     " input channels, got " + std::to_string(burst.dim(1)));
  ForwardResult<T> r;
  auto frames = burst;
  if (detached && l > 1) {
    frames = slice(burst, 0, 0, 1);
    r.warnings.push_back("detached: ignoring " + std::to_string(l - 1) + " non-key frame(s)");
  }
  auto feats = conv3x3_replicate(frames, model.head_w, model.head_b);
  auto s = reshape(slice(feats, 0, 0, 1), {c, h, w});
  for (std::size_t k = 0; k < model.spatial.size(); ++k) {
    if (!detached) {
      auto t = temporal_block_forward(feats, plan, model.temporal[k]);
      feats = t.features;
      auto key = reshape(slice(t.delta, 0, 0, 1), {c, h, w});
      s = add(s, key);
      r.key_deltas.push_back(key);
    }
    s = spatial_block_forward(s, model.spatial[k]);
  }
  r.output = upsample_x4(s, model.up);
  return r;
}

ForwardResult<float> model_forward(const Model& model, const Tensor& burst, const std::vector<FlowMap>& flows,
                                   bool detached) {
  std::shared_ptr<const OfsPlan> plan;
  if (!detached) {
    if (burst.rank() == 4 && static_cast<std::int64_t>(flows.size()) != burst.dim(0))
      throw Error("model: " + std::to_string(flows.size()) + " flows for " + std::to_string(burst.dim(0)) +
                  " frames");
    plan = std::make_shared<const OfsPlan>(make_ofs_plan(flows, 0));
  }
  return model_forward(model, burst, plan, detached);
}

namespace {

constexpr char kMagic[4] = {'B', 'M', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Model& model) {
  std::vector<std::uint8_t> blobs;
  json tensors = json::array();
  for (const auto& [name, t] : model.parameters()) {
    const auto enc = encode_tensor(*t);
    tensors.push_back({{"name", name}, {"shape", t->shape()}, {"offset", blobs.size()}, {"bytes", enc.size()}});
    blobs.insert(blobs.end(), enc.begin(), enc.end());
  }
  const json manifest = {{"config", json::parse(model.config.to_json())}, {"tensors", tensors}};
  const auto text = manifest.dump();
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put_u32(out, kVersion);
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), blobs.begin(), blobs.end());
  return out;
}

Model decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw ParseError("checkpoint: bad magic", 0);
  if (get_u32(bytes, 4) != kVersion) throw ParseError("checkpoint: unsupported version", 4);
  const auto len = get_u64(bytes, 8);
  if (len > bytes.size() - 16) throw ParseError("checkpoint: truncated manifest", 8);
  json manifest;
  try {
    manifest = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(len));
  } catch (const json::parse_error& e) {
    throw ParseError("checkpoint manifest: " + std::string(e.what()), 16 + e.byte);
  }
  if (!manifest.contains("config") || !manifest.contains("tensors"))
    throw ParseError("checkpoint manifest: missing config or tensors", 16);
  auto model = Model::init(config_from(manifest["config"]));
  const auto base = 16 + len;

  std::map<std::string, json> entries;
  for (const auto& e : manifest["tensors"]) entries[e.at("name").get<std::string>()] = e;
  for (auto& p : model.parameters()) {
    auto it = entries.find(p.name);
    if (it == entries.end()) throw Error("missing tensor: " + p.name);
    std::size_t off = base + it->second.at("offset").get<std::size_t>();
    if (off >= bytes.size()) throw ParseError("checkpoint: tensor " + p.name + " out of range", off);
    auto t = decode_tensor(bytes, off);
    if (t.shape() != p.tensor->shape())
      throw Error("tensor " + p.name + ": archive shape " + shape_str(t.shape()) + " ≠ model shape " +
                  shape_str(p.tensor->shape()));
    *p.tensor = t;
    entries.erase(it);
  }
  if (!entries.empty()) throw Error("unexpected tensor: " + entries.begin()->first);
  return model;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  write_file_bytes(path, encode_checkpoint(model));
}

Model load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file_bytes(path)); }

Model load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected) {
  auto m = load_checkpoint(path);
  const auto bad = config_mismatches(m.config, expected);
  if (!bad.empty()) {
    std::string msg = bad[0];
    for (std::size_t i = 1; i < bad.size(); ++i) msg += "; " + bad[i];
    throw Error(msg);
  }
  return m;
}

#define BM_INSTANTIATE_MODEL(T)                                                                    \
  template struct BasicModel<T>;                                                                   \
  template ForwardResult<T> model_forward(const BasicModel<T>&, const BasicTensor<T>&,             \
                                          const std::shared_ptr<const OfsPlan>&, bool);

BM_INSTANTIATE_MODEL(float)
BM_INSTANTIATE_MODEL(double)

}  // namespace burstmamba

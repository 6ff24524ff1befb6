#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "burstmamba/blocks.hpp"
#include "burstmamba/serialization.hpp"
#include "burstmamba/tensor.hpp"

namespace burstmamba {

enum class InputMode { rgb3, rggb1 };

std::string input_mode_name(InputMode m);
InputMode parse_input_mode(const std::string& s);

struct ModelConfig {
  std::int64_t channels = 16;
  std::int64_t stacks = 2;
  std::int64_t state_dim = 8;
  std::int64_t scale = 4;
  InputMode input_mode = InputMode::rgb3;
  bool use_skip = true;
  std::int64_t ratio = 4;      // channel-attention squeeze ratio
  std::int64_t d_psi = 8;
  std::int64_t step_groups = 0;  // 0 means one step per channel
  std::uint64_t seed = 0;

  std::int64_t in_channels() const { return input_mode == InputMode::rgb3 ? 3 : 1; }
  std::int64_t groups() const { return step_groups > 0 ? step_groups : channels; }
  /// Throws Error naming the first broken constraint.
  void validate() const;

  std::string to_json() const;
  /// Unknown keys are rejected; missing keys keep their defaults.
  static ModelConfig from_json(const std::string& text);
  static ModelConfig load(const std::filesystem::path& path);
};

template <class T>
struct ForwardResult {
  BasicTensor<T> output;                     // (3, 4H, 4W)
  std::vector<BasicTensor<T>> key_deltas;    // temporal contribution added per stack, (C, H, W)
  std::vector<std::string> warnings;
};

template <class T>
struct BasicModel {
  ModelConfig config;
  BasicTensor<T> head_w, head_b;  // (C, c_in, 3, 3), (C)
  std::vector<BasicTemporalBlock<T>> temporal;
  std::vector<BasicSpatialBlock<T>> spatial;
  BasicUpsampler<T> up;

  /// Deterministic initialization from config.seed.
  static BasicModel init(const ModelConfig& cfg);

  /// Every trainable tensor with its archive name, in a fixed order.
  ParamList<T> parameters();
  std::vector<std::pair<std::string, const BasicTensor<T>*>> parameters() const;
  /// Temporal parameters only (the stage-2 additions).
  ParamList<T> temporal_parameters();
  std::int64_t parameter_count() const;

  void clamp_a();

  template <class U>
  BasicModel<U> cast() const {
    BasicModel<U> m;
    m.config = config;
    m.head_w = head_w.template cast<U>();
    m.head_b = head_b.template cast<U>();
    for (const auto& t : temporal) m.temporal.push_back(t.template cast<U>());
    for (const auto& s : spatial) m.spatial.push_back(s.template cast<U>());
    m.up = up.template cast<U>();
    return m;
  }
};

using Model = BasicModel<float>;

/// burst (L, c_in, H, W); plan from flows with keyframe 0 (may be null when detached).
/// Detached mode reads frame 0 only; extra frames are reported in `warnings`.
template <class T>
ForwardResult<T> model_forward(const BasicModel<T>& model, const BasicTensor<T>& burst,
                               const std::shared_ptr<const OfsPlan>& plan, bool detached);

/// Convenience overload building the plan from per-frame flows.
ForwardResult<float> model_forward(const Model& model, const Tensor& burst, const std::vector<FlowMap>& flows,
                                   bool detached);

// Checkpoint file: "BMCK" magic, u32 version, u64 manifest length, manifest JSON
// ({"config": {...}, "tensors": [{"name", "shape", "offset", "bytes"}]}), then
// the ".nt" encodings back to back. Offsets count from the end of the manifest.

std::vector<std::uint8_t> encode_checkpoint(const Model& model);
Model decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);
/// Loads and checks the archive against an expected config. Mismatches are
/// listed as "field: archive X ≠ config Y".
Model load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected);

/// Lines "field: archive X ≠ config Y" for every differing field.
std::vector<std::string> config_mismatches(const ModelConfig& archive, const ModelConfig& expected);

}  // namespace burstmamba

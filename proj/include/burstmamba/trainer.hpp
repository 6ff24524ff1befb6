#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "burstmamba/data.hpp"
#include "burstmamba/model.hpp"

namespace burstmamba {

struct TrainConfig {
  std::int64_t stage1_steps = 1000;
  std::int64_t stage2_steps = 2000;
  std::int64_t batch = 4;
  std::int64_t burst_len = 8;
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9, beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t patch1 = 24, patch2 = 16;  // LR pixels
  std::int64_t val_every = 0;             // 0: validate after the last step only
  std::int64_t val_count = 8;             // samples of the validation set used in the log
  std::uint64_t seed = 0;

  void validate() const;
  std::string to_json() const;
  /// Field names mirror the struct; unknown keys are rejected.
  static TrainConfig from_json(const std::string& text);
};

struct AdamConfig {
  double lr = 1e-4, beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0;
};

/// Moments in float64 with a step counter per parameter, so tensors that join
/// training late get their own bias correction.
struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::vector<std::int64_t> steps;
};

/// One decoupled-decay update: theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta).
/// `active` selects the parameters to update (empty = all). Throws NumericError
/// naming the parameter when a gradient is not finite.
void adamw_step(ParamList<float>& params, const std::vector<std::vector<float>>& grads, AdamState& state,
                const AdamConfig& cfg, const std::vector<bool>& active = {});

struct LogRow {
  std::int64_t step = 0;
  int stage = 1;
  double loss = 0;
  double val_psnr = 0, val_ssim = 0;
  bool has_val = false;
};

inline constexpr const char* kLogHeader = "step,stage,loss,val_psnr_db,val_ssim";
std::string format_log_row(const LogRow& r);

/// Raised when the loss or a gradient turns non-finite; the last good
/// checkpoint has been written by then.
class TrainingAborted : public NumericError {
 public:
  using NumericError::NumericError;
};

struct TrainOutputs {
  std::filesystem::path checkpoint;  // written at the end (or last good state on abort)
  std::filesystem::path log_csv;     // empty: no file
  std::filesystem::path record_json; // empty: no file
};

/// Stage 1 trains everything except the temporal blocks in detached mode;
/// stage 2 trains the whole model on bursts. L1 loss, AdamW, fixed seed.
std::vector<LogRow> train(Model& model, const Dataset& data, const Dataset& val, const TrainConfig& cfg,
                          const TrainOutputs& out, const std::function<void(const LogRow&)>& on_row = {});

struct EvalSample {
  double psnr = 0, ssim = 0;
};

struct EvalResult {
  std::int64_t length = 0;  // 0 means detached
  double mean_psnr = 0, mean_ssim = 0;
  std::vector<EvalSample> samples;
};

/// Forward with each burst truncated to `length` frames (0: detached keyframe
/// only). Predictions are clamped to [0, 1] before scoring. `limit` caps the
/// number of samples (0 = all).
EvalResult evaluate(const Model& model, const Dataset& data, std::int64_t length, std::int64_t limit = 0,
                    bool zero_flows = false);

/// First `length` frames of a sample (0 keeps just the keyframe).
Tensor truncate_burst(const Tensor& burst, std::int64_t length);

/// Prediction for one sample, clamped to [0, 1].
Tensor predict(const Model& model, const BurstSample& s, std::int64_t length, bool zero_flows = false);

}  // namespace burstmamba

#include "burstmamba/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>

#include "burstmamba/metrics.hpp"
#include "burstmamba/ops.hpp"
#include "burstmamba/rng.hpp"
#include "burstmamba/tensor_io.hpp"
#include "json.hpp"

#ifndef BURSTMAMBA_BUILD_ID
#define BURSTMAMBA_BUILD_ID "burstmamba-dev"
#endif

namespace burstmamba {

using nlohmann::json;

void TrainConfig::validate() const {
  auto positive = [](const char* name, double v) {
    if (!(v > 0)) throw Error(std::string("train config: ") + name + " must be positive");
  };
  if (stage1_steps < 0 || stage2_steps < 0) throw Error("train config: step counts must be non-negative");
  if (stage1_steps + stage2_steps == 0) throw Error("train config: no steps to run");
  positive("batch", double(batch));
  positive("burst_len", double(burst_len));
  if (!(lr >= 0)) throw Error("train config: lr must be non-negative");
  if (!(weight_decay >= 0)) throw Error("train config: weight_decay must be non-negative");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw Error("train config: betas must lie in [0, 1)");
  positive("eps", eps);
  positive("patch1", double(patch1));
  positive("patch2", double(patch2));
  if (patch1 % 2 || patch2 % 2) throw Error("train config: even extents required for patches");
  if (val_every < 0) throw Error("train config: val_every must be non-negative");
  if (val_count < 0) throw Error("train config: val_count must be non-negative");
}

std::string TrainConfig::to_json() const {
  json j = {{"stage1_steps", stage1_steps}, {"stage2_steps", stage2_steps}, {"batch", batch},
            {"burst_len", burst_len},       {"lr", lr},                     {"weight_decay", weight_decay},
            {"beta1", beta1},               {"beta2", beta2},               {"eps", eps},
            {"patch1", patch1},             {"patch2", patch2},             {"val_every", val_every},
            {"val_count", val_count},       {"seed", seed}};
  return j.dump(2);
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError("train config: " + std::string(e.what()), e.byte);
  }
  if (!j.is_object()) throw Error("train config: expected a JSON object");
  TrainConfig c;
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "stage1_steps") c.stage1_steps = v.get<std::int64_t>();
      else if (key == "stage2_steps") c.stage2_steps = v.get<std::int64_t>();
      else if (key == "batch") c.batch = v.get<std::int64_t>();
      else if (key == "burst_len") c.burst_len = v.get<std::int64_t>();
      else if (key == "lr") c.lr = v.get<double>();
      else if (key == "weight_decay") c.weight_decay = v.get<double>();
      else if (key == "beta1") c.beta1 = v.get<double>();
      else if (key == "beta2") c.beta2 = v.get<double>();
      else if (key == "eps") c.eps = v.get<double>();
      else if (key == "patch1") c.patch1 = v.get<std::int64_t>();
      else if (key == "patch2") c.patch2 = v.get<std::int64_t>();
      else if (key == "val_every") c.val_every = v.get<std::int64_t>();
      else if (key == "val_count") c.val_count = v.get<std::int64_t>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else throw Error("train config: unknown field '" + key + "'");
    } catch (const json::exception& e) {
      throw Error("train config: bad value for '" + key + "': " + e.what());
    }
  }
  c.validate();
  return c;
}

void adamw_step(ParamList<float>& params, const std::vector<std::vector<float>>& grads, AdamState& st,
                const AdamConfig& cfg, const std::vector<bool>& active) {
  const auto n = params.size();
  if (grads.size() != n) throw Error("adamw: " + std::to_string(grads.size()) + " gradients for " +
                                     std::to_string(n) + " parameters");
  if (!active.empty() && active.size() != n) throw Error("adamw: active mask size mismatch");
  if (st.m.empty()) {
    st.m.resize(n);
    st.v.resize(n);
    st.steps.assign(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
      st.m[i].assign(static_cast<std::size_t>(params[i].tensor->numel()), 0.0);
      st.v[i].assign(static_cast<std::size_t>(params[i].tensor->numel()), 0.0);
    }
  }
  if (st.m.size() != n) throw Error("adamw: optimizer state belongs to another parameter list");
  // check everything first so a bad gradient leaves every parameter untouched
  for (std::size_t i = 0; i < n; ++i) {
    if (!active.empty() && !active[i]) continue;
    if (static_cast<std::int64_t>(grads[i].size()) != params[i].tensor->numel())
      throw ShapeError("adamw: gradient size mismatch for " + params[i].name);
    if (!autograd::all_finite(std::span<const float>(grads[i])))
      throw NumericError("adamw: non-finite gradient in " + params[i].name);
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!active.empty() && !active[i]) continue;
    const auto t = ++st.steps[i];
    const double bc1 = 1.0 - std::pow(cfg.beta1, double(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, double(t));
    auto w = params[i].tensor->mutable_data();
    auto& m = st.m[i];
    auto& v = st.v[i];
    const auto& g = grads[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = cfg.beta1 * m[k] + (1 - cfg.beta1) * g[k];
      v[k] = cfg.beta2 * v[k] + (1 - cfg.beta2) * double(g[k]) * g[k];
      const double mh = m[k] / bc1, vh = v[k] / bc2;
      const double theta = w[k];
      w[k] = static_cast<float>(theta - cfg.lr * (mh / (std::sqrt(vh) + cfg.eps) + cfg.weight_decay * theta));
    }
  }
}

std::string format_log_row(const LogRow& r) {
  char buf[160];
  if (r.has_val)
    std::snprintf(buf, sizeof buf, "%lld,%d,%.8g,%.4f,%.5f", static_cast<long long>(r.step), r.stage, r.loss,
                  r.val_psnr, r.val_ssim);
  else
    std::snprintf(buf, sizeof buf, "%lld,%d,%.8g,,", static_cast<long long>(r.step), r.stage, r.loss);
  return buf;
}

Tensor truncate_burst(const Tensor& burst, std::int64_t length) {
  if (burst.rank() != 4) throw ShapeError("burst: expected (L, C, H, W), got " + shape_str(burst.shape()));
  const auto keep = length == 0 ? 1 : length;
  if (keep < 0 || keep > burst.dim(0))
    throw Error("burst length " + std::to_string(length) + " exceeds the " + std::to_string(burst.dim(0)) +
                " frames available");
  if (keep == burst.dim(0)) return burst;
  return slice(burst, 0, 0, keep).detach();
}

namespace {

std::vector<FlowMap> take_flows(const BurstSample& s, std::int64_t keep, bool zero_flows) {
  std::vector<FlowMap> out;
  for (std::int64_t b = 0; b < keep; ++b) {
    const auto& f = s.flows.at(static_cast<std::size_t>(b));
    out.push_back(zero_flows ? FlowMap::zeros(f.height, f.width) : f);
  }
  return out;
}

FlowMap crop_flow(const FlowMap& f, std::int64_t y0, std::int64_t x0, std::int64_t p) {
  FlowMap out;
  out.height = out.width = p;
  out.du.resize(static_cast<std::size_t>(p * p));
  out.dv.resize(out.du.size());
  for (std::int64_t y = 0; y < p; ++y)
    for (std::int64_t x = 0; x < p; ++x) {
      const auto src = (y0 + y) * f.width + x0 + x;
      out.du[y * p + x] = f.du[src];
      out.dv[y * p + x] = f.dv[src];
    }
  return out;
}

struct Crop {
  Tensor burst, target;
  std::vector<FlowMap> flows;
};

// Even offsets keep the RGGB phase of mosaicked inputs.
Crop random_crop(const BurstSample& s, std::int64_t frames, std::int64_t p, std::int64_t scale, Rng& rng) {
  const auto h = s.lr_burst.dim(2), w = s.lr_burst.dim(3);
  if (p > h || p > w)
    throw Error("train: patch " + std::to_string(p) + " larger than the " + std::to_string(h) + "x" +
                std::to_string(w) + " samples");
  const auto y0 = 2 * static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>((h - p) / 2 + 1)));
  const auto x0 = 2 * static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>((w - p) / 2 + 1)));
  Crop c;
  auto b = slice(slice(slice(s.lr_burst, 0, 0, frames), 2, y0, p), 3, x0, p);
  c.burst = b.detach();
  c.target = slice(slice(s.hr_target, 1, y0 * scale, p * scale), 2, x0 * scale, p * scale).detach();
  for (std::int64_t k = 0; k < frames; ++k) c.flows.push_back(crop_flow(s.flows[static_cast<std::size_t>(k)], y0, x0, p));
  return c;
}

std::vector<std::vector<float>> snapshot(ParamList<float>& params) {
  std::vector<std::vector<float>> out;
  for (auto& p : params) out.emplace_back(p.tensor->vec());
  return out;
}

void restore(ParamList<float>& params, const std::vector<std::vector<float>>& snap) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto d = params[i].tensor->mutable_data();
    std::copy(snap[i].begin(), snap[i].end(), d.begin());
  }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

}  // namespace

Tensor predict(const Model& model, const BurstSample& s, std::int64_t length, bool zero_flows) {
  autograd::NoGradGuard guard;
  const auto burst = truncate_burst(s.lr_burst, length);
  const bool detached = length == 0;
  const auto flows = take_flows(s, burst.dim(0), zero_flows);
  auto out = model_forward(model, burst, flows, detached).output;
  auto d = out.mutable_data();
  for (auto& v : d) v = std::clamp(v, 0.0f, 1.0f);
  return out;
}

EvalResult evaluate(const Model& model, const Dataset& data, std::int64_t length, std::int64_t limit,
                    bool zero_flows) {
  if (length < 0) throw Error("evaluate: negative burst length");
  if (length > data.manifest.burst)
    throw Error("evaluate: burst length " + std::to_string(length) + " exceeds the dataset's " +
                std::to_string(data.manifest.burst) + " frames");
  EvalResult r;
  r.length = length;
  const auto n = limit > 0 ? std::min(limit, data.size()) : data.size();
  if (n == 0) throw Error("evaluate: empty dataset");
  for (std::int64_t i = 0; i < n; ++i) {
    const auto s = data.load(i);
    const auto pred = predict(model, s, length, zero_flows);
    EvalSample e{psnr(pred, s.hr_target), ssim(pred, s.hr_target)};
    r.mean_psnr += e.psnr;
    r.mean_ssim += e.ssim;
    r.samples.push_back(e);
  }
  r.mean_psnr /= double(n);
  r.mean_ssim /= double(n);
  return r;
}

std::vector<LogRow> train(Model& model, const Dataset& data, const Dataset& val, const TrainConfig& cfg,
                          const TrainOutputs& out, const std::function<void(const LogRow&)>& on_row) {
  cfg.validate();
  model.config.validate();
  if (data.size() == 0) throw Error("train: empty dataset");
  if (cfg.burst_len > data.manifest.burst)
    throw Error("train: burst_len " + std::to_string(cfg.burst_len) + " exceeds the dataset's " +
                std::to_string(data.manifest.burst) + " frames");
  const auto cin = model.config.in_channels();
  if ((data.manifest.degradation.mosaic ? 1 : 3) != cin)
    throw Error("train: dataset input channels do not match the model input mode");
  if (data.manifest.degradation.scale != model.config.scale) throw Error("train: dataset scale differs from the model");

  for (auto p : {cfg.stage1_steps > 0 ? cfg.patch1 : 0, cfg.stage2_steps > 0 ? cfg.patch2 : 0})
    if (p > data.manifest.height || p > data.manifest.width)
      throw Error("train: patch " + std::to_string(p) + " larger than the " + std::to_string(data.manifest.height) +
                  "x" + std::to_string(data.manifest.width) + " samples");

  std::vector<BurstSample> samples;
  samples.reserve(static_cast<std::size_t>(data.size()));
  for (std::int64_t i = 0; i < data.size(); ++i) samples.push_back(data.load(i));

  auto params = model.parameters();
  std::vector<bool> temporal_mask(params.size(), false);
  {
    auto tp = model.temporal_parameters();
    for (std::size_t i = 0; i < params.size(); ++i)
      for (const auto& t : tp)
        if (t.tensor == params[i].tensor) temporal_mask[i] = true;
  }
  std::vector<bool> stage1_mask(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) stage1_mask[i] = !temporal_mask[i];

  std::ofstream csv;
  if (!out.log_csv.empty()) {
    csv.open(out.log_csv, std::ios::binary);
    if (!csv) throw IoError("cannot write " + out.log_csv.string());
    csv << kLogHeader << '\n';
  }
  auto write_record = [&](std::int64_t steps_done, const std::string& status) {
    if (out.record_json.empty()) return;
    json rec = {{"build_id", BURSTMAMBA_BUILD_ID},
                {"seed", cfg.seed},
                {"model", json::parse(model.config.to_json())},
                {"train", json::parse(cfg.to_json())},
                {"data", data.dir.string()},
                {"data_manifest", json::parse(data.manifest.to_json())},
                {"steps_done", steps_done},
                {"status", status}};
    write_text(out.record_json, rec.dump(2) + "\n");
  };

  const AdamConfig adam{cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay};
  AdamState state;
  Rng rng = Rng::stream(cfg.seed, "batches");
  std::vector<LogRow> log;
  std::optional<std::vector<std::vector<float>>> last_good;
  const auto total = cfg.stage1_steps + cfg.stage2_steps;

  for (std::int64_t step = 1; step <= total; ++step) {
    const int stage = step <= cfg.stage1_steps ? 1 : 2;
    const bool detached = stage == 1;
    const auto& mask = stage == 1 ? stage1_mask : std::vector<bool>{};
    for (std::size_t i = 0; i < params.size(); ++i) {
      params[i].tensor->set_requires_grad(stage == 2 || !temporal_mask[i]);
      params[i].tensor->zero_grad();
    }
    const auto patch = stage == 1 ? cfg.patch1 : cfg.patch2;
    const auto frames = stage == 1 ? 1 : cfg.burst_len;
    double loss_sum = 0;
    try {
      for (std::int64_t k = 0; k < cfg.batch; ++k) {
        const auto idx = static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(samples.size())));
        const auto c = random_crop(samples[idx], frames, patch, model.config.scale, rng);
        const auto res = model_forward(model, c.burst, c.flows, detached);
        const auto loss = mul_scalar(l1_loss(res.output, c.target), 1.0f / float(cfg.batch));
        loss_sum += loss.item();
        backward(loss);
      }
      if (!std::isfinite(loss_sum)) throw NumericError("non-finite loss");
      last_good = snapshot(params);
      std::vector<std::vector<float>> grads(params.size());
      for (std::size_t i = 0; i < params.size(); ++i) {
        const auto g = params[i].tensor->grad();
        if (g.empty()) grads[i].assign(static_cast<std::size_t>(params[i].tensor->numel()), 0.0f);
        else grads[i].assign(g.begin(), g.end());
      }
      adamw_step(params, grads, state, adam, mask);
      model.clamp_a();
    } catch (const NumericError& e) {
      std::string where = "training aborted at step " + std::to_string(step) + ": " + e.what();
      for (auto& p : params) p.tensor->zero_grad();
      if (last_good && !out.checkpoint.empty()) {
        restore(params, *last_good);
        save_checkpoint(model, out.checkpoint);
        where += "; last good checkpoint kept at " + out.checkpoint.string();
      }
      write_record(step - 1, "aborted");
      throw TrainingAborted(where);
    }

    LogRow row;
    row.step = step;
    row.stage = stage;
    row.loss = loss_sum;
    const bool stage_end = step == cfg.stage1_steps || step == total;
    if (cfg.val_count > 0 && val.size() > 0 && (stage_end || (cfg.val_every > 0 && step % cfg.val_every == 0))) {
      const auto vl = std::min(cfg.burst_len, val.manifest.burst);
      const auto r = evaluate(model, val, stage == 1 ? 0 : vl, cfg.val_count);
      row.has_val = true;
      row.val_psnr = r.mean_psnr;
      row.val_ssim = r.mean_ssim;
    }
    log.push_back(row);
    if (csv.is_open()) {
      csv << format_log_row(row) << '\n';
      csv.flush();
    }
    if (on_row) on_row(row);
  }
  for (auto& p : params) {
    p.tensor->zero_grad();
    p.tensor->set_requires_grad(false);
  }
  if (!out.checkpoint.empty()) save_checkpoint(model, out.checkpoint);
  write_record(total, "completed");
  return log;
}

}  // namespace burstmamba

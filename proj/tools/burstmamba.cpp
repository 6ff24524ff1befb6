// burstmamba command line: data generation, training, inference, evaluation,
// kernel timing and the invariant self-check.
//
// exit codes: 0 ok, 1 runtime/IO, 2 usage/validation, 3 numerical abort

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "burstmamba/bench.hpp"
#include "burstmamba/data.hpp"
#include "burstmamba/metrics.hpp"
#include "burstmamba/model.hpp"
#include "burstmamba/selfcheck.hpp"
#include "burstmamba/ssm.hpp"
#include "burstmamba/tensor_io.hpp"
#include "burstmamba/trainer.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace burstmamba;
using nlohmann::json;

namespace {

constexpr int kOk = 0, kRuntime = 1, kUsage = 2, kNumeric = 3;

std::string read_text(const fs::path& p) {
  const auto b = read_file_bytes(p);
  return {b.begin(), b.end()};
}

void write_text(const fs::path& p, const std::string& s) {
  write_file_bytes(p, std::vector<std::uint8_t>(s.begin(), s.end()));
}

fs::path with_ext(fs::path p, const char* ext) { return p.replace_extension(ext); }

// --- gen-data

struct GenArgs {
  fs::path out;
  std::int64_t count = 16;
  std::vector<std::int64_t> size{32, 32};
  std::int64_t burst = 8;
  double shift_max = 3.0, noise = 0.0, frequency = 1.0;
  bool mosaic = false;
  std::string downsample = "box";
  std::uint64_t seed = 0;
};

int gen_data(const GenArgs& a) {
  DatasetManifest m;
  m.seed = a.seed;
  m.count = a.count;
  m.height = a.size.at(0);
  m.width = a.size.at(1);
  m.burst = a.burst;
  m.frequency = a.frequency;
  m.degradation.shift_max = a.shift_max;
  m.degradation.noise_sigma = a.noise;
  m.degradation.mosaic = a.mosaic;
  if (a.downsample == "box") m.degradation.downsample = Downsample::box;
  else if (a.downsample == "bicubic") m.degradation.downsample = Downsample::bicubic;
  else throw Error("unknown downsample mode '" + a.downsample + "'");
  m.validate();
  write_dataset(m, a.out);
  std::cout << "wrote " << m.count << " samples to " << a.out.string() << "\n";
  return kOk;
}

// --- train

struct TrainArgs {
  fs::path data, val, out, config, log, record;
  std::optional<std::int64_t> stage1, stage2, batch, burst_len, val_every, val_count, patch1, patch2;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
};

// {"model": {...ModelConfig fields}, "train": {...TrainConfig fields}}; both optional.
void load_run_config(const fs::path& path, ModelConfig& mc, TrainConfig& tc, bool& mode_given) {
  json j;
  const auto text = read_text(path);
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError("config " + path.string() + ": " + e.what(), e.byte);
  }
  if (!j.is_object()) throw Error("config: expected a JSON object");
  for (const auto& [key, v] : j.items()) {
    if (key == "model") {
      mc = ModelConfig::from_json(v.dump());
      mode_given = v.contains("input_mode");
    } else if (key == "train") {
      tc = TrainConfig::from_json(v.dump());
    } else {
      throw Error("config: unknown section '" + key + "' (expected model, train)");
    }
  }
}

int train_cmd(const TrainArgs& a) {
  ModelConfig mc;
  TrainConfig tc;
  bool mode_given = false;
  if (!a.config.empty()) load_run_config(a.config, mc, tc, mode_given);
  if (a.stage1) tc.stage1_steps = *a.stage1;
  if (a.stage2) tc.stage2_steps = *a.stage2;
  if (a.batch) tc.batch = *a.batch;
  if (a.burst_len) tc.burst_len = *a.burst_len;
  if (a.val_every) tc.val_every = *a.val_every;
  if (a.val_count) tc.val_count = *a.val_count;
  if (a.patch1) tc.patch1 = *a.patch1;
  if (a.patch2) tc.patch2 = *a.patch2;
  if (a.lr) tc.lr = *a.lr;
  if (a.seed) tc.seed = *a.seed;
  tc.validate();

  const auto data = Dataset::open(a.data);
  const auto val = a.val.empty() ? data : Dataset::open(a.val);
  if (!mode_given) mc.input_mode = data.manifest.degradation.mosaic ? InputMode::rggb1 : InputMode::rgb3;
  mc.validate();

  TrainOutputs out{a.out, a.log.empty() ? with_ext(a.out, ".csv") : a.log,
                   a.record.empty() ? with_ext(a.out, ".json") : a.record};
  if (out.log_csv == out.checkpoint || out.record_json == out.checkpoint)
    throw Error("train: --out must not share its name with the log or record");
  auto model = Model::init(mc);
  std::cerr << "model: " << model.parameter_count() << " parameters; " << tc.stage1_steps << " + "
            << tc.stage2_steps << " steps\n";
  train(model, data, val, tc, out, [](const LogRow& r) {
    if (r.has_val) std::cerr << "step " << r.step << " stage " << r.stage << " loss " << r.loss << " val "
                             << r.val_psnr << " dB / " << r.val_ssim << "\n";
  });
  std::cout << "checkpoint " << out.checkpoint.string() << "\nlog " << out.log_csv.string() << "\n";
  return kOk;
}

// --- infer

struct InferArgs {
  fs::path ckpt, burst, out, config;
  bool detached = false;
  std::optional<std::int64_t> length, diff_length;
  std::int64_t index = 0;
};

Model open_checkpoint(const fs::path& ckpt, const fs::path& config) {
  if (config.empty()) return load_checkpoint(ckpt);
  ModelConfig mc;
  TrainConfig unused;
  bool mode_given = false;
  load_run_config(config, mc, unused, mode_given);
  return load_checkpoint(ckpt, mc);
}

// A dataset directory (with --index) or a directory holding lr.nt and,
// optionally, flows.nt (missing flows are taken as zero).
BurstSample read_burst(const fs::path& dir, std::int64_t index) {
  if (fs::exists(dir / "manifest.json")) return Dataset::open(dir).load(index);
  BurstSample s;
  s.lr_burst = load_tensor(dir / "lr.nt");
  if (s.lr_burst.rank() != 4) throw ShapeError("lr.nt: expected (L, C, H, W), got " + shape_str(s.lr_burst.shape()));
  if (fs::exists(dir / "flows.nt")) {
    s.flows = flows_from_tensor(load_tensor(dir / "flows.nt"));
  } else {
    for (std::int64_t b = 0; b < s.lr_burst.dim(0); ++b)
      s.flows.push_back(FlowMap::zeros(s.lr_burst.dim(2), s.lr_burst.dim(3)));
  }
  return s;
}

// channel-mean absolute Laplacian, the high-frequency energy of an image
std::vector<double> hf_energy(const Tensor& img) {
  const auto c = img.dim(0), h = img.dim(1), w = img.dim(2);
  std::vector<double> e(static_cast<std::size_t>(h * w), 0.0);
  auto at = [&](std::int64_t k, std::int64_t y, std::int64_t x) {
    y = std::clamp<std::int64_t>(y, 0, h - 1);
    x = std::clamp<std::int64_t>(x, 0, w - 1);
    return double(img.data()[(k * h + y) * w + x]);
  };
  for (std::int64_t k = 0; k < c; ++k)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x)
        e[y * w + x] += std::abs(4 * at(k, y, x) - at(k, y - 1, x) - at(k, y + 1, x) - at(k, y, x - 1) - at(k, y, x + 1));
  return e;
}

int infer_cmd(const InferArgs& a) {
  const auto model = open_checkpoint(a.ckpt, a.config);
  const auto s = read_burst(a.burst, a.index);
  const auto frames = s.lr_burst.dim(0);
  std::int64_t length = a.length.value_or(frames);
  if (a.detached) {
    if (frames > 1) std::cerr << "warning: detached mode reads the keyframe only; " << frames - 1 << " frames ignored\n";
    length = 0;
  }
  const auto out = predict(model, s, length);
  write_ppm(out, a.out);
  save_tensor(out, with_ext(a.out, ".nt"));
  std::cout << "wrote " << a.out.string() << " (" << shape_str(out.shape()) << ")\n";
  if (s.hr_target.defined())
    std::cout << "psnr_db " << psnr(out, s.hr_target) << " ssim " << ssim(out, s.hr_target) << "\n";

  if (a.diff_length) {
    const auto other = predict(model, s, *a.diff_length);
    const auto c = out.dim(0), h = out.dim(1), w = out.dim(2);
    std::vector<double> diff(static_cast<std::size_t>(h * w), 0.0);
    for (std::int64_t k = 0; k < c; ++k)
      for (std::int64_t p = 0; p < h * w; ++p) {
        const double d = double(out.data()[k * h * w + p]) - other.data()[k * h * w + p];
        diff[p] += d * d;
      }
    const auto hf = hf_energy(s.hr_target.defined() ? s.hr_target : out);
    std::vector<std::size_t> order(hf.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](auto x, auto y) { return hf[x] > hf[y]; });
    double total = 0, top = 0, peak = 0;
    for (auto d : diff) total += d, peak = std::max(peak, d);
    for (std::size_t i = 0; i < order.size() / 4; ++i) top += diff[order[i]];
    Tensor map({1, h, w});
    auto md = map.mutable_data();
    for (std::size_t i = 0; i < diff.size(); ++i) md[i] = peak > 0 ? static_cast<float>(std::sqrt(diff[i] / peak)) : 0.0f;
    auto map_path = a.out;
    map_path.replace_filename(a.out.stem().string() + "_diff.pgm");
    write_ppm(map, map_path);
    std::printf("difference L=%lld vs L=%lld: rms %.6g, share of difference energy in the top 25%% "
                "high-frequency pixels %.4f (0.25 if uncorrelated); map %s\n",
                static_cast<long long>(length), static_cast<long long>(*a.diff_length),
                std::sqrt(total / double(c * h * w)), total > 0 ? top / total : 0.0, map_path.string().c_str());
  }
  return kOk;
}

// --- eval

struct EvalArgs {
  fs::path ckpt, data, out, config;
  std::vector<std::int64_t> lengths{1, 2, 5, 8};
  std::int64_t limit = 0;
  bool zero_flows = false;
};

int eval_cmd(const EvalArgs& a) {
  const auto model = open_checkpoint(a.ckpt, a.config);
  const auto data = Dataset::open(a.data);
  if (data.size() == 0) throw Error("eval: empty dataset " + a.data.string());
  std::string csv = "length,mean_psnr_db,mean_ssim\n";
  for (auto l : a.lengths) {
    const auto r = evaluate(model, data, l, a.limit, a.zero_flows);
    char buf[128];
    std::snprintf(buf, sizeof buf, "%lld,%.6f,%.6f\n", static_cast<long long>(l), r.mean_psnr, r.mean_ssim);
    csv += buf;
  }
  if (a.out.empty()) std::cout << csv;
  else write_text(a.out, csv);
  return kOk;
}

// --- bench

int bench_cmd(const BenchOptions& opt, const fs::path& out) {
  const auto rows = run_bench(opt);
  const auto csv = bench_csv(rows, opt.reps);
  if (out.empty()) {
    std::cout << csv;
  } else {
    write_text(out, csv);
    for (const char* k : {"selective_scan", "attention"}) {
      std::cout << k << " doubling ratios:";
      for (double r : doubling_ratios(rows, k)) std::cout << " " << r;
      std::cout << "\n";
    }
  }
  return kOk;
}

// --- selfcheck

int selfcheck_cmd(double perturb) {
  testing::set_zoh_perturbation(perturb);
  const auto results = run_selfcheck();
  testing::set_zoh_perturbation(0);
  std::cout << format_selfcheck(results);
  for (const auto& r : results)
    if (!r.pass) return kRuntime;
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"burst super-resolution with state-space scans"};
  app.set_version_flag("--version", std::string(BURSTMAMBA_BUILD_ID));
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "write a synthetic burst dataset");
  g->add_option("--out", gen.out, "output directory")->required();
  g->add_option("--count", gen.count, "number of samples");
  g->add_option("--size", gen.size, "LR height and width")->expected(2);
  g->add_option("--burst", gen.burst, "frames per burst");
  g->add_option("--shift-max", gen.shift_max, "largest shift in HR pixels");
  g->add_option("--noise", gen.noise, "Gaussian noise sigma");
  g->add_flag("--mosaic", gen.mosaic, "single-channel RGGB frames");
  g->add_option("--frequency", gen.frequency, "detail frequency scale of the HR images");
  g->add_option("--downsample", gen.downsample, "box or bicubic");
  g->add_option("--seed", gen.seed, "dataset seed");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "two-stage training");
  t->add_option("--data", tr.data, "training dataset directory")->required();
  t->add_option("--out", tr.out, "checkpoint path")->required();
  t->add_option("--config", tr.config, "JSON with optional model and train sections");
  t->add_option("--val", tr.val, "validation dataset (default: the training set)");
  t->add_option("--log", tr.log, "metrics CSV (default: <out>.csv)");
  t->add_option("--record", tr.record, "experiment record (default: <out>.json)");
  t->add_option("--stage1", tr.stage1, "keyframe-only steps");
  t->add_option("--stage2", tr.stage2, "full-burst steps");
  t->add_option("--batch", tr.batch);
  t->add_option("--burst-len", tr.burst_len);
  t->add_option("--patch1", tr.patch1, "stage-1 LR patch size");
  t->add_option("--patch2", tr.patch2, "stage-2 LR patch size");
  t->add_option("--lr", tr.lr);
  t->add_option("--val-every", tr.val_every);
  t->add_option("--val-count", tr.val_count);
  t->add_option("--seed", tr.seed);

  InferArgs inf;
  auto* i = app.add_subcommand("infer", "super-resolve one burst");
  i->add_option("--ckpt", inf.ckpt)->required();
  i->add_option("--burst", inf.burst, "dataset directory or directory with lr.nt [flows.nt]")->required();
  i->add_option("--out", inf.out, "output PPM (a .nt copy is written next to it)")->required();
  i->add_option("--config", inf.config, "expected model config");
  i->add_flag("--detached", inf.detached, "keyframe-only inference");
  i->add_option("--length", inf.length, "use the first L frames");
  i->add_option("--index", inf.index, "sample index inside a dataset directory");
  i->add_option("--diff-length", inf.diff_length, "also run with this length and report the difference map");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "mean PSNR/SSIM per burst length");
  e->add_option("--ckpt", ev.ckpt)->required();
  e->add_option("--data", ev.data)->required();
  e->add_option("--lengths", ev.lengths, "comma separated; 0 = detached")->delimiter(',');
  e->add_option("--out", ev.out, "CSV path (default: stdout)");
  e->add_option("--config", ev.config, "expected model config");
  e->add_option("--limit", ev.limit, "first N samples only");
  e->add_flag("--zero-flows", ev.zero_flows, "replace every flow by zero");

  BenchOptions bo;
  fs::path bench_out;
  auto* b = app.add_subcommand("bench", "scan vs quadratic attention timing");
  b->add_option("--lengths", bo.lengths)->delimiter(',');
  b->add_option("--reps", bo.reps);
  b->add_option("--out", bench_out, "CSV path (default: stdout)");

  double perturb = 0;
  auto* s = app.add_subcommand("selfcheck", "run the invariant suite");
  s->add_option("--perturb-zoh", perturb, "test hook: scale ZOH gains by (1 + EPS)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& ok) {
    return app.exit(ok);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return kUsage;
  }

  try {
    if (*g) return gen_data(gen);
    if (*t) return train_cmd(tr);
    if (*i) return infer_cmd(inf);
    if (*e) return eval_cmd(ev);
    if (*b) return bench_cmd(bo, bench_out);
    if (*s) return selfcheck_cmd(perturb);
  } catch (const NumericError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kNumeric;
  } catch (const IoError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kRuntime;
  } catch (const Error& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kUsage;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}

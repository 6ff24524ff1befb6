#include "burstmamba/data.hpp"

#include <algorithm>
#include <cmath>
#include <cctype>
#include <cstdio>
#include <numbers>
#include <sstream>

#include "burstmamba/rng.hpp"
#include "burstmamba/tensor_io.hpp"
#include "json.hpp"

namespace burstmamba {

using nlohmann::json;

Tensor generate_hr(std::uint64_t seed, std::int64_t lr_height, std::int64_t lr_width, double frequency) {
  if (lr_height < 1 || lr_width < 1) throw ShapeError("generate_hr: extents must be >= 1");
  if (!(frequency >= 0) || !std::isfinite(frequency)) throw Error("generate_hr: frequency must be finite and >= 0");
  const auto h = 4 * lr_height, w = 4 * lr_width;
  Tensor img(Shape{3, h, w}, 0.5f);
  if (frequency == 0) return img;

  auto rng = Rng::stream(seed, "hr");
  const double amp = std::min(1.0, frequency);
  std::vector<double> acc(static_cast<std::size_t>(3 * h * w));
  std::array<double, 3> base;
  for (auto& b : base) b = 0.5 + amp * rng.uniform(-0.2, 0.2);
  for (int c = 0; c < 3; ++c)
    for (std::int64_t p = 0; p < h * w; ++p) acc[c * h * w + p] = base[c];

  auto add = [&](auto&& field, const std::array<double, 3>& gain) {
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        const double v = field(double(x), double(y));
        for (int c = 0; c < 3; ++c) acc[(c * h + y) * w + x] += gain[c] * v;
      }
  };
  auto color = [&](double lo, double hi) {
    const double a = amp * rng.uniform(lo, hi);
    // mostly luminance with some chroma
    return std::array<double, 3>{a * rng.uniform(0.6, 1.0), a * rng.uniform(0.6, 1.0), a * rng.uniform(0.6, 1.0)};
  };

  // oriented sinusoids, up to 0.3 cycles per HR pixel (above the LR Nyquist limit)
  for (int k = 0; k < 3; ++k) {
    const double f = frequency * rng.uniform(0.02, 0.3), th = rng.uniform(0, std::numbers::pi);
    const double ph = rng.uniform(0, 2 * std::numbers::pi);
    const double cx = std::cos(th), sy = std::sin(th);
    add([&](double x, double y) { return std::sin(2 * std::numbers::pi * f * (x * cx + y * sy) + ph); },
        color(-0.15, 0.15));
  }
  // checkerboards inside random rectangles
  for (int k = 0; k < 2; ++k) {
    const double period = double(2 + rng.below(11)) / frequency;
    const double ox = rng.uniform(0, period), oy = rng.uniform(0, period);
    const double x0 = rng.uniform(0, double(w) * 0.6), y0 = rng.uniform(0, double(h) * 0.6);
    const double x1 = x0 + rng.uniform(0.3, 0.7) * double(w), y1 = y0 + rng.uniform(0.3, 0.7) * double(h);
    add(
        [&](double x, double y) {
          if (x < x0 || x >= x1 || y < y0 || y >= y1) return 0.0;
          const auto cx = static_cast<std::int64_t>(std::floor((x + ox) / period));
          const auto cy = static_cast<std::int64_t>(std::floor((y + oy) / period));
          return ((cx + cy) % 2 == 0) ? 1.0 : -1.0;
        },
        color(-0.2, 0.2));
  }
  // smooth blobs
  for (int k = 0; k < 4; ++k) {
    const double bx = rng.uniform(0, double(w)), by = rng.uniform(0, double(h));
    const double s = rng.uniform(4, 24) / frequency;
    add(
        [&](double x, double y) {
          const double dx = x - bx, dy = y - by;
          return std::exp(-(dx * dx + dy * dy) / (2 * s * s));
        },
        color(-0.3, 0.3));
  }
  auto out = img.mutable_data();
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<float>(std::clamp(acc[i], 0.0, 1.0));
  return img;
}

void DegradationConfig::validate() const {
  if (scale != 4) throw Error("degradation: scale must be 4");
  if (!(shift_max >= 0) || !std::isfinite(shift_max)) throw Error("degradation: shift_max must be >= 0");
  if (!(noise_sigma >= 0) || !std::isfinite(noise_sigma)) throw Error("degradation: noise_sigma must be >= 0");
}

Tensor translate_bilinear(const Tensor& img, double dx, double dy) {
  if (img.rank() != 3) throw ShapeError("translate: expected (C,H,W), got " + shape_str(img.shape()));
  if (dx == 0 && dy == 0) return img.clone();
  const auto c = img.dim(0), h = img.dim(1), w = img.dim(2);
  Tensor out(img.shape());
  auto o = out.mutable_data();
  const auto& v = img.vec();
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      const double sx = double(x) + dx, sy = double(y) + dy;
      const double fx0 = std::floor(sx), fy0 = std::floor(sy);
      const double fx = sx - fx0, fy = sy - fy0;
      auto cl = [](double q, std::int64_t n) { return std::clamp<std::int64_t>(static_cast<std::int64_t>(q), 0, n - 1); };
      const auto x1 = cl(fx0, w), x2 = cl(fx0 + 1, w), y1 = cl(fy0, h), y2 = cl(fy0 + 1, h);
      for (std::int64_t k = 0; k < c; ++k) {
        const float* p = v.data() + k * h * w;
        const double val = (1 - fx) * (1 - fy) * p[y1 * w + x1] + fx * (1 - fy) * p[y1 * w + x2] +
                           (1 - fx) * fy * p[y2 * w + x1] + fx * fy * p[y2 * w + x2];
        o[(k * h + y) * w + x] = static_cast<float>(val);
      }
    }
  return out;
}

namespace {

double keys_cubic(double t) {
  const double a = -0.5;
  t = std::abs(t);
  if (t < 1) return (a + 2) * t * t * t - (a + 3) * t * t + 1;
  if (t < 2) return a * t * t * t - 5 * a * t * t + 8 * a * t - 4 * a;
  return 0;
}

}  // namespace

Tensor downsample(const Tensor& img, std::int64_t scale, Downsample mode) {
  if (img.rank() != 3) throw ShapeError("downsample: expected (C,H,W), got " + shape_str(img.shape()));
  const auto c = img.dim(0), hh = img.dim(1), ww = img.dim(2);
  if (scale < 1 || hh % scale || ww % scale)
    throw ShapeError("downsample: extents " + shape_str(img.shape()) + " not divisible by " + std::to_string(scale));
  const auto h = hh / scale, w = ww / scale;
  Tensor out(Shape{c, h, w});
  auto o = out.mutable_data();
  const auto& v = img.vec();
  if (mode == Downsample::box) {
    const double n = double(scale * scale);
    for (std::int64_t k = 0; k < c; ++k)
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) {
          double s = 0;
          for (std::int64_t i = 0; i < scale; ++i)
            for (std::int64_t j = 0; j < scale; ++j) s += v[(k * hh + y * scale + i) * ww + x * scale + j];
          o[(k * h + y) * w + x] = static_cast<float>(s / n);
        }
    return out;
  }
  // antialiased cubic: kernel stretched by the scale, taps clamped at the border
  const auto taps = 4 * scale;
  std::vector<double> wt(static_cast<std::size_t>(taps));
  double norm = 0;
  for (std::int64_t t = 0; t < taps; ++t) {
    const double d = (double(t - taps / 2) + 0.5) / double(scale);
    wt[t] = keys_cubic(d);
    norm += wt[t];
  }
  for (auto& e : wt) e /= norm;
  std::vector<double> rows(static_cast<std::size_t>(c * h * ww));
  for (std::int64_t k = 0; k < c; ++k)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < ww; ++x) {
        double s = 0;
        for (std::int64_t t = 0; t < taps; ++t) {
          const auto src = std::clamp<std::int64_t>(y * scale + scale / 2 - taps / 2 + t, 0, hh - 1);
          s += wt[t] * v[(k * hh + src) * ww + x];
        }
        rows[(k * h + y) * ww + x] = s;
      }
  for (std::int64_t k = 0; k < c; ++k)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        double s = 0;
        for (std::int64_t t = 0; t < taps; ++t) {
          const auto src = std::clamp<std::int64_t>(x * scale + scale / 2 - taps / 2 + t, 0, ww - 1);
          s += wt[t] * rows[(k * h + y) * ww + src];
        }
        o[(k * h + y) * w + x] = static_cast<float>(s);
      }
  return out;
}

Tensor mosaic_rggb(const Tensor& rgb) {
  if (rgb.rank() != 3 || rgb.dim(0) != 3) throw ShapeError("mosaic_rggb: expected (3,H,W), got " + shape_str(rgb.shape()));
  const auto h = rgb.dim(1), w = rgb.dim(2);
  if (h % 2 || w % 2) throw ShapeError("mosaic_rggb: even extents required, got " + shape_str(rgb.shape()));
  Tensor out(Shape{1, h, w});
  auto o = out.mutable_data();
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      const int ch = (y % 2 == 0) ? (x % 2 == 0 ? 0 : 1) : (x % 2 == 0 ? 1 : 2);
      o[y * w + x] = rgb.vec()[(ch * h + y) * w + x];
    }
  return out;
}

BurstSample synthesize_burst(const Tensor& hr, const std::vector<std::array<double, 2>>& shifts,
                             const DegradationConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (hr.rank() != 3 || hr.dim(0) != 3) throw ShapeError("synthesize_burst: expected HR (3,H,W), got " + shape_str(hr.shape()));
  const auto s = cfg.scale;
  if (hr.dim(1) % (2 * s) || hr.dim(2) % (2 * s))
    throw ShapeError("synthesize_burst: HR extents " + shape_str(hr.shape()) + " must be divisible by " +
                     std::to_string(2 * s));
  if (shifts.empty()) throw Error("synthesize_burst: no frames");
  if (shifts[0][0] != 0 || shifts[0][1] != 0) throw Error("synthesize_burst: the keyframe shift must be (0, 0)");
  const auto h = hr.dim(1) / s, w = hr.dim(2) / s;
  const auto l = static_cast<std::int64_t>(shifts.size());
  const std::int64_t cin = cfg.mosaic ? 1 : 3;

  BurstSample out;
  out.seed = seed;
  out.hr_target = hr.clone();
  out.shifts = shifts;
  out.lr_burst = Tensor(Shape{l, cin, h, w});
  auto dst = out.lr_burst.mutable_data();
  auto noise = Rng::stream(seed, "noise");
  for (std::int64_t b = 0; b < l; ++b) {
    const auto [dx, dy] = shifts[static_cast<std::size_t>(b)];
    auto lr = downsample(translate_bilinear(hr, dx, dy), s, cfg.downsample);
    if (cfg.noise_sigma > 0)
      for (auto& v : lr.mutable_data())
        v = static_cast<float>(std::clamp(double(v) + cfg.noise_sigma * noise.normal(), 0.0, 1.0));
    if (cfg.mosaic) lr = mosaic_rggb(lr);
    std::copy(lr.vec().begin(), lr.vec().end(), dst.begin() + b * cin * h * w);
    out.flows.push_back(b == 0 ? FlowMap::zeros(h, w)
                               : FlowMap::constant(h, w, static_cast<float>(dx / double(s)),
                                                   static_cast<float>(dy / double(s))));
  }
  return out;
}

BurstSample synthesize_burst(const Tensor& hr, std::int64_t frames, const DegradationConfig& cfg, std::uint64_t seed) {
  if (frames < 1) throw Error("synthesize_burst: need at least one frame");
  cfg.validate();
  auto rng = Rng::stream(seed, "shifts");
  std::vector<std::array<double, 2>> shifts{{0.0, 0.0}};
  for (std::int64_t b = 1; b < frames; ++b) {
    const double dx = rng.uniform(-cfg.shift_max, cfg.shift_max);
    const double dy = rng.uniform(-cfg.shift_max, cfg.shift_max);
    shifts.push_back({dx, dy});
  }
  return synthesize_burst(hr, shifts, cfg, seed);
}

void write_ppm(const Tensor& img, const std::filesystem::path& path) {
  if (img.rank() != 3 || (img.dim(0) != 3 && img.dim(0) != 1))
    throw ShapeError("write_ppm: expected (3,H,W) or (1,H,W), got " + shape_str(img.shape()));
  const auto c = img.dim(0), h = img.dim(1), w = img.dim(2);
  const std::string header = (c == 3 ? "P6\n" : "P5\n") + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  for (std::int64_t p = 0; p < h * w; ++p)
    for (std::int64_t k = 0; k < c; ++k) {
      const double v = std::clamp(double(img.vec()[k * h * w + p]), 0.0, 1.0);
      bytes.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0)));
    }
  write_file_bytes(path, bytes);
}

Tensor read_ppm(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    std::string t;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) t += static_cast<char>(bytes[pos++]);
    if (t.empty()) throw ParseError("ppm: truncated header", pos);
    return t;
  };
  const auto magic = token();
  if (magic != "P6" && magic != "P5") throw ParseError("ppm: expected P6 or P5", 0);
  std::int64_t w = 0, h = 0, maxv = 0;
  try {
    w = std::stoll(token());
    h = std::stoll(token());
    maxv = std::stoll(token());
  } catch (const std::logic_error&) {
    throw ParseError("ppm: bad header number", pos);
  }
  if (w < 1 || h < 1 || maxv != 255) throw ParseError("ppm: only 8-bit images with positive extents", pos);
  ++pos;  // single whitespace after maxval
  const std::int64_t c = magic == "P6" ? 3 : 1;
  if (bytes.size() < pos + static_cast<std::size_t>(c * h * w)) throw ParseError("ppm: truncated pixel data", bytes.size());
  Tensor img(Shape{c, h, w});
  auto o = img.mutable_data();
  for (std::int64_t p = 0; p < h * w; ++p)
    for (std::int64_t k = 0; k < c; ++k) o[k * h * w + p] = float(bytes[pos++]) / 255.0f;
  return img;
}

Tensor flows_to_tensor(const std::vector<FlowMap>& flows) {
  if (flows.empty()) throw Error("flows_to_tensor: no flows");
  const auto h = flows[0].height, w = flows[0].width;
  Tensor t(Shape{static_cast<std::int64_t>(flows.size()), 2, h, w});
  auto o = t.mutable_data();
  for (std::size_t b = 0; b < flows.size(); ++b) {
    const auto& f = flows[b];
    if (f.height != h || f.width != w) throw ShapeError("flows_to_tensor: flow extents differ");
    std::copy(f.du.begin(), f.du.end(), o.begin() + static_cast<std::ptrdiff_t>(b * 2 * h * w));
    std::copy(f.dv.begin(), f.dv.end(), o.begin() + static_cast<std::ptrdiff_t>((b * 2 + 1) * h * w));
  }
  return t;
}

std::vector<FlowMap> flows_from_tensor(const Tensor& t) {
  if (t.rank() != 4 || t.dim(1) != 2) throw ShapeError("flows_from_tensor: expected (L,2,H,W), got " + shape_str(t.shape()));
  std::vector<FlowMap> out;
  for (std::int64_t b = 0; b < t.dim(0); ++b) out.push_back(FlowMap::from_tensor(reshape(slice(t, 0, b, 1), {2, t.dim(2), t.dim(3)})));
  return out;
}

void DatasetManifest::validate() const {
  degradation.validate();
  if (count < 0) throw Error("manifest: count must be >= 0");
  if (burst < 1) throw Error("manifest: L must be >= 1");
  if (height < 1 || width < 1) throw Error("manifest: extents must be >= 1");
  if (height % 2 || width % 2)
    throw Error("even extents required, got " + std::to_string(height) + "x" + std::to_string(width));
  if (!(frequency >= 0)) throw Error("manifest: frequency must be >= 0");
}

std::string DatasetManifest::to_json() const {
  json j = {{"seed", seed},
            {"count", count},
            {"H", height},
            {"W", width},
            {"L", burst},
            {"frequency", frequency},
            {"degradation",
             {{"scale", degradation.scale},
              {"shift_max", degradation.shift_max},
              {"noise_sigma", degradation.noise_sigma},
              {"mosaic", degradation.mosaic},
              {"downsample", degradation.downsample == Downsample::box ? "box" : "bicubic"}}}};
  return j.dump(2) + "\n";
}

DatasetManifest DatasetManifest::from_json(const std::string& text) {
  DatasetManifest m;
  try {
    const auto j = json::parse(text);
    m.seed = j.at("seed").get<std::uint64_t>();
    m.count = j.at("count").get<std::int64_t>();
    m.height = j.at("H").get<std::int64_t>();
    m.width = j.at("W").get<std::int64_t>();
    m.burst = j.at("L").get<std::int64_t>();
    m.frequency = j.value("frequency", 1.0);
    if (j.contains("degradation")) {
      const auto& d = j["degradation"];
      m.degradation.scale = d.value("scale", std::int64_t{4});
      m.degradation.shift_max = d.value("shift_max", 3.0);
      m.degradation.noise_sigma = d.value("noise_sigma", 0.0);
      m.degradation.mosaic = d.value("mosaic", false);
      const auto ds = d.value("downsample", std::string("box"));
      if (ds != "box" && ds != "bicubic") throw Error("manifest: downsample must be box or bicubic");
      m.degradation.downsample = ds == "box" ? Downsample::box : Downsample::bicubic;
    }
  } catch (const json::parse_error& e) {
    throw ParseError("manifest: " + std::string(e.what()), e.byte);
  } catch (const json::exception& e) {
    throw Error("manifest: " + std::string(e.what()));
  }
  m.validate();
  return m;
}

BurstSample make_sample(const DatasetManifest& m, std::int64_t index) {
  m.validate();
  if (index < 0 || index >= m.count) throw Error("sample index " + std::to_string(index) + " out of range");
  const auto i = static_cast<std::uint64_t>(index);
  const auto hr_seed = Rng::indexed(m.seed, "hr", i).next_u64();
  const auto burst_seed = Rng::indexed(m.seed, "burst", i).next_u64();
  return synthesize_burst(generate_hr(hr_seed, m.height, m.width, m.frequency), m.burst, m.degradation, burst_seed);
}

std::string sample_stem(std::int64_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "sample_%04lld", static_cast<long long>(index));
  return buf;
}

void write_dataset(const DatasetManifest& m, const std::filesystem::path& dir) {
  m.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
  const auto text = m.to_json();
  write_file_bytes(dir / "manifest.json", std::vector<std::uint8_t>(text.begin(), text.end()));
  for (std::int64_t i = 0; i < m.count; ++i) {
    const auto s = make_sample(m, i);
    const auto stem = sample_stem(i);
    save_tensor(s.lr_burst, dir / (stem + "_lr.nt"));
    save_tensor(s.hr_target, dir / (stem + "_hr.nt"));
    save_tensor(flows_to_tensor(s.flows), dir / (stem + "_flows.nt"));
    json meta = {{"seed", s.seed}, {"shifts", s.shifts}};
    const auto mt = meta.dump(2) + "\n";
    write_file_bytes(dir / (stem + ".json"), std::vector<std::uint8_t>(mt.begin(), mt.end()));
    write_ppm(reshape(slice(s.lr_burst, 0, 0, 1), {s.lr_burst.dim(1), m.height, m.width}), dir / (stem + "_key.ppm"));
    write_ppm(s.hr_target, dir / (stem + "_hr.ppm"));
  }
}

Dataset Dataset::open(const std::filesystem::path& dir) {
  const auto bytes = read_file_bytes(dir / "manifest.json");
  return {DatasetManifest::from_json(std::string(bytes.begin(), bytes.end())), dir};
}

BurstSample Dataset::load(std::int64_t index) const {
  if (index < 0 || index >= manifest.count) throw Error("sample index " + std::to_string(index) + " out of range");
  const auto stem = sample_stem(index);
  BurstSample s;
  s.lr_burst = load_tensor(dir / (stem + "_lr.nt"));
  s.hr_target = load_tensor(dir / (stem + "_hr.nt"));
  s.flows = flows_from_tensor(load_tensor(dir / (stem + "_flows.nt")));
  const auto mb = read_file_bytes(dir / (stem + ".json"));
  try {
    const auto meta = json::parse(mb.begin(), mb.end());
    s.seed = meta.at("seed").get<std::uint64_t>();
    s.shifts = meta.at("shifts").get<std::vector<std::array<double, 2>>>();
  } catch (const json::exception& e) {
    throw Error(stem + ".json: " + e.what());
  }
  if (s.lr_burst.rank() != 4 || s.lr_burst.dim(0) != manifest.burst || s.lr_burst.dim(2) != manifest.height ||
      s.lr_burst.dim(3) != manifest.width)
    throw ShapeError(stem + ": burst " + shape_str(s.lr_burst.shape()) + " does not match the manifest");
  if (static_cast<std::int64_t>(s.flows.size()) != s.lr_burst.dim(0))
    throw ShapeError(stem + ": flow count does not match the burst");
  return s;
}

}  // namespace burstmamba

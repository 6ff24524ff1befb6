#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "burstmamba/serialization.hpp"
#include "burstmamba/tensor.hpp"

namespace burstmamba {

/// Procedural HR image (3, 4H, 4W) in [0, 1]: oriented sinusoids, checkerboards
/// and smooth blobs. `frequency` scales every spatial frequency and the detail
/// amplitude up to 1; 0 gives the flat image 0.5.
Tensor generate_hr(std::uint64_t seed, std::int64_t lr_height, std::int64_t lr_width, double frequency = 1.0);

enum class Downsample { box, bicubic };

struct DegradationConfig {
  std::int64_t scale = 4;
  double shift_max = 3.0;    // HR pixels
  double noise_sigma = 0.0;  // on the [0, 1] scale
  bool mosaic = false;
  Downsample downsample = Downsample::box;

  void validate() const;
};

struct BurstSample {
  Tensor lr_burst;   // (L, 3 or 1, H, W)
  Tensor hr_target;  // (3, 4H, 4W)
  std::vector<FlowMap> flows;                    // keyframe first, zero
  std::vector<std::array<double, 2>> shifts;     // (dx, dy) per frame, HR pixels
  std::uint64_t seed = 0;
};

/// Translates the HR image by each frame's shift, downsamples, adds noise and
/// optionally mosaics. Frame b holds hr(x + dx_b, y + dy_b), so its flow is the
/// constant (dx_b / 4, dy_b / 4). The first frame is never shifted.
BurstSample synthesize_burst(const Tensor& hr, std::int64_t frames, const DegradationConfig& cfg, std::uint64_t seed);

/// Same with explicit per-frame HR shifts (first entry must be (0, 0)).
BurstSample synthesize_burst(const Tensor& hr, const std::vector<std::array<double, 2>>& shifts,
                             const DegradationConfig& cfg, std::uint64_t seed);

/// Bilinear translation with edge clamping: out(y, x) = img(y + dy, x + dx).
Tensor translate_bilinear(const Tensor& img, double dx, double dy);
/// (C, sH, sW) -> (C, H, W) box average or Keys-cubic antialiased resampling.
Tensor downsample(const Tensor& img, std::int64_t scale, Downsample mode = Downsample::box);

/// (3, H, W) -> (1, H, W) with R at (even, even), G at (even, odd) and (odd, even), B at (odd, odd).
Tensor mosaic_rggb(const Tensor& rgb);

// Binary 8-bit PPM (P6) for (3, H, W) or PGM (P5) for (1, H, W). Values are clamped to [0, 1].
void write_ppm(const Tensor& img, const std::filesystem::path& path);
Tensor read_ppm(const std::filesystem::path& path);

/// Flow maps as one (L, 2, H, W) tensor, du then dv.
Tensor flows_to_tensor(const std::vector<FlowMap>& flows);
std::vector<FlowMap> flows_from_tensor(const Tensor& t);

struct DatasetManifest {
  std::uint64_t seed = 0;
  std::int64_t count = 0;
  std::int64_t height = 0, width = 0;  // LR extents
  std::int64_t burst = 8;
  DegradationConfig degradation;
  double frequency = 1.0;

  void validate() const;
  std::string to_json() const;
  static DatasetManifest from_json(const std::string& text);
};

/// Sample `index` of a manifest, derived from (seed, index) only.
BurstSample make_sample(const DatasetManifest& m, std::int64_t index);

/// Writes manifest.json plus per sample: lr/hr/flows ".nt" tensors and PPM previews.
void write_dataset(const DatasetManifest& m, const std::filesystem::path& dir);

struct Dataset {
  DatasetManifest manifest;
  std::filesystem::path dir;

  static Dataset open(const std::filesystem::path& dir);
  std::int64_t size() const { return manifest.count; }
  BurstSample load(std::int64_t index) const;
};

std::string sample_stem(std::int64_t index);

}  // namespace burstmamba

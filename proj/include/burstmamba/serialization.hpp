#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "burstmamba/ops.hpp"
#include "burstmamba/tensor.hpp"

namespace burstmamba {

enum class ScanOrder { row_fwd, row_bwd, col_fwd, col_bwd, time_fwd, time_bwd };

const char* scan_order_name(ScanOrder order);
bool is_spatial(ScanOrder order);

/// Sequence position k reads grid cell perm[k] (flattened y * W + x).
Index scan_permutation(ScanOrder order, std::int64_t height, std::int64_t width);

/// (C, H, W) -> (C, H*W) in the given spatial order.
template <class T>
BasicTensor<T> serialize_2d(const BasicTensor<T>& f, ScanOrder order);
/// Inverse of serialize_2d.
template <class T>
BasicTensor<T> deserialize_2d(const BasicTensor<T>& seq, ScanOrder order, std::int64_t height,
                              std::int64_t width);

/// (L, C, H, W) -> (H*W, L, C): one length-L sequence per pixel, reversed for time_bwd.
template <class T>
BasicTensor<T> serialize_temporal(const BasicTensor<T>& f, ScanOrder order);

/// Element-wise sum of equally shaped paths.
template <class T>
BasicTensor<T> merge_paths(const std::vector<BasicTensor<T>>& paths);

/// Per-pixel displacement toward the keyframe, in LR pixels: a pixel (x, y) of
/// the keyframe is found at (x - du, y - dv) in this frame.
struct FlowMap {
  std::int64_t height = 0, width = 0;
  std::vector<float> du, dv;

  static FlowMap zeros(std::int64_t height, std::int64_t width);
  static FlowMap constant(std::int64_t height, std::int64_t width, float du, float dv);
  /// From a (2, H, W) tensor: channel 0 = du, channel 1 = dv.
  static FlowMap from_tensor(const Tensor& t);
  Tensor to_tensor() const;
  bool is_zero() const;
};

void save_flow(const FlowMap& flow, const std::filesystem::path& path);
FlowMap load_flow(const std::filesystem::path& path);

/// Four neighbours of a real coordinate. x1 = floor(x), x2 = x1 + 1 (likewise y),
/// before clamping. w[0..3] weight (x1,y1), (x2,y1), (x1,y2), (x2,y2).
struct BilinearTap {
  std::int64_t x1, y1;
  std::array<double, 4> w;

  std::int64_t x2() const { return x1 + 1; }
  std::int64_t y2() const { return y1 + 1; }
  /// Flattened y * W + x of neighbour k after clamping into the grid.
  std::int64_t index(int k, std::int64_t height, std::int64_t width) const;
};

/// Weights are products of (1 - frac, frac) pairs; for coordinates representable
/// as 32-bit floats every weight is exact in double, so they sum to exactly 1.
BilinearTap bilinear_tap(double x, double y, std::int64_t height, std::int64_t width);

/// Sampling instructions for flow-compensated per-pixel sequences.
struct OfsPlan {
  std::int64_t frames = 0, height = 0, width = 0, keyframe = 0;
  // taps[b * H * W + p]: clamped flat source indices and weights into frame b
  struct Tap {
    std::array<std::int64_t, 4> idx;
    std::array<double, 4> w;
  };
  std::vector<Tap> taps;

  const Tap& tap(std::int64_t frame, std::int64_t pixel) const {
    return taps[static_cast<std::size_t>(frame * height * width + pixel)];
  }
};

/// One flow per frame, all toward `keyframe`; the keyframe's flow must be zero.
OfsPlan make_ofs_plan(const std::vector<FlowMap>& flows, std::int64_t keyframe);
/// Plan of a burst whose frames are all aligned with the keyframe.
OfsPlan identity_ofs_plan(std::int64_t frames, std::int64_t height, std::int64_t width,
                          std::int64_t keyframe = 0);

/// (L, C, H, W) -> (H*W, L, C); entry (p, b, c) samples frame b at the
/// flow-compensated position of keyframe pixel p. Differentiable in f.
template <class T>
BasicTensor<T> ofs_serialize(const BasicTensor<T>& f, std::shared_ptr<const OfsPlan> plan);

/// Adjoint of ofs_serialize: (H*W, L, C) -> (L, C, H, W). Differentiable.
template <class T>
BasicTensor<T> ofs_scatter(const BasicTensor<T>& seq, std::shared_ptr<const OfsPlan> plan);

/// Reverses a (S, L, C) sequence batch along L (used for backward temporal paths).
template <class T>
BasicTensor<T> reverse_time(const BasicTensor<T>& seq);

}  // namespace burstmamba

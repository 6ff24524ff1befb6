#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "burstmamba/rng.hpp"
#include "burstmamba/serialization.hpp"
#include "burstmamba/ssm.hpp"
#include "burstmamba/tensor.hpp"
#include "burstmamba/wavelet.hpp"

namespace burstmamba {

template <class T>
struct NamedTensor {
  std::string name;
  BasicTensor<T>* tensor;
};

template <class T>
using ParamList = std::vector<NamedTensor<T>>;

/// Squeeze-excitation style channel gate: f * sigmoid(W2 silu(W1 mean_hw(f) + b1) + b2).
template <class T>
struct BasicChannelAttention {
  BasicTensor<T> w1, b1;  // (C/r, C), (C/r)
  BasicTensor<T> w2, b2;  // (C, C/r), (C)

  static BasicChannelAttention init(std::int64_t channels, std::int64_t ratio, Rng& rng);
  void collect(const std::string& prefix, ParamList<T>& out);
  template <class U> BasicChannelAttention<U> cast() const {
    return {w1.template cast<U>(), b1.template cast<U>(), w2.template cast<U>(), b2.template cast<U>()};
  }
};

using ChannelAttention = BasicChannelAttention<float>;

template <class T>
BasicTensor<T> channel_attention(const BasicTensor<T>& f, const BasicChannelAttention<T>& ca);

inline constexpr std::array<ScanOrder, 4> kSpatialOrders = {ScanOrder::row_fwd, ScanOrder::row_bwd,
                                                           ScanOrder::col_fwd, ScanOrder::col_bwd};

/// Keyframe spatial block on (C, H, W).
template <class T>
struct BasicSpatialBlock {
  BasicTensor<T> norm_g, norm_b;    // (C)
  BasicTensor<T> in_w, in_b;        // (C, C), (C)
  std::array<BasicSsmParams<T>, 4> paths;  // one per kSpatialOrders entry
  BasicTensor<T> out_w, out_b;      // (C, C), (C)
  BasicChannelAttention<T> ca;
  BasicTensor<T> gain;              // (C) residual gain

  static BasicSpatialBlock init(std::int64_t channels, std::int64_t state_dim, std::int64_t ratio,
                                bool use_skip, Rng& rng);
  void collect(const std::string& prefix, ParamList<T>& out);
  void clamp_a();
  template <class U> BasicSpatialBlock<U> cast() const;
};

using SpatialBlock = BasicSpatialBlock<float>;

/// Residual branch of the spatial block before the gain (C, H, W).
template <class T>
BasicTensor<T> spatial_branch(const BasicTensor<T>& f, const BasicSpatialBlock<T>& blk);

/// f + gain * spatial_branch(f).
template <class T>
BasicTensor<T> spatial_block_forward(const BasicTensor<T>& f, const BasicSpatialBlock<T>& blk);

/// Burst block on (L, C, H, W): OFS sequences scanned in both directions with
/// wavelet-driven parameters, scattered back, then two 3x3 convs per frame.
template <class T>
struct BasicTemporalBlock {
  struct Direction {
    BasicPsiHead<T> head;
    BasicTensor<T> a_diag;  // (N)
    BasicTensor<T> d_skip;  // (C)
  };
  bool use_skip = true;
  BasicTensor<T> norm_g, norm_b;        // (C)
  Direction fwd, bwd;
  BasicTensor<T> conv1_w, conv1_b;      // (C, C, 3, 3), (C)
  BasicTensor<T> conv2_w, conv2_b;
  BasicTensor<T> gain;                  // (C)

  static BasicTemporalBlock init(std::int64_t channels, std::int64_t state_dim, std::int64_t d_psi,
                                 std::int64_t step_groups, bool use_skip, Rng& rng);
  void collect(const std::string& prefix, ParamList<T>& out);
  void clamp_a();
  template <class U> BasicTemporalBlock<U> cast() const;
};

using TemporalBlock = BasicTemporalBlock<float>;

template <class T>
struct TemporalOutput {
  BasicTensor<T> features;  // f + delta, (L, C, H, W)
  BasicTensor<T> delta;     // gain * branch, (L, C, H, W)
};

template <class T>
TemporalOutput<T> temporal_block_forward(const BasicTensor<T>& f, const std::shared_ptr<const OfsPlan>& plan,
                                         const BasicTemporalBlock<T>& blk);

/// Two (3x3 conv C -> 4C, pixel shuffle x2) stages, then a 3x3 conv to 3 channels.
template <class T>
struct BasicUpsampler {
  BasicTensor<T> up1_w, up1_b;  // (4C, C, 3, 3)
  BasicTensor<T> up2_w, up2_b;
  BasicTensor<T> out_w, out_b;  // (3, C, 3, 3)

  static BasicUpsampler init(std::int64_t channels, Rng& rng);
  void collect(const std::string& prefix, ParamList<T>& out);
  template <class U> BasicUpsampler<U> cast() const {
    return {up1_w.template cast<U>(), up1_b.template cast<U>(), up2_w.template cast<U>(),
            up2_b.template cast<U>(), out_w.template cast<U>(), out_b.template cast<U>()};
  }
};

using Upsampler = BasicUpsampler<float>;

/// (C, H, W) -> (3, 4H, 4W)
template <class T>
BasicTensor<T> upsample_x4(const BasicTensor<T>& f, const BasicUpsampler<T>& up);

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights.
template <class T>
BasicTensor<T> init_uniform(Rng& rng, Shape shape, double bound);

template <class T>
template <class U>
BasicSpatialBlock<U> BasicSpatialBlock<T>::cast() const {
  BasicSpatialBlock<U> o;
  o.norm_g = norm_g.template cast<U>();
  o.norm_b = norm_b.template cast<U>();
  o.in_w = in_w.template cast<U>();
  o.in_b = in_b.template cast<U>();
  for (std::size_t k = 0; k < paths.size(); ++k) o.paths[k] = paths[k].template cast<U>();
  o.out_w = out_w.template cast<U>();
  o.out_b = out_b.template cast<U>();
  o.ca = ca.template cast<U>();
  o.gain = gain.template cast<U>();
  return o;
}

template <class T>
template <class U>
BasicTemporalBlock<U> BasicTemporalBlock<T>::cast() const {
  BasicTemporalBlock<U> o;
  o.use_skip = use_skip;
  o.norm_g = norm_g.template cast<U>();
  o.norm_b = norm_b.template cast<U>();
  o.fwd = {fwd.head.template cast<U>(), fwd.a_diag.template cast<U>(), fwd.d_skip.template cast<U>()};
  o.bwd = {bwd.head.template cast<U>(), bwd.a_diag.template cast<U>(), bwd.d_skip.template cast<U>()};
  o.conv1_w = conv1_w.template cast<U>();
  o.conv1_b = conv1_b.template cast<U>();
  o.conv2_w = conv2_w.template cast<U>();
  o.conv2_b = conv2_b.template cast<U>();
  o.gain = gain.template cast<U>();
  return o;
}

}  // namespace burstmamba

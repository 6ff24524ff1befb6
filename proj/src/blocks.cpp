#include "burstmamba/blocks.hpp"

#include <algorithm>
#include <cmath>

#include "burstmamba/ops.hpp"

namespace burstmamba {

namespace {

template <class T>
void push(ParamList<T>& out, const std::string& prefix, const char* name, BasicTensor<T>& t) {
  out.push_back({prefix + "." + name, &t});
}

// (C) -> (C, 1, 1) so it broadcasts over a (.., C, H, W) map
template <class T>
BasicTensor<T> per_channel(const BasicTensor<T>& v) {
  return reshape(v, {v.dim(0), 1, 1});
}

template <class T>
void check_conv3(const BasicTensor<T>& f, const char* who, std::int64_t channels) {
  const auto r = static_cast<std::int64_t>(f.rank());
  if (r < 3 || f.dim(r - 3) != channels)
    throw ShapeError(std::string(who) + ": expected " + std::to_string(channels) + " channels, got " +
                     shape_str(f.shape()));
}

}  // namespace

template <class T>
BasicTensor<T> init_uniform(Rng& rng, Shape shape, double bound) {
  std::vector<T> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& e : v) e = static_cast<T>(rng.uniform(-bound, bound));
  return BasicTensor<T>(std::move(shape), std::move(v));
}

template <class T>
BasicChannelAttention<T> BasicChannelAttention<T>::init(std::int64_t channels, std::int64_t ratio, Rng& rng) {
  if (ratio < 1 || channels % ratio)
    throw Error("channel attention: channels " + std::to_string(channels) + " not divisible by ratio " +
                std::to_string(ratio));
  const auto squeeze = channels / ratio;
  BasicChannelAttention ca;
  ca.w1 = init_uniform<T>(rng, {squeeze, channels}, 1.0 / std::sqrt(double(channels)));
  ca.b1 = BasicTensor<T>::zeros({squeeze});
  ca.w2 = init_uniform<T>(rng, {channels, squeeze}, 1.0 / std::sqrt(double(squeeze)));
  ca.b2 = BasicTensor<T>::zeros({channels});
  return ca;
}

template <class T>
void BasicChannelAttention<T>::collect(const std::string& prefix, ParamList<T>& out) {
  push(out, prefix, "w1", w1);
  push(out, prefix, "b1", b1);
  push(out, prefix, "w2", w2);
  push(out, prefix, "b2", b2);
}

template <class T>
BasicTensor<T> channel_attention(const BasicTensor<T>& f, const BasicChannelAttention<T>& ca) {
  if (f.rank() != 3) throw ShapeError("channel_attention: expected (C,H,W), got " + shape_str(f.shape()));
  const auto c = f.dim(0);
  if (ca.w1.rank() != 2 || ca.w1.dim(1) != c || ca.w2.dim(0) != c)
    throw ShapeError("channel_attention: weights do not match " + std::to_string(c) + " channels");
  if (c % ca.w1.dim(0))
    throw Error("channel_attention: channels " + std::to_string(c) + " not divisible by squeeze width " +
                std::to_string(ca.w1.dim(0)));
  auto pooled = mean_axis(reshape(f, {c, f.dim(1) * f.dim(2)}), 1);
  auto s = sigmoid(linear(silu(linear(pooled, ca.w1, ca.b1)), ca.w2, ca.b2));
  return mul(f, per_channel(s));
}

template <class T>
BasicSpatialBlock<T> BasicSpatialBlock<T>::init(std::int64_t channels, std::int64_t state_dim, std::int64_t ratio,
                                                bool use_skip, Rng& rng) {
  BasicSpatialBlock b;
  const double bound = 1.0 / std::sqrt(double(channels));
  b.norm_g = BasicTensor<T>::ones({channels});
  b.norm_b = BasicTensor<T>::zeros({channels});
  b.in_w = init_uniform<T>(rng, {channels, channels}, bound);
  b.in_b = BasicTensor<T>::zeros({channels});
  for (auto& p : b.paths) {
    p = BasicSsmParams<T>::init(channels, state_dim, rng, ScanMode::selective);
    p.use_skip = use_skip;
  }
  b.out_w = init_uniform<T>(rng, {channels, channels}, bound);
  b.out_b = BasicTensor<T>::zeros({channels});
  b.ca = BasicChannelAttention<T>::init(channels, ratio, rng);
  b.gain = BasicTensor<T>::ones({channels});
  return b;
}

template <class T>
void BasicSpatialBlock<T>::collect(const std::string& prefix, ParamList<T>& out) {
  push(out, prefix, "norm_g", norm_g);
  push(out, prefix, "norm_b", norm_b);
  push(out, prefix, "in_w", in_w);
  push(out, prefix, "in_b", in_b);
  for (std::size_t k = 0; k < paths.size(); ++k) {
    const auto names = BasicSsmParams<T>::tensor_names();
    const auto ts = paths[k].tensors();
    const auto pre = prefix + "." + scan_order_name(kSpatialOrders[k]);
    for (std::size_t i = 0; i < ts.size(); ++i) push(out, pre, names[i], *ts[i]);
  }
  push(out, prefix, "out_w", out_w);
  push(out, prefix, "out_b", out_b);
  ca.collect(prefix + ".ca", out);
  push(out, prefix, "gain", gain);
}

template <class T>
void BasicSpatialBlock<T>::clamp_a() {
  for (auto& p : paths) p.clamp_a();
}

template <class T>
BasicTensor<T> spatial_branch(const BasicTensor<T>& f, const BasicSpatialBlock<T>& blk) {
  if (f.rank() != 3) throw ShapeError("spatial block: expected (C,H,W), got " + shape_str(f.shape()));
  const auto c = f.dim(0), h = f.dim(1), w = f.dim(2);
  if (h * w < 1) throw ShapeError("spatial block: empty feature map");
  check_conv3(f, "spatial block", blk.norm_g.dim(0));
  auto tokens = transpose(reshape(f, {c, h * w}), {1, 0});  // (HW, C)
  auto u = linear(layer_norm(tokens, blk.norm_g, blk.norm_b), blk.in_w, blk.in_b);
  std::vector<BasicTensor<T>> outs;
  for (std::size_t k = 0; k < kSpatialOrders.size(); ++k) {
    const auto perm = scan_permutation(kSpatialOrders[k], h, w);
    auto y = selective_scan(gather(u, 0, perm), blk.paths[k]);
    outs.push_back(scatter_add(y, 0, perm, h * w));
  }
  auto g = linear(merge_paths(outs), blk.out_w, blk.out_b);
  return channel_attention(reshape(transpose(g, {1, 0}), {c, h, w}), blk.ca);
}

template <class T>
BasicTensor<T> spatial_block_forward(const BasicTensor<T>& f, const BasicSpatialBlock<T>& blk) {
  return add(f, mul(per_channel(blk.gain), spatial_branch(f, blk)));
}

template <class T>
BasicTemporalBlock<T> BasicTemporalBlock<T>::init(std::int64_t channels, std::int64_t state_dim, std::int64_t d_psi,
                                                  std::int64_t step_groups, bool use_skip, Rng& rng) {
  BasicTemporalBlock b;
  b.use_skip = use_skip;
  b.norm_g = BasicTensor<T>::ones({channels});
  b.norm_b = BasicTensor<T>::zeros({channels});
  for (auto* d : {&b.fwd, &b.bwd}) {
    d->head = BasicPsiHead<T>::init(channels, state_dim, d_psi, step_groups, rng);
    std::vector<T> a(static_cast<std::size_t>(state_dim));
    for (std::int64_t n = 0; n < state_dim; ++n) a[n] = static_cast<T>(-(n + 1));
    d->a_diag = BasicTensor<T>({state_dim}, std::move(a));
    d->d_skip = BasicTensor<T>::ones({channels});
  }
  const double bound = 1.0 / std::sqrt(9.0 * double(channels));
  b.conv1_w = init_uniform<T>(rng, {channels, channels, 3, 3}, bound);
  b.conv1_b = BasicTensor<T>::zeros({channels});
  b.conv2_w = init_uniform<T>(rng, {channels, channels, 3, 3}, bound);
  b.conv2_b = BasicTensor<T>::zeros({channels});
  // small start so the burst path is a gentle correction of the keyframe stream
  b.gain = BasicTensor<T>({channels}, T(0.1));
  return b;
}

template <class T>
void BasicTemporalBlock<T>::collect(const std::string& prefix, ParamList<T>& out) {
  push(out, prefix, "norm_g", norm_g);
  push(out, prefix, "norm_b", norm_b);
  for (auto [d, name] : {std::pair{&fwd, "fwd"}, std::pair{&bwd, "bwd"}}) {
    const auto pre = prefix + "." + name;
    const auto names = BasicPsiHead<T>::tensor_names();
    const auto ts = d->head.tensors();
    for (std::size_t i = 0; i < ts.size(); ++i) push(out, pre + ".psi", names[i], *ts[i]);
    push(out, pre, "a_diag", d->a_diag);
    push(out, pre, "d_skip", d->d_skip);
  }
  push(out, prefix, "conv1_w", conv1_w);
  push(out, prefix, "conv1_b", conv1_b);
  push(out, prefix, "conv2_w", conv2_w);
  push(out, prefix, "conv2_b", conv2_b);
  push(out, prefix, "gain", gain);
}

template <class T>
void BasicTemporalBlock<T>::clamp_a() {
  for (auto* d : {&fwd, &bwd})
    for (auto& a : d->a_diag.mutable_data()) a = std::min(a, static_cast<T>(kMaxStableA));
}

template <class T>
TemporalOutput<T> temporal_block_forward(const BasicTensor<T>& f, const std::shared_ptr<const OfsPlan>& plan,
                                         const BasicTemporalBlock<T>& blk) {
  if (f.rank() != 4) throw ShapeError("temporal block: expected (L,C,H,W), got " + shape_str(f.shape()));
  if (f.dim(0) < 1) throw ShapeError("temporal block: empty burst");
  if (!plan) throw Error("temporal block: missing flow plan");
  if (plan->frames != f.dim(0))
    throw Error("temporal block: " + std::to_string(plan->frames) + " flows for " + std::to_string(f.dim(0)) +
                " frames");
  check_conv3(f, "temporal block", blk.norm_g.dim(0));

  auto u = layer_norm(ofs_serialize(f, plan), blk.norm_g, blk.norm_b);  // (HW, L, C)
  auto scan = [&](const typename BasicTemporalBlock<T>::Direction& d, bool reverse) {
    BasicSsmParams<T> p;
    p.use_skip = blk.use_skip;
    p.a_diag = d.a_diag;
    p.d_skip = d.d_skip;
    return psi_selective_scan(u, f, d.head, p, plan, reverse);
  };
  auto merged = merge_paths<T>({scan(blk.fwd, false), scan(blk.bwd, true)});
  auto back = ofs_scatter(merged, plan);  // (L, C, H, W)
  auto z = conv3x3_replicate(silu(conv3x3_replicate(back, blk.conv1_w, blk.conv1_b)), blk.conv2_w, blk.conv2_b);
  auto delta = mul(per_channel(blk.gain), z);
  return {add(f, delta), delta};
}

template <class T>
BasicUpsampler<T> BasicUpsampler<T>::init(std::int64_t channels, Rng& rng) {
  BasicUpsampler u;
  const double bound = 1.0 / std::sqrt(9.0 * double(channels));
  u.up1_w = init_uniform<T>(rng, {4 * channels, channels, 3, 3}, bound);
  u.up1_b = BasicTensor<T>::zeros({4 * channels});
  u.up2_w = init_uniform<T>(rng, {4 * channels, channels, 3, 3}, bound);
  u.up2_b = BasicTensor<T>::zeros({4 * channels});
  u.out_w = init_uniform<T>(rng, {3, channels, 3, 3}, bound);
  u.out_b = BasicTensor<T>::zeros({3});
  return u;
}

template <class T>
void BasicUpsampler<T>::collect(const std::string& prefix, ParamList<T>& out) {
  push(out, prefix, "up1_w", up1_w);
  push(out, prefix, "up1_b", up1_b);
  push(out, prefix, "up2_w", up2_w);
  push(out, prefix, "up2_b", up2_b);
  push(out, prefix, "out_w", out_w);
  push(out, prefix, "out_b", out_b);
}

template <class T>
BasicTensor<T> upsample_x4(const BasicTensor<T>& f, const BasicUpsampler<T>& up) {
  if (f.rank() != 3) throw ShapeError("upsample_x4: expected (C,H,W), got " + shape_str(f.shape()));
  check_conv3(f, "upsample_x4", up.up1_w.dim(1));
  auto x = pixel_shuffle(conv3x3_replicate(f, up.up1_w, up.up1_b), 2);
  x = pixel_shuffle(conv3x3_replicate(x, up.up2_w, up.up2_b), 2);
  return conv3x3_replicate(x, up.out_w, up.out_b);
}

#define BM_INSTANTIATE_BLOCKS(T)                                                                       \
  template BasicTensor<T> init_uniform<T>(Rng&, Shape, double);                                        \
  template struct BasicChannelAttention<T>;                                                            \
  template BasicTensor<T> channel_attention(const BasicTensor<T>&, const BasicChannelAttention<T>&);   \
  template struct BasicSpatialBlock<T>;                                                                \
  template BasicTensor<T> spatial_branch(const BasicTensor<T>&, const BasicSpatialBlock<T>&);          \
  template BasicTensor<T> spatial_block_forward(const BasicTensor<T>&, const BasicSpatialBlock<T>&);   \
  template struct BasicTemporalBlock<T>;                                                               \
  template TemporalOutput<T> temporal_block_forward(const BasicTensor<T>&,                             \
                                                    const std::shared_ptr<const OfsPlan>&,             \
                                                    const BasicTemporalBlock<T>&);                     \
  template struct BasicUpsampler<T>;                                                                   \
  template BasicTensor<T> upsample_x4(const BasicTensor<T>&, const BasicUpsampler<T>&);

BM_INSTANTIATE_BLOCKS(float)
BM_INSTANTIATE_BLOCKS(double)

}  // namespace burstmamba

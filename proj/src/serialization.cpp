#include "burstmamba/serialization.hpp"

#include <algorithm>
#include <cmath>

#include "burstmamba/tensor_io.hpp"

namespace burstmamba {

using autograd::make_result;
using autograd::Node;

const char* scan_order_name(ScanOrder order) {
  switch (order) {
    case ScanOrder::row_fwd: return "row_fwd";
    case ScanOrder::row_bwd: return "row_bwd";
    case ScanOrder::col_fwd: return "col_fwd";
    case ScanOrder::col_bwd: return "col_bwd";
    case ScanOrder::time_fwd: return "time_fwd";
    case ScanOrder::time_bwd: return "time_bwd";
  }
  return "?";
}

bool is_spatial(ScanOrder order) {
  return order != ScanOrder::time_fwd && order != ScanOrder::time_bwd;
}

Index scan_permutation(ScanOrder order, std::int64_t height, std::int64_t width) {
  if (!is_spatial(order))
    throw Error(std::string("scan_permutation: ") + scan_order_name(order) + " is not a spatial order");
  Index perm;
  perm.reserve(static_cast<std::size_t>(height * width));
  if (order == ScanOrder::row_fwd || order == ScanOrder::row_bwd) {
    for (std::int64_t y = 0; y < height; ++y)
      for (std::int64_t x = 0; x < width; ++x) perm.push_back(y * width + x);
  } else {
    for (std::int64_t x = 0; x < width; ++x)
      for (std::int64_t y = 0; y < height; ++y) perm.push_back(y * width + x);
  }
  if (order == ScanOrder::row_bwd || order == ScanOrder::col_bwd) std::reverse(perm.begin(), perm.end());
  return perm;
}

template <class T>
BasicTensor<T> serialize_2d(const BasicTensor<T>& f, ScanOrder order) {
  if (f.rank() != 3) throw ShapeError("serialize_2d: expected (C,H,W), got " + shape_str(f.shape()));
  const auto c = f.dim(0), h = f.dim(1), w = f.dim(2);
  const auto perm = scan_permutation(order, h, w);
  return gather(reshape(f, {c, h * w}), 1, perm);
}

template <class T>
BasicTensor<T> deserialize_2d(const BasicTensor<T>& seq, ScanOrder order, std::int64_t height,
                              std::int64_t width) {
  if (seq.rank() != 2 || seq.dim(1) != height * width)
    throw ShapeError("deserialize_2d: expected (C," + std::to_string(height * width) + "), got " +
                     shape_str(seq.shape()));
  const auto perm = scan_permutation(order, height, width);
  return reshape(scatter_add(seq, 1, perm, height * width), {seq.dim(0), height, width});
}

template <class T>
BasicTensor<T> reverse_time(const BasicTensor<T>& seq) {
  if (seq.rank() != 3) throw ShapeError("reverse_time: expected (S,L,C), got " + shape_str(seq.shape()));
  Index idx(static_cast<std::size_t>(seq.dim(1)));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<std::int64_t>(idx.size() - 1 - i);
  return gather(seq, 1, idx);
}

template <class T>
BasicTensor<T> serialize_temporal(const BasicTensor<T>& f, ScanOrder order) {
  if (is_spatial(order))
    throw Error(std::string("serialize_temporal: ") + scan_order_name(order) + " is not a temporal order");
  if (f.rank() != 4) throw ShapeError("serialize_temporal: expected (L,C,H,W), got " + shape_str(f.shape()));
  const auto l = f.dim(0), c = f.dim(1), hw = f.dim(2) * f.dim(3);
  auto seq = transpose(reshape(f, {l, c, hw}), {2, 0, 1});
  return order == ScanOrder::time_bwd ? reverse_time(seq) : seq;
}

template <class T>
BasicTensor<T> merge_paths(const std::vector<BasicTensor<T>>& paths) {
  if (paths.empty()) throw Error("merge_paths: no paths");
  BasicTensor<T> out = paths[0];
  for (std::size_t i = 1; i < paths.size(); ++i) {
    if (paths[i].shape() != out.shape())
      throw ShapeError("merge_paths: shape mismatch " + shape_str(out.shape()) + " vs " +
                       shape_str(paths[i].shape()));
    out = add(out, paths[i]);
  }
  return out;
}

FlowMap FlowMap::zeros(std::int64_t height, std::int64_t width) { return constant(height, width, 0.0f, 0.0f); }

FlowMap FlowMap::constant(std::int64_t height, std::int64_t width, float du, float dv) {
  if (height < 1 || width < 1) throw ShapeError("flow: extents must be >= 1");
  FlowMap f;
  f.height = height;
  f.width = width;
  f.du.assign(static_cast<std::size_t>(height * width), du);
  f.dv.assign(static_cast<std::size_t>(height * width), dv);
  return f;
}

FlowMap FlowMap::from_tensor(const Tensor& t) {
  if (t.rank() != 3 || t.dim(0) != 2) throw ShapeError("flow: expected (2,H,W), got " + shape_str(t.shape()));
  FlowMap f;
  f.height = t.dim(1);
  f.width = t.dim(2);
  const auto n = static_cast<std::size_t>(f.height * f.width);
  const auto& v = t.vec();
  f.du.assign(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(n));
  f.dv.assign(v.begin() + static_cast<std::ptrdiff_t>(n), v.end());
  if (!autograd::all_finite(std::span<const float>(v))) throw NumericError("flow: non-finite displacement");
  return f;
}

Tensor FlowMap::to_tensor() const {
  std::vector<float> v(du);
  v.insert(v.end(), dv.begin(), dv.end());
  return Tensor({2, height, width}, std::move(v));
}

bool FlowMap::is_zero() const {
  auto zero = [](float v) { return v == 0.0f; };
  return std::all_of(du.begin(), du.end(), zero) && std::all_of(dv.begin(), dv.end(), zero);
}

void save_flow(const FlowMap& flow, const std::filesystem::path& path) { save_tensor(flow.to_tensor(), path); }

FlowMap load_flow(const std::filesystem::path& path) { return FlowMap::from_tensor(load_tensor(path)); }

std::int64_t BilinearTap::index(int k, std::int64_t height, std::int64_t width) const {
  const std::int64_t x = std::clamp<std::int64_t>(x1 + (k & 1), 0, width - 1);
  const std::int64_t y = std::clamp<std::int64_t>(y1 + (k >> 1), 0, height - 1);
  return y * width + x;
}

BilinearTap bilinear_tap(double x, double y, std::int64_t height, std::int64_t width) {
  if (std::isnan(x) || std::isnan(y)) throw NumericError("bilinear_tap: NaN coordinate");
  if (!std::isfinite(x) || !std::isfinite(y)) throw NumericError("bilinear_tap: infinite coordinate");
  if (height < 1 || width < 1) throw ShapeError("bilinear_tap: empty grid");
  // Far-away coordinates clamp to the border anyway; keep the floor in range.
  const double lim = static_cast<double>(std::max(height, width)) + 2.0;
  x = std::clamp(x, -lim, lim);
  y = std::clamp(y, -lim, lim);
  const double fx0 = std::floor(x), fy0 = std::floor(y);
  const double fx = x - fx0, fy = y - fy0;
  BilinearTap t;
  t.x1 = static_cast<std::int64_t>(fx0);
  t.y1 = static_cast<std::int64_t>(fy0);
  t.w = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
  return t;
}

OfsPlan make_ofs_plan(const std::vector<FlowMap>& flows, std::int64_t keyframe) {
  if (flows.empty()) throw Error("ofs: no frames");
  const auto frames = static_cast<std::int64_t>(flows.size());
  if (keyframe < 0 || keyframe >= frames) throw Error("ofs: keyframe index out of range");
  OfsPlan plan;
  plan.frames = frames;
  plan.height = flows[0].height;
  plan.width = flows[0].width;
  plan.keyframe = keyframe;
  if (!flows[static_cast<std::size_t>(keyframe)].is_zero()) throw Error("ofs: keyframe flow must be zero");
  const auto h = plan.height, w = plan.width;
  plan.taps.resize(static_cast<std::size_t>(frames * h * w));
  for (std::int64_t b = 0; b < frames; ++b) {
    const auto& flow = flows[static_cast<std::size_t>(b)];
    if (flow.height != h || flow.width != w)
      throw ShapeError("ofs: flow " + std::to_string(b) + " is " + shape_str({flow.height, flow.width}) +
                       ", features are " + shape_str({h, w}));
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        const auto p = y * w + x;
        // source coordinates rounded to float so the weights are exact
        const float xs = static_cast<float>(x) - flow.du[static_cast<std::size_t>(p)];
        const float ys = static_cast<float>(y) - flow.dv[static_cast<std::size_t>(p)];
        const auto tap = bilinear_tap(xs, ys, h, w);
        auto& dst = plan.taps[static_cast<std::size_t>(b * h * w + p)];
        for (int k = 0; k < 4; ++k) {
          dst.idx[k] = tap.index(k, h, w);
          dst.w[k] = tap.w[k];
        }
      }
  }
  return plan;
}

OfsPlan identity_ofs_plan(std::int64_t frames, std::int64_t height, std::int64_t width,
                          std::int64_t keyframe) {
  return make_ofs_plan(std::vector<FlowMap>(static_cast<std::size_t>(frames), FlowMap::zeros(height, width)),
                       keyframe);
}

namespace {

void check_plan_features(const char* op, const Shape& s, const OfsPlan& plan) {
  if (s.size() != 4 || s[0] != plan.frames || s[2] != plan.height || s[3] != plan.width)
    throw ShapeError(std::string(op) + ": features " + shape_str(s) + " do not match plan " +
                     shape_str({plan.frames, -1, plan.height, plan.width}));
}

void check_plan_sequence(const char* op, const Shape& s, const OfsPlan& plan) {
  if (s.size() != 3 || s[0] != plan.height * plan.width || s[1] != plan.frames)
    throw ShapeError(std::string(op) + ": sequences " + shape_str(s) + " do not match plan " +
                     shape_str({plan.height * plan.width, plan.frames, -1}));
}

// features (L,C,HW) -> seq (HW,L,C); zero weights are skipped so identity taps copy exactly
template <class T>
void ofs_gather_kernel(const OfsPlan& plan, std::int64_t channels, const T* f, T* seq) {
  const auto hw = plan.height * plan.width, l = plan.frames;
  for (std::int64_t p = 0; p < hw; ++p)
    for (std::int64_t b = 0; b < l; ++b) {
      const auto& tap = plan.tap(b, p);
      T* dst = seq + (p * l + b) * channels;
      const T* frame = f + b * channels * hw;
      for (std::int64_t c = 0; c < channels; ++c) {
        double acc = 0.0;
        for (int k = 0; k < 4; ++k)
          if (tap.w[k] != 0.0) acc += tap.w[k] * static_cast<double>(frame[c * hw + tap.idx[k]]);
        dst[c] = static_cast<T>(acc);
      }
    }
}

// seq (HW,L,C) -> features (L,C,HW), accumulated into f
template <class T>
void ofs_scatter_kernel(const OfsPlan& plan, std::int64_t channels, const T* seq, T* f) {
  const auto hw = plan.height * plan.width, l = plan.frames;
  std::vector<double> acc(static_cast<std::size_t>(l * channels * hw), 0.0);
  for (std::int64_t p = 0; p < hw; ++p)
    for (std::int64_t b = 0; b < l; ++b) {
      const auto& tap = plan.tap(b, p);
      const T* src = seq + (p * l + b) * channels;
      double* frame = acc.data() + b * channels * hw;
      for (std::int64_t c = 0; c < channels; ++c)
        for (int k = 0; k < 4; ++k)
          if (tap.w[k] != 0.0) frame[c * hw + tap.idx[k]] += tap.w[k] * static_cast<double>(src[c]);
    }
  for (std::size_t i = 0; i < acc.size(); ++i) f[i] += static_cast<T>(acc[i]);
}

}  // namespace

template <class T>
BasicTensor<T> ofs_serialize(const BasicTensor<T>& f, std::shared_ptr<const OfsPlan> plan) {
  if (!plan) throw Error("ofs_serialize: missing plan");
  check_plan_features("ofs_serialize", f.shape(), *plan);
  const auto c = f.dim(1);
  const auto hw = plan->height * plan->width;
  std::vector<T> out(static_cast<std::size_t>(hw * plan->frames * c));
  ofs_gather_kernel(*plan, c, f.vec().data(), out.data());
  return make_result<T>("ofs_serialize", {hw, plan->frames, c}, std::move(out), {f},
                        [plan, c](const Node<T>&, const std::vector<T>& g,
                                  std::span<std::vector<T>* const> gin) {
                          ofs_scatter_kernel(*plan, c, g.data(), gin[0]->data());
                        });
}

template <class T>
BasicTensor<T> ofs_scatter(const BasicTensor<T>& seq, std::shared_ptr<const OfsPlan> plan) {
  if (!plan) throw Error("ofs_scatter: missing plan");
  check_plan_sequence("ofs_scatter", seq.shape(), *plan);
  const auto c = seq.dim(2);
  std::vector<T> out(static_cast<std::size_t>(plan->frames * c * plan->height * plan->width), T(0));
  ofs_scatter_kernel(*plan, c, seq.vec().data(), out.data());
  return make_result<T>("ofs_scatter", {plan->frames, c, plan->height, plan->width}, std::move(out), {seq},
                        [plan, c](const Node<T>&, const std::vector<T>& g,
                                  std::span<std::vector<T>* const> gin) {
                          const auto n = gin[0]->size();
                          std::vector<T> tmp(n);
                          ofs_gather_kernel(*plan, c, g.data(), tmp.data());
                          for (std::size_t i = 0; i < n; ++i) (*gin[0])[i] += tmp[i];
                        });
}

#define BM_INSTANTIATE_SERIAL(T)                                                                   \
  template BasicTensor<T> serialize_2d(const BasicTensor<T>&, ScanOrder);                          \
  template BasicTensor<T> deserialize_2d(const BasicTensor<T>&, ScanOrder, std::int64_t,           \
                                         std::int64_t);                                            \
  template BasicTensor<T> serialize_temporal(const BasicTensor<T>&, ScanOrder);                    \
  template BasicTensor<T> merge_paths(const std::vector<BasicTensor<T>>&);                         \
  template BasicTensor<T> reverse_time(const BasicTensor<T>&);                                     \
  template BasicTensor<T> ofs_serialize(const BasicTensor<T>&, std::shared_ptr<const OfsPlan>);    \
  template BasicTensor<T> ofs_scatter(const BasicTensor<T>&, std::shared_ptr<const OfsPlan>);

BM_INSTANTIATE_SERIAL(float)
BM_INSTANTIATE_SERIAL(double)

}  // namespace burstmamba

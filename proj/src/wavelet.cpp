#include "burstmamba/wavelet.hpp"

#include <cmath>
#include <string>

#include "burstmamba/ops.hpp"

namespace burstmamba {

using autograd::make_result;
using autograd::Node;

namespace {

struct HaarDims {
  std::int64_t outer, c, h, w;  // input extents; outer folds leading axes
};

HaarDims haar_dims(const char* op, const Shape& s, bool forward) {
  if (s.size() < 3) throw ShapeError(std::string(op) + ": expected (...,C,H,W), got " + shape_str(s));
  HaarDims d;
  d.outer = 1;
  for (std::size_t i = 0; i + 3 < s.size(); ++i) d.outer *= s[i];
  d.c = s[s.size() - 3];
  d.h = s[s.size() - 2];
  d.w = s[s.size() - 1];
  if (forward) {
    if (d.h % 2 || d.w % 2)
      throw ShapeError(std::string(op) + ": even extents required, got " + shape_str(s));
  } else {
    if (d.c % 4) throw ShapeError(std::string(op) + ": channels must be a multiple of 4, got " + shape_str(s));
    d.c /= 4;
    d.h *= 2;
    d.w *= 2;
  }
  return d;
}

// src (outer, C, H, W) -> dst (outer, 4C, H/2, W/2), accumulating into dst.
template <class T>
void haar_analysis(const HaarDims& d, const T* src, T* dst) {
  const auto h2 = d.h / 2, w2 = d.w / 2, band = d.c * h2 * w2;
  for (std::int64_t o = 0; o < d.outer; ++o)
    for (std::int64_t c = 0; c < d.c; ++c)
      for (std::int64_t y = 0; y < h2; ++y)
        for (std::int64_t x = 0; x < w2; ++x) {
          const T* p = src + ((o * d.c + c) * d.h + 2 * y) * d.w + 2 * x;
          const double a = p[0], b = p[1], cc = p[d.w], dd = p[d.w + 1];
          T* q = dst + o * 4 * band + (c * h2 + y) * w2 + x;
          q[0] += static_cast<T>(0.5 * (a + b + cc + dd));
          q[band] += static_cast<T>(0.5 * (a - b + cc - dd));
          q[2 * band] += static_cast<T>(0.5 * (a + b - cc - dd));
          q[3 * band] += static_cast<T>(0.5 * (a - b - cc + dd));
        }
}

// src (outer, 4C, H/2, W/2) -> dst (outer, C, H, W), accumulating into dst.
template <class T>
void haar_synthesis(const HaarDims& d, const T* src, T* dst) {
  const auto h2 = d.h / 2, w2 = d.w / 2, band = d.c * h2 * w2;
  for (std::int64_t o = 0; o < d.outer; ++o)
    for (std::int64_t c = 0; c < d.c; ++c)
      for (std::int64_t y = 0; y < h2; ++y)
        for (std::int64_t x = 0; x < w2; ++x) {
          const T* q = src + o * 4 * band + (c * h2 + y) * w2 + x;
          const double ll = q[0], lh = q[band], hl = q[2 * band], hh = q[3 * band];
          T* p = dst + ((o * d.c + c) * d.h + 2 * y) * d.w + 2 * x;
          p[0] += static_cast<T>(0.5 * (ll + lh + hl + hh));
          p[1] += static_cast<T>(0.5 * (ll - lh + hl - hh));
          p[d.w] += static_cast<T>(0.5 * (ll + lh - hl - hh));
          p[d.w + 1] += static_cast<T>(0.5 * (ll - lh - hl + hh));
        }
}

}  // namespace

template <class T>
BasicTensor<T> haar_forward(const BasicTensor<T>& f) {
  const auto d = haar_dims("dwt_haar", f.shape(), true);
  Shape so = f.shape();
  so[so.size() - 3] *= 4;
  so[so.size() - 2] /= 2;
  so[so.size() - 1] /= 2;
  std::vector<T> out(f.vec().size(), T(0));
  haar_analysis(d, f.vec().data(), out.data());
  return make_result<T>("dwt_haar", std::move(so), std::move(out), {f},
                        [d](const Node<T>&, const std::vector<T>& g, std::span<std::vector<T>* const> gin) {
                          haar_synthesis(d, g.data(), gin[0]->data());
                        });
}

template <class T>
BasicTensor<T> haar_inverse(const BasicTensor<T>& w) {
  const auto d = haar_dims("idwt_haar", w.shape(), false);
  Shape so = w.shape();
  so[so.size() - 3] /= 4;
  so[so.size() - 2] *= 2;
  so[so.size() - 1] *= 2;
  std::vector<T> out(w.vec().size(), T(0));
  haar_synthesis(d, w.vec().data(), out.data());
  return make_result<T>("idwt_haar", std::move(so), std::move(out), {w},
                        [d](const Node<T>&, const std::vector<T>& g, std::span<std::vector<T>* const> gin) {
                          haar_analysis(d, g.data(), gin[0]->data());
                        });
}

template <class T>
BasicWaveletFeatures<T> dwt_haar(const BasicTensor<T>& f) {
  auto w = haar_forward(f);
  const auto axis = static_cast<std::int64_t>(w.rank()) - 3;
  const auto c = w.dim(axis) / 4;
  return {slice(w, axis, 0, c), slice(w, axis, c, c), slice(w, axis, 2 * c, c), slice(w, axis, 3 * c, c)};
}

template <class T>
BasicTensor<T> idwt_haar(const BasicWaveletFeatures<T>& w) {
  const auto& s = w.ll.shape();
  for (const auto* t : {&w.lh, &w.hl, &w.hh})
    if (t->shape() != s)
      throw ShapeError("idwt_haar: subband shape mismatch " + shape_str(s) + " vs " + shape_str(t->shape()));
  const auto axis = static_cast<std::int64_t>(w.ll.rank()) - 3;
  if (axis < 0) throw ShapeError("idwt_haar: expected (...,C,H,W) subbands, got " + shape_str(s));
  return haar_inverse(concat<T>({w.ll, w.lh, w.hl, w.hh}, axis));
}

template <class T>
BasicPsiHead<T> BasicPsiHead<T>::init(std::int64_t channels, std::int64_t state_dim, std::int64_t d_psi,
                                      std::int64_t groups, Rng& rng) {
  if (channels < 1 || state_dim < 1 || d_psi < 1 || groups < 1) throw Error("psi head: dimensions must be positive");
  if (channels % groups) throw Error("psi head: step groups must divide channels");
  BasicPsiHead h;
  h.channels = channels;
  h.groups = groups;
  h.state_dim = state_dim;
  auto uniform = [&rng](Shape s, double bound) {
    std::vector<T> v(static_cast<std::size_t>(shape_numel(s)));
    for (auto& e : v) e = static_cast<T>(rng.uniform(-bound, bound));
    return BasicTensor<T>(std::move(s), std::move(v));
  };
  const double rb = 1.0 / std::sqrt(static_cast<double>(4 * channels * 9));
  h.reduce_w = uniform({d_psi, 4 * channels, 3, 3}, rb);
  h.reduce_b = uniform({d_psi}, rb);
  const auto outs = groups + 2 * state_dim;
  h.lin_w = uniform({outs, d_psi}, 1.0 / std::sqrt(static_cast<double>(d_psi)));
  std::vector<T> lb(static_cast<std::size_t>(outs));
  // steps start log-uniform in [1e-3, 1e-1]; B near one, C small
  for (std::int64_t g = 0; g < groups; ++g) {
    const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
    lb[g] = static_cast<T>(std::log(std::expm1(dt)));
  }
  for (std::int64_t n = 0; n < state_dim; ++n) lb[groups + n] = static_cast<T>(rng.uniform(0.5, 1.0));
  const double cb = 1.0 / std::sqrt(static_cast<double>(state_dim));
  for (std::int64_t n = 0; n < state_dim; ++n) lb[groups + state_dim + n] = static_cast<T>(rng.uniform(-cb, cb));
  h.lin_b = BasicTensor<T>({outs}, std::move(lb));
  return h;
}

template <class T>
std::vector<BasicTensor<T>*> BasicPsiHead<T>::tensors() {
  return {&reduce_w, &reduce_b, &lin_w, &lin_b};
}

template <class T>
std::vector<const BasicTensor<T>*> BasicPsiHead<T>::tensors() const {
  return {&reduce_w, &reduce_b, &lin_w, &lin_b};
}

template <class T>
std::vector<const char*> BasicPsiHead<T>::tensor_names() {
  return {"reduce_w", "reduce_b", "lin_w", "lin_b"};
}

template <class T>
ScanInputs<T> psi_params(const BasicTensor<T>& f, const BasicPsiHead<T>& head) {
  if (f.rank() != 3 && f.rank() != 4)
    throw ShapeError("psi_params: expected (C,H,W) or (L,C,H,W), got " + shape_str(f.shape()));
  const auto axis = static_cast<std::int64_t>(f.rank()) - 3;
  if (f.dim(axis) != head.channels)
    throw ShapeError("psi_params: channels " + std::to_string(f.dim(axis)) + " vs head " +
                     std::to_string(head.channels));
  auto psi = haar_forward(f);
  auto reduced = conv3x3_replicate(psi, head.reduce_w, head.reduce_b);
  const auto outs = head.lin_w.dim(0);
  // 1x1 linear at half resolution; nearest replication commutes with it
  auto lin = conv2d(reduced, reshape(head.lin_w, {outs, head.d_psi(), 1, 1}), head.lin_b, 1, 0);
  auto full = upsample_nearest2x(lin);
  const auto g = head.groups, n = head.state_dim, c = head.channels;
  auto delta = softplus(slice(full, axis, 0, g));
  if (g != c) {
    Index expand(static_cast<std::size_t>(c));
    for (std::int64_t d = 0; d < c; ++d) expand[static_cast<std::size_t>(d)] = d * g / c;
    delta = gather(delta, axis, expand);
  }
  return {delta, slice(full, axis, g, n), slice(full, axis, g + n, n)};
}

template <class T>
ScanInputs<T> psi_sampled_params(const BasicTensor<T>& frames, const BasicPsiHead<T>& head,
                                 const std::shared_ptr<const OfsPlan>& plan) {
  if (frames.rank() != 4) throw ShapeError("psi_sampled_params: expected (L,C,H,W), got " + shape_str(frames.shape()));
  const auto fields = psi_params(frames, head);
  return {ofs_serialize(fields.delta, plan), ofs_serialize(fields.b, plan), ofs_serialize(fields.c, plan)};
}

template <class T>
BasicTensor<T> psi_selective_scan(const BasicTensor<T>& x_seq, const BasicTensor<T>& frames,
                                  const BasicPsiHead<T>& head, const BasicSsmParams<T>& ssm,
                                  const std::shared_ptr<const OfsPlan>& plan, bool reverse) {
  auto p = psi_sampled_params(frames, head, plan);
  if (x_seq.shape() != p.delta.shape())
    throw ShapeError("psi_selective_scan: shape mismatch " + shape_str(x_seq.shape()) + " vs " +
                     shape_str(p.delta.shape()));
  const BasicTensor<T> skip = ssm.use_skip ? ssm.d_skip : BasicTensor<T>{};
  if (!reverse) return scan_core(x_seq, p.delta, ssm.a_diag, p.b, p.c, skip);
  auto y = scan_core(reverse_time(x_seq), reverse_time(p.delta), ssm.a_diag, reverse_time(p.b),
                     reverse_time(p.c), skip);
  return reverse_time(y);
}

#define BM_INSTANTIATE_WAVELET(T)                                                                  \
  template BasicTensor<T> haar_forward(const BasicTensor<T>&);                                     \
  template BasicTensor<T> haar_inverse(const BasicTensor<T>&);                                     \
  template BasicWaveletFeatures<T> dwt_haar(const BasicTensor<T>&);                                \
  template BasicTensor<T> idwt_haar(const BasicWaveletFeatures<T>&);                               \
  template struct BasicPsiHead<T>;                                                                 \
  template ScanInputs<T> psi_params(const BasicTensor<T>&, const BasicPsiHead<T>&);                \
  template ScanInputs<T> psi_sampled_params(const BasicTensor<T>&, const BasicPsiHead<T>&,         \
                                            const std::shared_ptr<const OfsPlan>&);                \
  template BasicTensor<T> psi_selective_scan(const BasicTensor<T>&, const BasicTensor<T>&,         \
                                             const BasicPsiHead<T>&, const BasicSsmParams<T>&,     \
                                             const std::shared_ptr<const OfsPlan>&, bool);

BM_INSTANTIATE_WAVELET(float)
BM_INSTANTIATE_WAVELET(double)

}  // namespace burstmamba

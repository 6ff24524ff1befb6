#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "burstmamba/rng.hpp"
#include "burstmamba/serialization.hpp"
#include "burstmamba/ssm.hpp"
#include "burstmamba/tensor.hpp"

namespace burstmamba {

/// Single-level orthonormal Haar transform over the last two axes.
/// (..., C, H, W) -> (..., 4C, H/2, W/2), channel blocks ordered LL, LH, HL, HH.
/// For a cell [[a,b],[c,d]]: LL=(a+b+c+d)/2, LH=(a-b+c-d)/2, HL=(a+b-c-d)/2, HH=(a-b-c+d)/2.
template <class T> BasicTensor<T> haar_forward(const BasicTensor<T>& f);
/// Exact inverse (and adjoint) of haar_forward.
template <class T> BasicTensor<T> haar_inverse(const BasicTensor<T>& w);

template <class T>
struct BasicWaveletFeatures {
  BasicTensor<T> ll, lh, hl, hh;  // each (..., C, H/2, W/2)
};
using WaveletFeatures = BasicWaveletFeatures<float>;

template <class T> BasicWaveletFeatures<T> dwt_haar(const BasicTensor<T>& f);
template <class T> BasicTensor<T> idwt_haar(const BasicWaveletFeatures<T>& w);

/// Maps wavelet subbands of a feature map to per-pixel scan parameters:
/// 3x3 edge-padded conv (4C -> d_psi), 1x1 linear (d_psi -> G + 2N), 2x2 nearest replication.
/// Output channels: G step logits (softplus), then N for B, then N for C.
/// Channel d uses step group d * G / C.
template <class T>
struct BasicPsiHead {
  std::int64_t channels = 0, groups = 0, state_dim = 0;
  BasicTensor<T> reduce_w;  // (d_psi, 4C, 3, 3)
  BasicTensor<T> reduce_b;  // (d_psi)
  BasicTensor<T> lin_w;     // (G + 2N, d_psi)
  BasicTensor<T> lin_b;     // (G + 2N)

  static BasicPsiHead init(std::int64_t channels, std::int64_t state_dim, std::int64_t d_psi,
                           std::int64_t groups, Rng& rng);

  std::int64_t d_psi() const { return reduce_w.dim(0); }
  std::vector<BasicTensor<T>*> tensors();
  std::vector<const BasicTensor<T>*> tensors() const;
  static std::vector<const char*> tensor_names();

  template <class U>
  BasicPsiHead<U> cast() const {
    BasicPsiHead<U> out;
    out.channels = channels;
    out.groups = groups;
    out.state_dim = state_dim;
    out.reduce_w = reduce_w.template cast<U>();
    out.reduce_b = reduce_b.template cast<U>();
    out.lin_w = lin_w.template cast<U>();
    out.lin_b = lin_b.template cast<U>();
    return out;
  }
};
using PsiHead = BasicPsiHead<float>;

/// Per-pixel parameter fields of f (C,H,W) or (L,C,H,W): delta (.., C, H, W) after
/// softplus and group expansion, b and c (.., N, H, W).
template <class T>
ScanInputs<T> psi_params(const BasicTensor<T>& f, const BasicPsiHead<T>& head);

/// psi_params of every frame, sampled along the flow-compensated sequences of
/// `plan`: delta (HW, L, C), b and c (HW, L, N).
template <class T>
ScanInputs<T> psi_sampled_params(const BasicTensor<T>& frames, const BasicPsiHead<T>& head,
                                 const std::shared_ptr<const OfsPlan>& plan);

/// Selective scan of x_seq (HW, L, C) whose (delta, B, C) come from the wavelet
/// fields of `frames` (L, C, H, W) instead of from x. Only a_diag, d_skip and
/// use_skip of `ssm` are used. With reverse, the sequences run from the last frame.
template <class T>
BasicTensor<T> psi_selective_scan(const BasicTensor<T>& x_seq, const BasicTensor<T>& frames,
                                  const BasicPsiHead<T>& head, const BasicSsmParams<T>& ssm,
                                  const std::shared_ptr<const OfsPlan>& plan, bool reverse = false);

}  // namespace burstmamba

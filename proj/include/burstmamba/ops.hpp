#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "burstmamba/tensor.hpp"

namespace burstmamba {

using Index = std::vector<std::int64_t>;

// Element-wise arithmetic with right-aligned broadcasting.
template <class T> BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <class T> BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <class T> BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <class T> BasicTensor<T> div(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <class T> BasicTensor<T> add_scalar(const BasicTensor<T>& x, T s);
template <class T> BasicTensor<T> mul_scalar(const BasicTensor<T>& x, T s);

template <class T> BasicTensor<T> exp(const BasicTensor<T>& x);
template <class T> BasicTensor<T> abs(const BasicTensor<T>& x);
template <class T> BasicTensor<T> softplus(const BasicTensor<T>& x);
template <class T> BasicTensor<T> sigmoid(const BasicTensor<T>& x);
template <class T> BasicTensor<T> silu(const BasicTensor<T>& x);

// Reductions accumulate in double.
template <class T> BasicTensor<T> sum(const BasicTensor<T>& x);
template <class T> BasicTensor<T> mean(const BasicTensor<T>& x);
template <class T> BasicTensor<T> sum_axis(const BasicTensor<T>& x, std::int64_t axis);
template <class T> BasicTensor<T> mean_axis(const BasicTensor<T>& x, std::int64_t axis);

/// (M,K) x (K,N) -> (M,N).
template <class T> BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

/// x (..., in) with weight (out, in) and optional bias (out) -> (..., out).
template <class T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias = {});

template <class T> BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape);
/// General axis permutation: result axis i is input axis perm[i].
template <class T> BasicTensor<T> transpose(const BasicTensor<T>& x, const Index& perm);
template <class T>
BasicTensor<T> slice(const BasicTensor<T>& x, std::int64_t axis, std::int64_t start,
                     std::int64_t length);
/// Constant padding, one (before, after) pair per axis.
template <class T>
BasicTensor<T> pad(const BasicTensor<T>& x,
                   const std::vector<std::pair<std::int64_t, std::int64_t>>& pads, T value = T(0));
template <class T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::int64_t axis);
template <class T> BasicTensor<T> broadcast_to(const BasicTensor<T>& x, const Shape& shape);

/// Selects slices idx[k] along `axis`.
template <class T>
BasicTensor<T> gather(const BasicTensor<T>& x, std::int64_t axis, const Index& idx);
/// Adjoint of gather: result has `extent` slices along `axis`, slice idx[k] receives x's slice k.
template <class T>
BasicTensor<T> scatter_add(const BasicTensor<T>& x, std::int64_t axis, const Index& idx,
                           std::int64_t extent);

/// x (C,H,W) or (N,C,H,W); weight (O,C,kh,kw); bias (O) optional. im2col + GEMM.
template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias, std::int64_t stride, std::int64_t padding);

/// Normalizes over the last axis.
template <class T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, double eps = 1e-5);

/// (..., C*r*r, H, W) -> (..., C, H*r, W*r); channel c*r*r + r*i + j lands at offset (i, j).
template <class T> BasicTensor<T> pixel_shuffle(const BasicTensor<T>& x, std::int64_t r);

/// Edge-replicating padding of the last two axes by p on every side.
template <class T> BasicTensor<T> pad_replicate(const BasicTensor<T>& x, std::int64_t p);

/// 3x3 convolution, stride 1, with edge-replicating padding (output keeps H, W).
template <class T>
BasicTensor<T> conv3x3_replicate(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                                 const BasicTensor<T>& bias);

/// Replicates each element of the last two axes into a 2x2 cell.
template <class T> BasicTensor<T> upsample_nearest2x(const BasicTensor<T>& x);

template <class T>
BasicTensor<T> l1_loss(const BasicTensor<T>& pred, const BasicTensor<T>& target);

namespace kernels {

// Row-major GEMM helpers; all accumulate into C.
template <class T>
void gemm_nn(std::int64_t m, std::int64_t n, std::int64_t k, const T* a, const T* b, T* c);
template <class T>
void gemm_tn(std::int64_t m, std::int64_t n, std::int64_t k, const T* a, const T* b, T* c);
template <class T>
void transpose2d(std::int64_t rows, std::int64_t cols, const T* src, T* dst);

}  // namespace kernels

}  // namespace burstmamba

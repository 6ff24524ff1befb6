#pragma once

#include "burstmamba/tensor.hpp"

namespace burstmamba {

/// 10 log10(peak^2 / MSE). Identical inputs give +infinity.
double psnr(const Tensor& a, const Tensor& b, double peak = 1.0);

inline constexpr std::int64_t kSsimWindow = 8;

/// Mean SSIM over every 8x8 window (stride 1) of the channel-mean images.
/// Local statistics use the population (1/64) normalization.
double ssim(const Tensor& a, const Tensor& b, double peak = 1.0);

}  // namespace burstmamba

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "burstmamba/tensor.hpp"

namespace burstmamba {

/// softmax(q k^T / sqrt(D)) v for q, k, v of shape (L, D), one query row at a
/// time. The quadratic baseline the scan is timed against. Forward only.
Tensor naive_attention(const Tensor& q, const Tensor& k, const Tensor& v);

struct BenchRow {
  std::string kernel;  // "selective_scan" or "attention"
  std::int64_t length = 0;
  double median_us = 0;
};

struct BenchOptions {
  std::vector<std::int64_t> lengths{4096, 8192, 16384};
  int reps = 20;
  std::int64_t dim = 8;        // channels of the scan, head width of attention
  std::int64_t state_dim = 16;
  std::uint64_t seed = 0;
};

/// Median wall time per length for both kernels, after one warm-up call each.
std::vector<BenchRow> run_bench(const BenchOptions& opt);

/// "kernel,length,median_us" rows; a trailing "# noisy" comment when reps == 1.
std::string bench_csv(const std::vector<BenchRow>& rows, int reps);

/// t(2L) / t(L) for consecutive lengths of one kernel.
std::vector<double> doubling_ratios(const std::vector<BenchRow>& rows, const std::string& kernel);

}  // namespace burstmamba

#pragma once

#include <cstdint>
#include <vector>

#include "burstmamba/ops.hpp"
#include "burstmamba/rng.hpp"
#include "burstmamba/tensor.hpp"

namespace burstmamba {

struct ZohStep {
  double a_bar;
  double b_bar;
};

// Below this |dt*a| the input gain switches to its Taylor series.
inline constexpr double kZohSeriesThreshold = 1e-4;

/// Exact zero-order hold: a_bar = exp(dt*a), b_bar = (exp(dt*a)-1)/a * b.
ZohStep discretize_zoh(double a, double b, double dt);

/// (exp(dt*a)-1)/a, continuous through a = 0.
double zoh_gain(double a, double dt);

namespace testing {
// Scales every ZOH input gain by (1 + eps). Only for sensitivity checks.
void set_zoh_perturbation(double eps);
double zoh_perturbation();
}  // namespace testing

enum class ScanMode { time_invariant, selective };

template <class T>
struct BasicSsmParams {
  ScanMode mode = ScanMode::selective;
  bool use_skip = true;
  BasicTensor<T> a_diag;     // (N), strictly negative
  BasicTensor<T> b_weight;   // (N, D)
  BasicTensor<T> b_bias;     // (N)
  BasicTensor<T> c_weight;   // (N, D)
  BasicTensor<T> c_bias;     // (N)
  BasicTensor<T> dt_weight;  // (D, D)
  BasicTensor<T> dt_bias;    // (D)
  BasicTensor<T> d_skip;     // (D)

  static BasicSsmParams init(std::int64_t dim, std::int64_t state_dim, Rng& rng,
                             ScanMode mode = ScanMode::selective);

  std::int64_t dim() const { return d_skip.dim(0); }
  std::int64_t state_dim() const { return a_diag.dim(0); }

  // Trainable tensors in a fixed order (weights are listed even in time-invariant mode).
  std::vector<BasicTensor<T>*> tensors();
  std::vector<const BasicTensor<T>*> tensors() const;
  static std::vector<const char*> tensor_names();

  /// Keeps A stable after an optimizer step.
  void clamp_a();

  template <class U>
  BasicSsmParams<U> cast() const {
    BasicSsmParams<U> out;
    out.mode = mode;
    out.use_skip = use_skip;
    out.a_diag = a_diag.template cast<U>();
    out.b_weight = b_weight.template cast<U>();
    out.b_bias = b_bias.template cast<U>();
    out.c_weight = c_weight.template cast<U>();
    out.c_bias = c_bias.template cast<U>();
    out.dt_weight = dt_weight.template cast<U>();
    out.dt_bias = dt_bias.template cast<U>();
    out.d_skip = d_skip.template cast<U>();
    return out;
  }
};

using SsmParams = BasicSsmParams<float>;

inline constexpr double kMaxStableA = -1e-4;

/// Fused diagonal selective scan over S independent sequences.
///   x, delta: (S, L, D); a: (N); b, c: (S, L, N); d_skip: (D) or undefined.
///   h_t = exp(delta_t a) h_{t-1} + zoh_gain(a, delta_t) b_t x_t
///   y_t = <c_t, h_t> + d_skip x_t
/// Differentiable in every tensor argument. Returns (S, L, D).
template <class T>
BasicTensor<T> scan_core(const BasicTensor<T>& x, const BasicTensor<T>& delta,
                         const BasicTensor<T>& a, const BasicTensor<T>& b,
                         const BasicTensor<T>& c, const BasicTensor<T>& d_skip);

/// Same contract as scan_core, evaluated with a work-efficient associative tree.
template <class T>
BasicTensor<T> scan_core_parallel(const BasicTensor<T>& x, const BasicTensor<T>& delta,
                                  const BasicTensor<T>& a, const BasicTensor<T>& b,
                                  const BasicTensor<T>& c, const BasicTensor<T>& d_skip);

// The public scans accept x as (L, D) or (S, L, D) and return the same shape.

/// Sequential recurrence. With fixed = true, delta/B/C come from the biases only.
template <class T>
BasicTensor<T> scan_recurrent(const BasicTensor<T>& x, const BasicSsmParams<T>& p, bool fixed);

template <class T>
BasicTensor<T> selective_scan(const BasicTensor<T>& x, const BasicSsmParams<T>& p);

template <class T>
BasicTensor<T> selective_scan_parallel(const BasicTensor<T>& x, const BasicSsmParams<T>& p);

/// Convolution kernel (C B, C A B, ..., C A^k B) per channel: (k+1, D). Time-invariant only.
template <class T>
BasicTensor<T> build_kernel(const BasicSsmParams<T>& p, std::int64_t k);

/// Causal convolution with build_kernel plus the skip term. Forward only.
template <class T>
BasicTensor<T> scan_convolutional(const BasicTensor<T>& x, const BasicSsmParams<T>& p);

/// Projections of the selective scan: delta (.., D), B (.., N), C (.., N).
template <class T>
struct ScanInputs {
  BasicTensor<T> delta, b, c;
};

template <class T>
ScanInputs<T> scan_inputs(const BasicTensor<T>& x3, const BasicSsmParams<T>& p, bool fixed);

}  // namespace burstmamba

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "burstmamba/tensor.hpp"

namespace burstmamba {

struct CheckResult {
  std::string name;
  std::string group;  // scan, zoh, wavelet, ofs, grad
  double value = 0;   // worst error measured
  double limit = 0;   // pass iff value < limit (bitwise checks use 0 / 1)
  bool pass = false;
};

/// Fixed-seed invariant suite: scan equivalences, ZOH against extended
/// precision, Haar reconstruction and energy, OFS identities, and central
/// difference gradient checks of every block and a toy model.
std::vector<CheckResult> run_selfcheck();

/// Table with one line per check; identical inputs give identical text.
std::string format_selfcheck(const std::vector<CheckResult>& results);

/// Norm-wise relative error between reverse-mode gradients and central
/// differences (step h) of a scalar function, probing at most `per_input`
/// coordinates of each input.
double gradient_error(const std::function<Tensor64(const std::vector<Tensor64>&)>& fn,
                      std::vector<Tensor64> inputs, std::size_t per_input = 24, std::uint64_t seed = 1,
                      double h = 1e-3);

}  // namespace burstmamba

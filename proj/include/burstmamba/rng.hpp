#pragma once

#include <cstdint>
#include <string_view>

namespace burstmamba {

/// splitmix64 counter generator. Identical sequences on every platform for a
/// given seed; the floating-point helpers only use exact integer-to-double
/// conversions plus std::log/std::cos for normals.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

  /// Independent named stream derived from a base seed, e.g. Rng::stream(seed, "init").
  static Rng stream(std::uint64_t seed, std::string_view name);
  /// Stream for the i-th item of a collection (per-sample seeds).
  static Rng indexed(std::uint64_t seed, std::string_view name, std::uint64_t index);

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();

  std::uint64_t state() const { return state_; }

 private:
  std::uint64_t state_;
};

std::uint64_t mix64(std::uint64_t z);
std::uint64_t hash_name(std::string_view name);

}  // namespace burstmamba

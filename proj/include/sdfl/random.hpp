#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace sdfl {

/// Mixes a base seed with a list of tags into an independent stream seed.
/// Every random decision in the simulator is keyed this way, so the outcome
/// of one draw never depends on how many draws happened before it.
std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> tags);

/// mt19937_64 with hand-rolled transforms. The std distributions are
/// implementation-defined, which would make outputs differ across standard
/// libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform();

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n);

  /// Standard normal via Box-Muller (one value per call).
  double normal();

  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace sdfl

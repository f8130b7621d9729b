#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace vitprune {

/// Seeded generator with platform-stable output.
///
/// Wraps std::mt19937_64, whose output sequence is fixed by the standard, and
/// derives every variate from raw 64-bit draws (the std distributions are
/// implementation-defined). (seed, stream) pairs select independent sequences.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0, std::uint64_t stream = 0);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1) with 24 bits of resolution.
  float uniform();
  /// Uniform in (0, 1), never exactly 0 or 1.
  double uniform_open();
  float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [lo, hi] inclusive, unbiased.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
  float normal();
  float gumbel();
  bool bernoulli(double p) { return uniform_open() < p; }
  /// k distinct indices from [0, n), in draw order (partial Fisher-Yates).
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k);

  /// Independent child generator keyed by (seed, stream, child).
  Rng fork(std::uint64_t child) const;

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::mt19937_64 engine_;
};

}  // namespace vitprune

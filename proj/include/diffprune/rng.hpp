#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>

#include "diffprune/error.hpp"

namespace diffprune {

// SplitMix64 finalizer; used to derive independent sub-stream seeds.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Deterministic random stream. The engine is std::mt19937_64, whose output
// sequence is fixed by the standard; all conversions to real-valued draws are
// done here rather than through <random> distributions, whose algorithms are
// implementation-defined. State is fully described by (seed, counter).
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  static Rng restore(std::uint64_t seed, std::uint64_t counter) {
    Rng rng(seed);
    rng.engine_.discard(counter);
    rng.counter_ = counter;
    return rng;
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64() {
    ++counter_;
    return engine_();
  }

  // Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer on the closed range [lo, hi].
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    require(lo <= hi, "uniform_int: empty range");
    const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
    if (span == 0) return static_cast<std::int64_t>(next_u64());
    // Rejection keeps the draw exactly uniform.
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % span;
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return lo + static_cast<std::int64_t>(x % span);
  }

  // Box-Muller, one value per call so that the state stays (seed, counter).
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Standard Gumbel(0, 1): -log(-log(U)), U clamped to [1e-12, 1 - 1e-12].
  double gumbel() {
    const double u = std::clamp(uniform(), 1e-12, 1.0 - 1e-12);
    return -std::log(-std::log(u));
  }

  // Independent stream keyed by (seed, tag). Does not depend on how many
  // values this stream has produced.
  Rng fork(std::uint64_t tag) const { return Rng(mix64(seed_ ^ mix64(tag))); }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
  std::mt19937_64 engine_;
};

}  // namespace diffprune

#pragma once

#include <cstdint>

namespace mdgd {

// Counter-based SplitMix64 (Steele, Lea & Flood, 2014; constants from the
// reference implementation). Value n of a stream is mix(seed + n * gamma), so
// the pair (seed, position) fully determines the next draw on any platform.
class Rng {
 public:
  static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;

  explicit Rng(std::uint64_t seed, std::uint64_t position = 0)
      : seed_(seed), position_(position) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t position() const { return position_; }

  std::uint64_t next_u64() {
    ++position_;
    std::uint64_t z = seed_ + position_ * kGamma;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n); n must be positive. Lemire-free modulo is
  // acceptable here: n is tiny relative to 2^64.
  std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

  // Standard normal via Box-Muller, consuming exactly two draws.
  double normal();

  // Derive an independent stream for a named purpose.
  Rng fork(std::uint64_t salt) const;

 private:
  std::uint64_t seed_;
  std::uint64_t position_;
};

}  // namespace mdgd

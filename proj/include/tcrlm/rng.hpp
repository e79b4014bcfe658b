#pragma once

#include <cmath>
#include <cstdint>
#include <span>

#include "tcrlm/error.hpp"

namespace tcrlm::num {

// SplitMix64 step. Used for seeding and for deriving independent per-index
// streams: stream i of master seed s starts from splitmix64(s ^ (i+1)*GOLDEN).
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ull);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

// One-shot mix of a master seed with a tag (fold index, iteration number,
// purpose id). Gives well-separated derived seeds without sharing stream
// state between the consumers.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag) {
  std::uint64_t s = seed ^ (tag + 1) * 0x9E3779B97F4A7C15ull;
  return splitmix64(s);
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag_a,
                              std::uint64_t tag_b) {
  return mix_seed(mix_seed(seed, tag_a), tag_b);
}

// Deterministic, portable generator (xoshiro256++). We deliberately avoid
// std::mt19937_64 + std::*_distribution: the engine is specified but the
// distributions are not, so results would differ across standard libraries.
// Every draw here is fully pinned down by this header.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    std::uint64_t sm = seed;
    for (auto& w : s_) w = splitmix64(sm);
  }

  // Derive the RNG for an indexed substream (e.g. one generated sequence).
  // Streams for distinct indices are independent of batching and threading.
  static Rng stream(std::uint64_t seed, std::uint64_t index) {
    std::uint64_t mix = seed ^ (index + 1) * 0x9E3779B97F4A7C15ull;
    return Rng(splitmix64(mix));
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0, 1): top 53 bits scaled by 2^-53.
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n). Lemire's unbiased multiply-shift rejection.
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) fail("InvalidConfig", "uniform_int: n must be positive");
    std::uint64_t x = next_u64();
    __uint128_t m = __uint128_t(x) * n;
    auto lo = std::uint64_t(m);
    if (lo < n) {
      std::uint64_t threshold = (0 - n) % n;
      while (lo < threshold) {
        x = next_u64();
        m = __uint128_t(x) * n;
        lo = std::uint64_t(m);
      }
    }
    return std::uint64_t(m >> 64);
  }

  // Standard normal via Box-Muller; caches the second value of each pair.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 == 0.0) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Index into an unnormalised weight vector: walk the cumulative sum in
  // index order until it passes u * total. Ties and rounding resolve toward
  // lower indices; the last positive-weight index absorbs any residual.
  std::size_t categorical(std::span<const double> weights) {
    double total = 0.0;
    for (double w : weights) {
      if (w < 0.0 || !std::isfinite(w)) {
        fail("NegativeEntry", "categorical: weights must be finite and >= 0");
      }
      total += w;
    }
    if (total <= 0.0) fail("NegativeEntry", "categorical: total weight is zero");
    double target = uniform() * total;
    double cum = 0.0;
    std::size_t last_positive = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      if (weights[i] > 0.0) {
        cum += weights[i];
        last_positive = i;
        if (target < cum) return i;
      }
    }
    return last_positive;
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }

  std::uint64_t s_[4];
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace tcrlm::num

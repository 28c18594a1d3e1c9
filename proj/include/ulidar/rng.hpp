// ============================================================================
// rng.hpp -- counter-based random numbers (Philox4x32-10)
//
// Every random stream is addressed by (seed, stream id), so per-pixel or
// per-sample streams can be generated in any order and on any number of
// threads with identical results. Samplers are implemented here rather than
// taken from <random> because the standard distributions are not
// reproducible across standard library implementations.
// ============================================================================
#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace ulidar {

/// Philox4x32 with 10 rounds (Salmon et al., SC'11).
inline std::array<std::uint32_t, 4> philox4x32_10(
    std::array<std::uint32_t, 4> ctr, std::array<std::uint32_t, 2> key) {
  constexpr std::uint32_t kM0 = 0xD2511F53u;
  constexpr std::uint32_t kM1 = 0xCD9E8D57u;
  constexpr std::uint32_t kW0 = 0x9E3779B9u;
  constexpr std::uint32_t kW1 = 0xBB67AE85u;
  for (int round = 0; round < 10; ++round) {
    const std::uint64_t p0 = static_cast<std::uint64_t>(kM0) * ctr[0];
    const std::uint64_t p1 = static_cast<std::uint64_t>(kM1) * ctr[2];
    const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
    const auto lo0 = static_cast<std::uint32_t>(p0);
    const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
    const auto lo1 = static_cast<std::uint32_t>(p1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    key[0] += kW0;
    key[1] += kW1;
  }
  return ctr;
}

/// Sequential draws from one Philox stream.
class PhiloxStream {
 public:
  PhiloxStream(std::uint64_t seed, std::uint64_t stream)
      : key_{static_cast<std::uint32_t>(seed),
             static_cast<std::uint32_t>(seed >> 32)},
        stream_{stream} {}

  std::uint32_t next_u32() {
    if (pos_ == 4) refill();
    return block_[pos_++];
  }

  /// Uniform double in the open interval (0, 1), 53-bit resolution.
  double uniform() {
    const std::uint64_t a = next_u32() >> 5;  // 27 bits
    const std::uint64_t b = next_u32() >> 6;  // 26 bits
    const std::uint64_t x = (a << 26) | b;
    return (static_cast<double>(x) + 0.5) * 0x1.0p-53;
  }

  /// Standard Gumbel draw.
  double gumbel() { return -std::log(-std::log(uniform())); }

  /// Poisson draw: inversion for small means, PTRS (Hormann 1993) above.
  std::uint32_t poisson(double mean) {
    if (!(mean > 0.0)) return 0;
    if (mean < 12.0) return poisson_inversion(mean);
    return poisson_ptrs(mean);
  }

 private:
  void refill() {
    block_ = philox4x32_10(
        {static_cast<std::uint32_t>(counter_),
         static_cast<std::uint32_t>(counter_ >> 32),
         static_cast<std::uint32_t>(stream_),
         static_cast<std::uint32_t>(stream_ >> 32)},
        key_);
    ++counter_;
    pos_ = 0;
  }

  std::uint32_t poisson_inversion(double mean) {
    const double u = uniform();
    double p = std::exp(-mean);
    double cdf = p;
    std::uint32_t k = 0;
    while (u > cdf) {
      ++k;
      p *= mean / k;
      cdf += p;
      if (p < 1e-300 && k > mean) break;
    }
    return k;
  }

  std::uint32_t poisson_ptrs(double mean) {
    const double slam = std::sqrt(mean);
    const double loglam = std::log(mean);
    const double b = 0.931 + 2.53 * slam;
    const double a = -0.059 + 0.02483 * b;
    const double inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    const double vr = 0.9277 - 3.6224 / (b - 2.0);
    for (;;) {
      const double u = uniform() - 0.5;
      const double v = uniform();
      const double us = 0.5 - std::abs(u);
      const double k = std::floor((2.0 * a / us + b) * u + mean + 0.43);
      if (us >= 0.07 && v <= vr) return static_cast<std::uint32_t>(k);
      if (k < 0.0 || (us < 0.013 && v > us)) continue;
      if (std::log(v) + std::log(inv_alpha) - std::log(a / (us * us) + b) <=
          -mean + k * loglam - std::lgamma(k + 1.0)) {
        return static_cast<std::uint32_t>(k);
      }
    }
  }

  std::array<std::uint32_t, 2> key_;
  std::uint64_t stream_;
  std::uint64_t counter_ = 0;
  std::array<std::uint32_t, 4> block_{};
  int pos_ = 4;
};

/// Derives a sub-stream id from a tuple of indices.
inline std::uint64_t stream_id(std::uint64_t a, std::uint64_t b = 0,
                               std::uint64_t c = 0) {
  auto mix = [](std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  };
  return mix(a ^ mix(b ^ mix(c)));
}

}  // namespace ulidar

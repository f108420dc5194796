#pragma once

// Counter-based reference generator shared by masking, data synthesis and
// parameter init. Every draw is a pure function of (seed, stream, counter),
// so results are portable and independent of evaluation order.
//
//   finalize(z):  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//                 z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//                 return z ^ (z >> 31)
//   key        = finalize(seed + GAMMA) ^ finalize(stream * GAMMA + 0xD1B54A32D192ED03)
//   draw i     = finalize(key + (i + 1) * GAMMA)          (i = 0, 1, 2, ...)
//   GAMMA      = 0x9E3779B97F4A7C15
//
// below(n) uses rejection on the low range: threshold = (2^64 - n) mod n,
// redraw while draw < threshold, return draw mod n.
// uniform() returns (draw >> 11) * 2^-53.

#include <cmath>
#include <cstdint>
#include <string_view>

namespace clipa {

class CounterRng {
 public:
  static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;

  static constexpr std::uint64_t finalize(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  constexpr CounterRng(std::uint64_t seed, std::uint64_t stream)
      : key_(finalize(seed + kGamma) ^ finalize(stream * kGamma + 0xD1B54A32D192ED03ULL)) {}

  constexpr std::uint64_t next_u64() { return finalize(key_ + (++counter_) * kGamma); }

  // Uniform integer in [0, n); n must be positive.
  constexpr std::uint64_t below(std::uint64_t n) {
    const std::uint64_t threshold = (0 - n) % n;
    for (;;) {
      const std::uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  // Uniform double in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller (consumes two draws).
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925 * u2);
  }

  std::uint64_t draws() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

// FNV-1a 64-bit, used for stream ids derived from names and for content digests.
constexpr std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xCBF29CE484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace clipa

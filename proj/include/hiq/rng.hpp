#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>

namespace hiq {

/// xorshift64* (Vigna, 2014) seeded through splitmix64.
///
/// Portable and fully specified so synthetic data and initialisations are
/// reproducible bit-for-bit in any language:
///   state ← splitmix64(seed)            (state 0 is replaced by 0x9E3779B97F4A7C15)
///   x ^= x >> 12; x ^= x << 25; x ^= x >> 27; return x · 0x2545F4914F6CDD1D
///   uniform() = (next() >> 11) · 2⁻⁵³
///   normal()  = Box–Muller on two uniforms, cosine branch only
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(splitmix64(seed)) {
    if (state_ == 0) state_ = 0x9E3779B97F4A7C15ULL;
  }

  static std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
  }

  std::uint64_t next() {
    state_ ^= state_ >> 12;
    state_ ^= state_ << 25;
    state_ ^= state_ >> 27;
    return state_ * 0x2545F4914F6CDD1DULL;
  }

  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    double u1 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  // Lemire-free modulo reduction; the bias is irrelevant at these ranges.
  std::size_t below(std::size_t n) { return static_cast<std::size_t>(next() % n); }

 private:
  std::uint64_t state_;
};

}  // namespace hiq

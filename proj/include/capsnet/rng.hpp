#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "capsnet/common.hpp"

namespace capsnet {

// xorshift64* generator (Marsaglia xorshift with the Vigna multiplier).
// Every random decision in the library (weight init, shuffles, splits,
// synthetic data) goes through this generator so runs are reproducible
// across platforms. The exact algorithm is documented in the README so
// splits can be recomputed by other implementations:
//   x ^= x >> 12; x ^= x << 25; x ^= x >> 27; return x * 0x2545F4914F6CDD1D
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed ? seed : 0x9E3779B97F4A7C15ull) {}

  uint64_t next_u64() {
    uint64_t x = state_;
    x ^= x >> 12;
    x ^= x << 25;
    x ^= x >> 27;
    state_ = x;
    return x * 0x2545F4914F6CDD1Dull;
  }

  // uniform in [0,1) with 53 random bits
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // bounded draw used by shuffles; plain modulo, documented as such
  uint64_t next_below(uint64_t n) { return next_u64() % n; }

  double normal() {
    // Box-Muller; one value per call, the twin is discarded
    double u1 = next_double();
    double u2 = next_double();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  // Fisher-Yates from the last element down, j = next_u64() % (i+1)
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(next_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  uint64_t state_;
};

}  // namespace capsnet

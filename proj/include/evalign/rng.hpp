#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <utility>
#include <vector>

namespace evalign {

// Deterministic random source. The mt19937_64 output sequence is pinned by
// the standard, and every variate transform below is done by hand, so a seed
// produces the same stream on any platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // Uniform in [0,1) with 53-bit resolution.
  double uniform() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Index in [0,n). Modulo bias is below 2^-50 for any n we use.
  std::size_t index(std::size_t n) {
    return static_cast<std::size_t>(gen_() % static_cast<std::uint64_t>(n));
  }

  // Standard normal via Box-Muller. No cached spare; two uniforms per draw.
  double gaussian() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double two_pi = 6.283185307179586476925286766559;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
  }

  // In-place Fisher-Yates.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[index(i)]);
    }
  }

 private:
  std::mt19937_64 gen_;
};

// Derives decorrelated per-purpose seeds from one run seed (splitmix64 mix),
// so that e.g. the stage-1 shuffle and the calibration split draw from
// independent streams while the whole run stays reproducible.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Stream ids used across the library.
namespace rng_stream {
inline constexpr std::uint64_t kHeadInit = 1;
inline constexpr std::uint64_t kStage1Shuffle = 2;
inline constexpr std::uint64_t kStage2Sampler = 3;
inline constexpr std::uint64_t kCalibSplit = 4;
inline constexpr std::uint64_t kSynthetic = 5;
}  // namespace rng_stream

}  // namespace evalign

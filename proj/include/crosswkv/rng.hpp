#pragma once

// Self-contained seeded RNG (splitmix64-seeded xoshiro256++, Box-Muller
// normals). Not std::mt19937 + std::normal_distribution: distribution
// implementations differ across standard libraries and seeded runs here must
// be bit-identical everywhere (checkpoints and training-curve tests rely on
// it).

#include <cmath>
#include <cstdint>

#include "crosswkv/tensor.hpp"

namespace cwkv {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    std::uint64_t x = seed;
    for (auto& si : s_) si = splitmix64(x);
    has_spare_ = false;
    spare_ = 0;
  }

  std::uint64_t next_u64() {
    std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0, 1).
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Integer in [0, n).
  std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1, u2;
    do {
      u1 = uniform01();
    } while (u1 <= 0.0);
    u2 = uniform01();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * 3.141592653589793238462643383279502884 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  template <class T>
  void fill_uniform(Tensor<T>& t, double lo, double hi) {
    for (i64 i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(uniform(lo, hi));
  }

  template <class T>
  void fill_normal(Tensor<T>& t, double mean = 0.0, double stddev = 1.0) {
    for (i64 i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(mean + stddev * normal());
  }

 private:
  static std::uint64_t splitmix64(std::uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  static std::uint64_t rotl(std::uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

  std::uint64_t s_[4];
  bool has_spare_;
  double spare_;
};

// Uniform(-b, b) with b = gain * sqrt(6 / (fan_in + fan_out)); returns a
// [fan_in, fan_out] matrix for x.W style projections.
template <class T>
Tensor<T> xavier_uniform(i64 fan_in, i64 fan_out, double gain, Rng& rng) {
  if (fan_in <= 0 || fan_out <= 0)
    throw shape_error("xavier_uniform: fan_in and fan_out must be positive");
  double bound = gain * std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor<T> w(Shape{fan_in, fan_out});
  rng.fill_uniform(w, -bound, bound);
  return w;
}

}  // namespace cwkv

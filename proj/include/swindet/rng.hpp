#pragma once

// Deterministic random streams. Every consumer derives its own stream from the
// root seed plus a tag and index, so results never depend on evaluation order
// and resumed runs replay the exact sequences of the uninterrupted run.
// Distributions are hand-rolled on top of mt19937_64 because the standard
// library pins the engine but not the distributions.

#include <cstdint>
#include <random>
#include <string_view>
#include <utility>

namespace swindet {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(splitmix64(seed)) {}

  // Independent stream for (seed, tag, index).
  static Rng stream(std::uint64_t seed, std::string_view tag, std::uint64_t index = 0) {
    return Rng(splitmix64(seed ^ fnv1a(tag)) ^ splitmix64(index * 0x9e3779b97f4a7c15ull + 1));
  }

  std::uint64_t next_u64() { return eng_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Inclusive bounds, unbiased.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const std::uint64_t n = static_cast<std::uint64_t>(hi - lo) + 1;
    if (n == 0) return static_cast<std::int64_t>(next_u64());  // full 64-bit range
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return lo + static_cast<std::int64_t>(x % n);
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Normal truncated to [-clip, clip] standard deviations, resampled.
  double trunc_normal(double stddev, double clip = 2.0) {
    double z = normal();
    while (z < -clip || z > clip) z = normal();
    return z * stddev;
  }

  bool bernoulli(double p) { return uniform() < p; }

  template <class It>
  void shuffle(It first, It last) {
    const auto n = last - first;
    for (auto i = n - 1; i > 0; --i) {
      const auto j = uniform_int(0, i);
      std::swap(first[i], first[j]);
    }
  }

 private:
  std::mt19937_64 eng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace swindet

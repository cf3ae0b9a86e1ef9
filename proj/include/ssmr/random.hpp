#pragma once

// Seeded random source. std::mt19937_64's output sequence is fixed by the
// standard; the distributions below are written out so that every derived
// value (dataset pixels, patch choices, permutations) is identical across
// standard-library implementations.

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <vector>

namespace ssmr {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n), unbiased.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t v;
    do {
      v = engine_();
    } while (v >= limit);
    return v % n;
  }

  // Standard normal via Box-Muller (one value per call).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  // Poisson sample (Knuth for small means, normal approximation above 64).
  std::int64_t poisson(double mean) {
    if (mean <= 0.0) return 0;
    if (mean > 64.0) {
      const double v = std::round(mean + std::sqrt(mean) * normal());
      return v < 0.0 ? 0 : static_cast<std::int64_t>(v);
    }
    const double limit = std::exp(-mean);
    std::int64_t k = 0;
    double p = uniform();
    while (p > limit) {
      ++k;
      p *= uniform();
    }
    return k;
  }

  template <typename Vec>
  void shuffle(Vec& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Uniformly random permutation of [0, n).
  std::vector<std::int64_t> permutation(std::int64_t n) {
    std::vector<std::int64_t> p(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = i;
    shuffle(p);
    return p;
  }

  // k distinct values from [0, n), in selection order.
  std::vector<std::int64_t> sample(std::int64_t n, std::int64_t k) {
    auto p = permutation(n);
    p.resize(static_cast<std::size_t>(k));
    return p;
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace ssmr

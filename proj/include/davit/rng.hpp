#pragma once

// Counter-based deterministic RNG. Every stream derives from splitmix64 over a
// seeded counter, so a (seed, draw-index) pair maps to the same value on every
// platform. Normal sampling avoids std::log on purpose: libm implementations
// differ between platforms/vendors, which would break bit-exact replay; the
// self-contained ln below uses only IEEE-exact primitives (+,-,*,/, frexp) in
// a fixed evaluation order.

#include <cmath>
#include <cstdint>

#include "tensor.hpp"

namespace davit {

inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// ln(x) for x > 0 via frexp + atanh series, deterministic across platforms.
inline double det_log(double x) {
  if (!(x > 0.0)) throw NumericError("det_log: ln of non-positive value");
  int e = 0;
  double m = std::frexp(x, &e);  // x = m * 2^e, m in [0.5, 1)
  // Pull m toward 1 so the series converges fast: use sqrt(0.5) split.
  if (m < 0.70710678118654752440) {
    m *= 2.0;
    e -= 1;
  }
  const double t = (m - 1.0) / (m + 1.0);
  const double t2 = t * t;
  double term = t;
  double sum = 0.0;
  for (int k = 1; k < 60; k += 2) {
    sum += term / static_cast<double>(k);
    term *= t2;
    if (term < 1e-20 && term > -1e-20) break;
  }
  constexpr double kLn2 = 0.69314718055994530942;
  return 2.0 * sum + static_cast<double>(e) * kLn2;
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() { return splitmix64(state_); }

  // Uniform in [0, 1), 53 bits of mantissa.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n).
  int64_t uniform_int(int64_t n) {
    if (n <= 0) throw ConfigError("Rng::uniform_int: n must be positive");
    return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n));
  }

  // Standard normal via Marsaglia polar; pairs are cached like most polar
  // implementations, consumption order is part of the deterministic stream.
  double normal() {
    if (has_cache_) {
      has_cache_ = false;
      return cache_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double f = std::sqrt(-2.0 * det_log(s) / s);
    cache_ = v * f;
    has_cache_ = true;
    return u * f;
  }

  // Normal rejection-sampled into [-limit, limit] sigma, then scaled.
  double truncated_normal(double stddev, double limit = 2.0) {
    double z;
    do {
      z = normal();
    } while (z < -limit || z > limit);
    return z * stddev;
  }

  template <typename It>
  void shuffle(It first, It last) {
    const int64_t n = static_cast<int64_t>(last - first);
    for (int64_t i = n - 1; i > 0; --i) {
      const int64_t j = uniform_int(i + 1);
      std::swap(first[i], first[j]);
    }
  }

 private:
  uint64_t state_;
  bool has_cache_ = false;
  double cache_ = 0.0;
};

template <typename T>
Tensor<T> randn(Rng& rng, Shape shape, double stddev = 1.0) {
  Tensor<T> t(std::move(shape));
  for (auto& x : t.data) x = static_cast<T>(rng.normal() * stddev);
  return t;
}

template <typename T>
Tensor<T> rand_uniform(Rng& rng, Shape shape, double lo = 0.0, double hi = 1.0) {
  Tensor<T> t(std::move(shape));
  for (auto& x : t.data) x = static_cast<T>(lo + (hi - lo) * rng.uniform());
  return t;
}

template <typename T>
Tensor<T> trunc_normal(Rng& rng, Shape shape, double stddev, double limit = 2.0) {
  Tensor<T> t(std::move(shape));
  for (auto& x : t.data) x = static_cast<T>(rng.truncated_normal(stddev, limit));
  return t;
}

}  // namespace davit

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

namespace mimseq {

namespace detail {

inline uint64_t splitmix64(uint64_t& state) {
  state += 0x9E3779B97F4A7C15ull;
  uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline uint64_t mix64(uint64_t a, uint64_t b) {
  uint64_t s = a;
  uint64_t h = splitmix64(s);
  s = h ^ b;
  return splitmix64(s);
}

}  // namespace detail

// Deterministic random stream keyed by (seed, stream id). Identical keys
// produce identical draw sequences; no std:: distributions are involved,
// so sequences do not depend on the standard library implementation.
class RngStream {
 public:
  explicit RngStream(uint64_t seed, uint64_t stream = 0)
      : state_(detail::mix64(seed, stream)) {}

  uint64_t next_u64() { return detail::splitmix64(state_); }

  // Uniform in [0, 1) with 53 bits of precision.
  double uniform01() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Uniform integer in [0, n). Rejection sampling, no modulo bias.
  long uniform_int(long n) {
    const uint64_t un = uint64_t(n);
    const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return long(x % un);
  }

  bool bernoulli(double p) { return uniform01() < p; }

  // Standard normal via Box-Muller; one draw cached.
  double normal() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    double u1 = uniform01();
    while (u1 <= 0.0) u1 = uniform01();
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    cached_ = r * std::sin(a);
    have_cached_ = true;
    return r * std::cos(a);
  }

  // In-place Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (long i = long(v.size()) - 1; i > 0; --i) {
      const long j = uniform_int(i + 1);
      std::swap(v[size_t(i)], v[size_t(j)]);
    }
  }

  // Derived stream, independent of further draws from this one.
  RngStream fork(uint64_t salt) const {
    RngStream out(0);
    out.state_ = detail::mix64(state_, salt);
    return out;
  }

 private:
  uint64_t state_;
  double cached_ = 0.0;
  bool have_cached_ = false;
};

}  // namespace mimseq

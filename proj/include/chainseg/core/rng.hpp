#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace chainseg {

// xoshiro256** with splitmix64 seeding. Hand-rolled so that streams are
// bit-identical across standard libraries and platforms; the full state is
// trivially serializable for checkpoint round-trips.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) { reseed(seed); }

  void reseed(uint64_t seed) {
    uint64_t x = seed;
    for (auto& s : s_) s = splitmix64(x);
    have_cached_ = false;
    cached_ = 0.0;
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Rejection-free modulo is fine here: n is
  // always tiny relative to 2^64 so the bias is immaterial for data shuffles.
  int64_t uniform_int(int64_t n) {
    return n <= 1 ? 0 : static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n));
  }

  // Standard normal via Box-Muller; the second deviate is cached.
  double normal() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    cached_ = r * std::sin(a);
    have_cached_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <typename It>
  void shuffle(It first, It last) {
    const int64_t n = static_cast<int64_t>(last - first);
    for (int64_t i = n - 1; i > 0; --i) {
      const int64_t j = uniform_int(i + 1);
      std::swap(first[i], first[j]);
    }
  }

  // Stable stream derivation: mixes the parent seed with stream labels so
  // per-sample generators are order-independent.
  static uint64_t mix(uint64_t a, uint64_t b) {
    uint64_t x = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
    return splitmix64(x);
  }

  std::array<uint64_t, 6> save_state() const {
    return {s_[0], s_[1], s_[2], s_[3], have_cached_ ? 1ULL : 0ULL,
            bit_cast_u64(cached_)};
  }

  void load_state(const std::array<uint64_t, 6>& st) {
    s_[0] = st[0];
    s_[1] = st[1];
    s_[2] = st[2];
    s_[3] = st[3];
    have_cached_ = st[4] != 0;
    cached_ = bit_cast_double(st[5]);
  }

 private:
  static uint64_t splitmix64(uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  static uint64_t bit_cast_u64(double d) {
    uint64_t u;
    __builtin_memcpy(&u, &d, 8);
    return u;
  }
  static double bit_cast_double(uint64_t u) {
    double d;
    __builtin_memcpy(&d, &u, 8);
    return d;
  }

  uint64_t s_[4] = {};
  bool have_cached_ = false;
  double cached_ = 0.0;
};

}  // namespace chainseg

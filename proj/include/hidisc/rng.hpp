#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <string_view>
#include <vector>

namespace hidisc {

// Counter-based deterministic RNG. A stream is identified by a seed plus an
// arbitrary list of 64-bit keys (entity indices, iteration counters, tags).
// Identical (seed, keys) always produce the identical sequence, independent
// of any other stream, so parallel workers can draw without coordination.
class StreamRng {
 public:
  explicit StreamRng(std::uint64_t seed) : state_(mix(seed + kGolden)) {}

  StreamRng(std::uint64_t seed, std::initializer_list<std::uint64_t> keys)
      : StreamRng(seed) {
    for (std::uint64_t k : keys) fold(k);
  }

  static std::uint64_t hash_tag(std::string_view tag) {
    std::uint64_t h = 1469598103934665603ull;  // FNV-1a
    for (unsigned char ch : tag) {
      h ^= ch;
      h *= 1099511628211ull;
    }
    return h;
  }

  void fold(std::uint64_t key) { state_ = mix(state_ ^ mix(key + kGolden)); }
  void fold(std::string_view tag) { fold(hash_tag(tag)); }

  std::uint64_t next_u64() {
    state_ += kGolden;
    return mix(state_);
  }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n), n > 0. Fixed-point multiply, no rejection.
  std::uint64_t uniform_int(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Standard normal via Box-Muller; the paired value is cached.
  double normal() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * 3.14159265358979323846 * u2;
    cached_ = r * std::sin(theta);
    have_cached_ = true;
    return r * std::cos(theta);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  static constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ull;

  // splitmix64 finalizer
  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  std::uint64_t state_;
  double cached_ = 0.0;
  bool have_cached_ = false;
};

}  // namespace hidisc

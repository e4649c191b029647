#pragma once

// xoshiro256++ seeded through splitmix64. Streams are reproducible bit-for-bit
// from a 64-bit seed, and split() derives child streams without advancing the
// parent.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

#include "mcdiff/tensor.hpp"

namespace mcdiff {

inline std::uint64_t splitmix64(std::uint64_t& x) {
  std::uint64_t z = (x += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

class Rng {
 public:
  using State = std::array<std::uint64_t, 4>;

  explicit Rng(std::uint64_t seed = 0) {
    std::uint64_t x = seed;
    for (auto& w : s_) w = splitmix64(x);
  }

  static Rng from_state(const State& s) {
    Rng r;
    r.s_ = s;
    return r;
  }

  const State& state() const { return s_; }

  std::uint64_t next() {
    const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n), unbiased (rejection on the top of the range).
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) throw DomainError("uniform_int: empty range");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t v;
    do {
      v = next();
    } while (v >= limit);
    return v % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Child stream keyed by (current state, label).
  Rng split(std::string_view label) const {
    std::uint64_t mix = fnv1a64(label);
    for (int i = 0; i < 4; ++i) mix ^= rotl(s_[i], 13 * i + 7) + 0x9E3779B97F4A7C15ULL * (i + 1);
    std::uint64_t x = mix;
    Rng child;
    for (auto& w : child.s_) w = splitmix64(x);
    return child;
  }

  // Standard normal pair via Box-Muller on two consecutive uniforms.
  std::array<double, 2> normal_pair() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    return {r * std::cos(a), r * std::sin(a)};
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  State s_{};
};

// i.i.d. N(0, 1) tensor. Values are produced in pairs; an odd tail drops the
// second member of its pair.
template <typename T>
Tensor<T> gaussian(Rng& rng, const Shape& shape) {
  Tensor<T> out(shape);
  auto d = out.data();
  std::size_t i = 0;
  for (; i + 1 < d.size(); i += 2) {
    auto [a, b] = rng.normal_pair();
    d[i] = static_cast<T>(a);
    d[i + 1] = static_cast<T>(b);
  }
  if (i < d.size()) d[i] = static_cast<T>(rng.normal_pair()[0]);
  return out;
}

}  // namespace mcdiff

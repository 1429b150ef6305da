#pragma once

// Counter-style keyed random numbers. Every draw is a pure function of its
// key, so outcomes do not depend on thread scheduling or iteration order.
// The arithmetic is spelled out here (rather than using <random>
// distributions) so streams are identical across standard libraries.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace profilebench::rng {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Combines an existing key with another 64-bit component.
constexpr std::uint64_t combine(std::uint64_t key, std::uint64_t part) {
  return splitmix64(key ^ splitmix64(part + 0x632be59bd9b4e019ULL));
}

constexpr std::uint64_t combine(std::uint64_t key, std::string_view part) {
  return combine(key, fnv1a64(part));
}

/// Uniform double in [0, 1) with 53 bits of precision.
constexpr double to_unit(std::uint64_t bits) {
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

/// Sequential generator over a fixed key; draw n is splitmix64(key + n).
class KeyedStream {
 public:
  explicit constexpr KeyedStream(std::uint64_t key) : key_(key) {}

  constexpr std::uint64_t next_u64() { return splitmix64(key_ + 0x9e3779b97f4a7c15ULL * ++counter_); }

  constexpr double uniform() { return to_unit(next_u64()); }

  /// Uniform integer in [0, bound), rejection-sampled to avoid modulo bias.
  constexpr std::uint64_t below(std::uint64_t bound) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % bound;
  }

  /// Standard normal via Box-Muller (one value per call; the sine branch is discarded).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace profilebench::rng

#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>

#include "uecrl/error.hpp"

namespace uecrl {

using Rng = std::mt19937_64;

/// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Derives an independent stream seed from a base seed and a path of
/// integers, e.g. derive_seed(seed, {step, prompt_id, index}).
inline std::uint64_t derive_seed(std::uint64_t base,
                                 std::initializer_list<std::uint64_t> path) noexcept {
  std::uint64_t h = mix64(base);
  for (std::uint64_t v : path) h = mix64(h ^ mix64(v + 0x632be59bd9b4e019ULL));
  return h;
}

/// Uniform double in [0, 1) with 53 random bits; identical on every platform.
inline double uniform01(Rng& rng) {
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  if (!(u >= 0.0 && u < 1.0)) throw InternalError("random stream produced a value outside [0, 1)");
  return u;
}

/// Unbiased integer in [0, n) by rejection; platform independent.
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
  if (n == 0) throw InvalidArgument("uniform_index: empty range");
  const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % n);
  std::uint64_t x = rng();
  while (x >= limit) x = rng();
  return x % n;
}

/// Standard normal via Box-Muller on uniform01.
inline double standard_normal(Rng& rng) {
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

}  // namespace uecrl

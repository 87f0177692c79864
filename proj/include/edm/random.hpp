#pragma once

#include <cstdint>
#include <random>
#include <span>

namespace edm {

using Rng = std::mt19937_64;

/// SplitMix64 finalizer. Used to derive independent substream seeds.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Seed of substream `index` under `base`. Distinct indices give unrelated streams.
constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
  return mix64(mix64(base) ^ mix64(index + 0x632be59bd9b4e019ULL));
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b) {
  return derive_seed(derive_seed(base, a), b);
}

/// Fills `out` with independent N(0, scale^2) draws.
inline void fill_normal(std::span<float> out, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& v : out) v = static_cast<float>(scale * normal(rng));
}

}  // namespace edm

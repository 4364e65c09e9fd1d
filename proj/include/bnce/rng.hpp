#pragma once

#include <cstdint>
#include <random>

namespace bnce {

using Rng = std::mt19937_64;

/// SplitMix64 mix of (seed, stream): one run seed fans out into
/// independent per-component seeds.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

namespace seed_stream {
inline constexpr std::uint64_t kInit = 1;
inline constexpr std::uint64_t kShuffle = 2;
inline constexpr std::uint64_t kNoise = 3;
inline constexpr std::uint64_t kSynthetic = 4;
}  // namespace seed_stream

/// Uniform in [0, 1) from the top 53 bits; identical across standard libraries.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

}  // namespace bnce

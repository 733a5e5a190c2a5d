#pragma once

#include <cstdint>
#include <random>

namespace scale {

using Rng = std::mt19937_64;

// Independent, reproducible generator for a named purpose under a run seed.
// Distinct (seed, stream) pairs yield unrelated sequences, so adding a
// consumer on one stream never shifts the draws seen by another.
inline Rng make_stream(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32),
                    0x5ca1eu};
  return Rng(seq);
}

namespace streams {
inline constexpr std::uint64_t kExtractorInit = 1;
inline constexpr std::uint64_t kHeadInit = 2;
inline constexpr std::uint64_t kGeneratorInit = 3;
inline constexpr std::uint64_t kDiscriminatorInit = 4;
inline constexpr std::uint64_t kBatchOrder = 10;
inline constexpr std::uint64_t kReplay = 11;
inline constexpr std::uint64_t kReservoir = 12;
inline constexpr std::uint64_t kNoise = 13;
inline constexpr std::uint64_t kData = 20;
}  // namespace streams

// Uniform index in [0, n) that does not depend on the standard library's
// distribution implementation.
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
  const std::uint64_t limit = Rng::max() - Rng::max() % n;
  std::uint64_t draw;
  do {
    draw = rng();
  } while (draw >= limit);
  return draw % n;
}

// Uniform double in [0, 1) from the top 53 bits.
inline double uniform_unit(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

}  // namespace scale

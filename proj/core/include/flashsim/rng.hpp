#pragma once

#include <cstdint>
#include <random>

namespace flashsim {

using Rng = std::mt19937_64;

/// Independent random streams spawned from the master seed. Each feature draws
/// from its own stream so enabling one does not shift another's randomness.
enum class Stream : std::uint64_t {
  kInit = 1,
  kMask = 2,
  kPartition = 3,
  kGroups = 4,
  kWarmup = 5,
  kSampling = 6,
  kClient = 7,
  kData = 8,
};

/// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t master, Stream stream, std::uint64_t a = 0,
                                    std::uint64_t b = 0) noexcept {
  std::uint64_t h = mix64(master);
  h = mix64(h ^ static_cast<std::uint64_t>(stream));
  h = mix64(h ^ a);
  h = mix64(h ^ (b * 0x100000001b3ULL));
  return h;
}

inline Rng make_rng(std::uint64_t master, Stream stream, std::uint64_t a = 0, std::uint64_t b = 0) {
  return Rng(derive_seed(master, stream, a, b));
}

}  // namespace flashsim

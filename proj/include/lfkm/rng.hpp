#pragma once

#include <cstdint>

namespace lfkm {

// Deterministic platform-independent generator. std::<random> distributions are
// implementation-defined, which would break bit-identical noise regeneration,
// so this is pinned to splitmix64 with doubles drawn as (x >> 11) * 2^-53.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1)
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // uniform integer in [0, bound)
  std::uint32_t next_below(std::uint32_t bound) {
    return static_cast<std::uint32_t>(
        (static_cast<unsigned __int128>(next_u64()) * bound) >> 64);
  }

 private:
  std::uint64_t state_;
};

constexpr std::uint8_t kPrngSplitMix64 = 1;

// Derives independent sub-streams (noise, init, sampling) from one seed.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag) {
  SplitMix64 g(seed ^ (0x9E3779B97F4A7C15ull * (tag + 1)));
  return g.next_u64();
}

}  // namespace lfkm

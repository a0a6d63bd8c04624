#pragma once

#include <cmath>
#include <cstdint>
#include <utility>

namespace opotomo::rng {

// SplitMix64 step. Used both as a seed mixer and to expand one 64-bit
// seed into a full engine state.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Derives the seed for stream `counter` from a base seed. Streams are
// decorrelated by construction, so ensemble results do not depend on
// which worker runs which trajectory.
inline std::uint64_t counter_mix(std::uint64_t base_seed, std::uint64_t counter) {
  std::uint64_t s = base_seed ^ (counter * 0xd1b54a32d192ed03ULL + 0x2545f4914f6cdd1dULL);
  return splitmix64(s);
}

// xoshiro256++ (Blackman & Vigna). Small state, fast, and fully owned by
// the trajectory that holds it, which keeps parallel runs bit-reproducible.
class Engine {
 public:
  explicit Engine(std::uint64_t seed) {
    std::uint64_t sm = seed;
    for (auto& word : s_) word = splitmix64(sm);
  }

  std::uint64_t next_u64() {
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

  // Uniform double in (0, 1]; never returns 0 so log() below is safe.
  double next_unit() {
    return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
  }

  // One Box-Muller transform: a pair of independent standard normals.
  std::pair<double, double> next_normal_pair() {
    const double u1 = next_unit();
    const double u2 = next_unit();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double phi = 6.283185307179586476925286766559 * u2;
    return {r * std::cos(phi), r * std::sin(phi)};
  }

  double next_normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    auto [a, b] = next_normal_pair();
    spare_ = b;
    have_spare_ = true;
    return a;
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }

  std::uint64_t s_[4]{};
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace opotomo::rng

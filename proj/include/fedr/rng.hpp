#pragma once

#include <cmath>
#include <cstdint>

#include "fedr/logistic.hpp"

namespace fedr {

// Counter-based random numbers: every draw is a pure function of
// (seed, stream, key, lane). No generator state is shared, so results do not
// depend on the order in which draws are requested or on the thread count.
class KeyedRng {
 public:
  explicit KeyedRng(std::uint64_t seed, std::uint64_t domain = 0)
      : base_(mix(seed ^ mix(domain + 0x632be59bd9b4e019ULL))) {}

  std::uint64_t bits(std::uint64_t stream, std::uint64_t key, std::uint64_t lane = 0) const {
    std::uint64_t h = mix(base_ + 0x9e3779b97f4a7c15ULL * (stream + 1));
    h = mix(h ^ (key + 0xd1b54a32d192ed03ULL));
    return mix(h + 0x94d049bb133111ebULL * (lane + 1));
  }

  // Uniform on the open interval (0, 1).
  double uniform(std::uint64_t stream, std::uint64_t key, std::uint64_t lane = 0) const {
    return (static_cast<double>(bits(stream, key, lane) >> 11) + 0.5) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller on two lanes of the same key.
  double normal(std::uint64_t stream, std::uint64_t key) const {
    const double u1 = uniform(stream, key, 0);
    const double u2 = uniform(stream, key, 1);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
  }

  static std::uint64_t pair_key(std::uint64_t i, std::uint64_t j) { return (i << 32) | (j & 0xffffffffULL); }

 private:
  // SplitMix64 finalizer.
  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t base_;
};

// Domains keep bootstrap multipliers and simulated errors on disjoint streams.
inline constexpr std::uint64_t kDomainBootstrap = 1;
inline constexpr std::uint64_t kDomainSimulation = 2;
inline constexpr std::uint64_t kDomainCalibration = 3;

}  // namespace fedr

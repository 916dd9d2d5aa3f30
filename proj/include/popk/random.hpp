#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace popk {

// Named stream domains. A stream is identified by (seed, domain, index) so
// that subject i of replicate r always sees the same draws regardless of how
// work is scheduled.
enum class StreamDomain : std::uint32_t {
  subject = 1,      // per-subject draws in a simulated dataset
  allocation = 2,   // group allocation of a simulated design
  bootstrap = 3,    // subject resampling of bootstrap replicate r
  vpc = 4,          // seed of VPC replicate r
  replicate = 5,    // seed of a generic Monte Carlo replicate r
};

using Engine = std::mt19937_64;

// Splitting rule: the engine is seeded through std::seed_seq with the 32-bit
// words of (seed, domain, index).
inline Engine make_stream(std::uint64_t seed, StreamDomain domain, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(domain), static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32)};
  return Engine(seq);
}

// Child seed for replicate `index`, used when a replicate runs a whole
// simulation with its own per-subject streams.
inline std::uint64_t derive_seed(std::uint64_t seed, StreamDomain domain, std::uint64_t index) {
  Engine e = make_stream(seed, domain, index);
  return e();
}

// Draws are made with these helpers rather than the std distributions so
// the sequence does not depend on the standard library implementation.
inline double uniform01(Engine& e) {
  return static_cast<double>(e() >> 11) * 0x1.0p-53;
}

inline double standard_normal(Engine& e) {
  // Box-Muller, one variate per call.
  double u1 = uniform01(e);
  while (u1 <= 0.0) u1 = uniform01(e);
  const double u2 = uniform01(e);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

inline std::uint64_t uniform_index(Engine& e, std::uint64_t n) {
  // Rejection sampling for an unbiased index in [0, n).
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t r = e();
  while (r >= limit) r = e();
  return r % n;
}

}  // namespace popk

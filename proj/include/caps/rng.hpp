#pragma once

#include <cmath>
#include <cstdint>

#include "caps/common.hpp"

namespace caps {

// Splittable counter-free PRNG. A stream is identified by (seed, stream_id);
// the internal state is derived from both with splitmix64 so distinct stream
// ids give statistically independent sequences. Stable within one build of
// this library; no cross-implementation bit compatibility is promised.
class Rng {
 public:
  Rng(uint64_t seed, uint64_t stream_id = 0)
      : seed_(seed), stream_id_(stream_id) {
    state_ = mix(mix(seed ^ 0x9e3779b97f4a7c15ull) ^ mix(stream_id ^ 0xbf58476d1ce4e5b9ull));
    // burn-in so low-entropy seeds decorrelate
    next_u64();
    next_u64();
  }

  uint64_t seed() const { return seed_; }
  uint64_t stream_id() const { return stream_id_; }

  // Child stream: deterministic function of (seed, stream_id, key).
  Rng split(uint64_t key) const {
    return Rng(seed_, mix(stream_id_ ^ mix(key ^ 0x94d049bb133111ebull)));
  }

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    return mix(state_);
  }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Integer in [0, n).
  uint64_t uniform_index(uint64_t n) {
    // modulo bias is negligible for n << 2^64
    return next_u64() % n;
  }

  // Standard normal via Box-Muller (one value per call, cache the pair).
  double normal() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * kPi * u2;
    cached_ = r * std::sin(a);
    have_cached_ = true;
    return r * std::cos(a);
  }

 private:
  static uint64_t mix(uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  uint64_t seed_;
  uint64_t stream_id_;
  uint64_t state_;
  bool have_cached_ = false;
  double cached_ = 0.0;
};

}  // namespace caps

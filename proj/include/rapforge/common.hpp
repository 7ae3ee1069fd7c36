#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace rapforge {

// ---------------------------------------------------------------------------
// Error hierarchy. Every failure mode surfaced by the toolkit maps to one of
// these categories so callers (and the CLI) can report precise causes.
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

class RangeError : public Error {
public:
  using Error::Error;
};
class ShapeError : public Error {
public:
  using Error::Error;
};
class FormatError : public Error {
public:
  using Error::Error;
};
class PairingError : public Error {
public:
  using Error::Error;
};
class ParameterError : public Error {
public:
  using Error::Error;
};
class PlacementError : public Error {
public:
  using Error::Error;
};
class ConfigurationError : public Error {
public:
  using Error::Error;
};
class CapabilityError : public Error {
public:
  using Error::Error;
};
class DegenerateObjectiveError : public Error {
public:
  using Error::Error;
};
class IoError : public Error {
public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Deterministic random number generation. All stochastic behavior in the
// toolkit flows from one root seed which is split into independent streams,
// so runs are reproducible regardless of thread count or platform.
// ---------------------------------------------------------------------------

inline uint64_t splitmix64(uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline uint64_t hash_tag(const std::string& tag) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : tag) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// xoshiro256++ seeded through splitmix64. Hand-rolled draw helpers are used
// instead of <random> distributions so sequences are stable across standard
// library implementations.
class Rng {
public:
  explicit Rng(uint64_t seed) {
    uint64_t s = seed;
    for (auto& w : s_) w = splitmix64(s);
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi] inclusive.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    if (hi <= lo) return lo;
    const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    // Rejection sampling keeps the draw exactly uniform.
    const uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return lo + static_cast<int64_t>(x % span);
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Marsaglia polar normal draw.
  double normal(double mean = 0.0, double stddev = 1.0) {
    double u, v, s;
    do {
      u = uniform(-1.0, 1.0);
      v = uniform(-1.0, 1.0);
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double m = std::sqrt(-2.0 * std::log(s) / s);
    return mean + stddev * u * m;
  }

  // Derive an independent stream for a named subsystem.
  Rng split(const std::string& tag) const {
    uint64_t s = s_[0] ^ hash_tag(tag);
    return Rng(splitmix64(s));
  }
  Rng split(uint64_t salt) const {
    uint64_t s = s_[0] ^ (salt * 0x9e3779b97f4a7c15ULL + 0x7f4a7c15ULL);
    return Rng(splitmix64(s));
  }

private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  uint64_t s_[4] = {};
};

// Seed for a subsystem derived from the root seed.
inline uint64_t subsystem_seed(uint64_t root, const std::string& tag) {
  uint64_t s = root ^ hash_tag(tag);
  return splitmix64(s);
}

// ---------------------------------------------------------------------------
// Worker pool sizing. RAPFORGE_THREADS caps parallelism across the toolkit.
// ---------------------------------------------------------------------------

int worker_count();

// Runs fn(worker, index) for index in [0, n). Results that depend on order
// must be written to per-index slots by the caller; the pool makes no
// ordering guarantees beyond completion.
void parallel_for(int n, const std::function<void(int worker, int index)>& fn);

}  // namespace rapforge

#pragma once

// Counter-based random streams with a fixed, documented transform so that a
// (seed, stream) pair yields the same numbers on every platform:
//
//   key      = mix64(seed ^ mix64(stream + 0x632BE59BD9B4E019))
//   u64[i]   = mix64(key + (i + 1) * 0x9E3779B97F4A7C15)
//   uniform  = ((u64 >> 11) + 1) * 2^-53                    in (0, 1]
//   gaussian = Box-Muller on two uniforms; the sine branch is cached and
//              returned by the next call.
//
// mix64 is the SplitMix64 finalizer (constants 0xBF58476D1CE4E5B9,
// 0x94D049BB133111EB).

#include <cmath>
#include <cstdint>
#include <numbers>

namespace dose3 {

constexpr std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

class RngState {
 public:
  explicit RngState(std::uint64_t seed = 0, std::uint64_t stream = 0)
      : seed_(seed), stream_(stream), key_(mix64(seed ^ mix64(stream + 0x632BE59BD9B4E019ULL))) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }
  std::uint64_t counter() const { return counter_; }

  /// Independent child stream; the same (parent, id) always gives the same child.
  RngState split(std::uint64_t id) const { return RngState(seed_, mix64(stream_ * 0xD1B54A32D192ED03ULL + id + 1)); }

  std::uint64_t next_u64() {
    ++counter_;
    return mix64(key_ + counter_ * 0x9E3779B97F4A7C15ULL);
  }

  double uniform() { return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53; }

  double gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double phase = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(phase);
    has_spare_ = true;
    return r * std::cos(phase);
  }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : static_cast<std::uint64_t>(uniform() * n) % n; }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace dose3

#pragma once

#include <cstdint>

namespace tele {

std::uint64_t mix64(std::uint64_t x);

/// Counter-based generator: draw n of a stream is a pure function of
/// (seed, n), so results are identical on every platform and streams can be
/// split without sharing state.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed = 0, std::uint64_t counter = 0)
      : seed_(seed), key_(mix64(seed)), counter_(counter) {}

  std::uint64_t next_u64();
  /// Uniform on [0, 1) with 53 random bits.
  double uniform();
  /// Standard normal via Box-Muller; consumes two draws.
  double normal();
  /// Independent child stream; does not advance this one.
  RngStream split(std::uint64_t stream) const;

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t seed_;
  std::uint64_t key_;
  std::uint64_t counter_;
};

}  // namespace tele

#pragma once

#include <array>
#include <cstdint>

namespace msae {

// xoshiro256** (Blackman & Vigna) seeded through splitmix64.
//
// Every derived quantity (uniform doubles, normals, forks) is defined here
// rather than through <random> distributions, whose outputs differ between
// standard library implementations.
class Rng {
 public:
  using State = std::array<std::uint64_t, 4>;

  explicit Rng(std::uint64_t seed = 0);

  static Rng from_state(std::uint64_t seed, const State& state);

  std::uint64_t next_u64();
  // Uniform on [0, 1) with 53 bits of resolution.
  double uniform();
  // Uniform on (0, 1].
  double uniform_open_closed() { return 1.0 - uniform(); }
  // Standard normal via Box-Muller; no cached second value, so the stream
  // position is a function of the number of calls alone.
  double normal();
  // Uniform integer in [0, n); n must be positive. Lemire-style rejection.
  std::uint64_t below(std::uint64_t n);

  // Independent, reproducible substream. Depends only on the original seed
  // and child_id, never on how far this generator has advanced.
  Rng fork(std::uint64_t child_id) const;

  std::uint64_t seed() const { return seed_; }
  const State& state() const { return s_; }

  friend bool operator==(const Rng&, const Rng&) = default;

 private:
  std::uint64_t seed_;
  State s_;
};

std::uint64_t splitmix64(std::uint64_t& x);

}  // namespace msae

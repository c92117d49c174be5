#pragma once

#include <cstdint>
#include <random>

namespace groklab {

/// Offsets mixed into a run seed to obtain independent streams. Changing
/// one facet of a run (e.g. the split) leaves the others untouched.
enum class Stream : std::uint64_t {
  split = 0x73706c6974ULL,
  labels = 0x6c6162656cULL,
  init = 0x696e6974ULL,
  gradcheck = 0x6772616463ULL,
};

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, Stream stream,
                                    std::uint64_t salt = 0) {
  return splitmix64(splitmix64(seed ^ static_cast<std::uint64_t>(stream)) + salt);
}

/// mt19937_64 with hand-written distributions. The standard library leaves
/// the algorithms of std::*_distribution unspecified, so datasets and
/// initializations would differ between toolchains otherwise.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n), rejection-sampled so there is no modulo bias.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = (~std::uint64_t{0}) - (~std::uint64_t{0}) % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  /// Standard normal via the Marsaglia polar method.
  double normal();

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace groklab

#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace fstk {

// splitmix64 finalizer, used to derive independent sub-stream seeds.
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Deterministic RNG. The engine is std::mt19937_64 (bit-exact by the
// standard); the distribution transforms are written out here instead of
// using std::*_distribution, whose output sequences are
// implementation-defined and would break byte-identical artifacts across
// toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : eng_(mix64(seed)) {}

  // Independent stream derived from (seed, index); member-level sampling
  // uses one stream per index so results do not depend on scheduling.
  static Rng stream(std::uint64_t seed, std::uint64_t index) {
    return Rng(mix64(seed ^ mix64(index + 1)));
  }

  std::uint64_t next_u64() { return eng_(); }

  // Uniform on [0,1) with 53 random bits.
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  // Uniform on (0,1], handy when a log() follows.
  double uniform_pos() { return 1.0 - uniform(); }

  // Standard normal via Box-Muller; the spare draw is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform_pos();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  bool bernoulli(double p) { return uniform() < p; }

  // Integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    // modulo bias is irrelevant at the ranges used here (n << 2^64)
    return eng_() % n;
  }

 private:
  std::mt19937_64 eng_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace fstk

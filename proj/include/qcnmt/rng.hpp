#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace qcnmt {

// Deterministic RNG used everywhere randomness is needed. Distributions are
// hand-rolled on top of the raw mt19937_64 stream so the byte-level results
// do not depend on the standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  // [0, 1), 53 bits.
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller, one draw per call (the spare is discarded to keep the state
  // a pure function of the call count).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // Inclusive bounds.
  int uniform_int(int lo, int hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(eng_() % span);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(eng_() % i);
      std::swap(v[i - 1], v[j]);
    }
  }

  // Independent child stream, stable under changes to how much the parent
  // has been consumed before the fork.
  Rng fork(std::uint64_t tag) const {
    return Rng(seed_mix(tag));
  }

 private:
  std::uint64_t seed_mix(std::uint64_t tag) const {
    std::mt19937_64 probe = eng_;
    std::uint64_t x = probe() ^ (0x9e3779b97f4a7c15ULL * (tag + 1));
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ULL;
    x ^= x >> 27;
    return x;
  }

  std::mt19937_64 eng_;
};

}  // namespace qcnmt

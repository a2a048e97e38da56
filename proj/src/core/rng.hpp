#pragma once

#include <cmath>
#include <cstdint>

namespace punet {

// SplitMix64. Small, fast, and bit-stable across platforms, which is what the
// determinism guarantees in this project hinge on. Streams for independent
// tasks (scenes, epochs, parameter init) are derived by hashing a label into
// the seed rather than by sharing one sequential generator.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 bits of mantissa.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; one value per call, no cached spare, so the stream stays a
  // pure function of the call index.
  double normal(double mean = 0.0, double stddev = 1.0) {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(2.0 * M_PI * u2);
  }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

 private:
  std::uint64_t state_;
};

// Derives an independent seed from a base seed and a stream label. Used so
// that e.g. scene k's randomness never depends on how many scenes were
// generated before it.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  Rng mix(base ^ (0x6a09e667f3bcc909ULL + stream * 0x9e3779b97f4a7c15ULL));
  return mix.next_u64();
}

template <typename Seq>
void shuffle_inplace(Seq& seq, Rng& rng) {
  for (std::size_t i = seq.size(); i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(rng.below(i));
    std::swap(seq[i - 1], seq[j]);
  }
}

}  // namespace punet

#pragma once

#include <cstdint>
#include <vector>

namespace flowvi {

// Deterministic random stream (xoshiro256++ seeded through splitmix64).
// Hand-rolled rather than <random> distributions so that sequences are
// bit-identical across compilers and standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();

  // Uniform on [0, 1).
  double uniform();

  // Uniform on [lo, hi].
  long uniform_int(long lo, long hi);

  // Standard normal via Box-Muller (caches the spare deviate).
  double normal();

  std::vector<double> normal_vec(std::size_t n);

  // Derive an independent child stream; advances this stream by one draw.
  Rng fork();

  // Fisher-Yates shuffle of [0, n) indices.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    if (v.size() < 2) return;
    for (std::size_t i = v.size() - 1; i > 0; --i) {
      const long j = uniform_int(0, static_cast<long>(i));
      std::swap(v[i], v[static_cast<std::size_t>(j)]);
    }
  }

 private:
  std::uint64_t s_[4];
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace flowvi

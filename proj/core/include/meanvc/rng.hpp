#pragma once

#include <cmath>
#include <cstdint>

#include "meanvc/tensor.hpp"

namespace meanvc {

// splitmix64 step; also used to derive independent substreams from a seed.
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  return mix64(seed ^ (0x632be59bd9b4e019ULL * (stream + 1)));
}

// Small deterministic generator. Draw counts are fixed per call so parallel
// substreams derived from the same seed never interleave.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0,1) with 53 bits.
  double u01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in (0,1], safe for log().
  double u01_open() { return 1.0 - u01(); }

  // Box-Muller; two uniforms per draw, no caching.
  double normal() {
    const double u1 = u01_open();
    const double u2 = u01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  std::uint64_t uniform_int(std::uint64_t n) { return next_u64() % n; }

  Tensor normal_tensor(std::vector<std::size_t> shape, double stddev = 1.0) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = stddev * normal();
    return t;
  }

  // Truncated normal at 2 sigma, the usual projection init.
  Tensor trunc_normal_tensor(std::vector<std::size_t> shape, double stddev) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) {
      double v = normal();
      while (std::fabs(v) > 2.0) v = normal();
      t[i] = stddev * v;
    }
    return t;
  }

 private:
  std::uint64_t state_;
};

}  // namespace meanvc

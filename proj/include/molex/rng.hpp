// Copyright 2026 The MoLEx Authors
// SPDX-License-Identifier: Apache-2.0
//
// Counter-based generator. Output k of a stream with seed s is
//   mix64(s + (k + 1) * 0x9E3779B97F4A7C15)
// where mix64 is the SplitMix64 finalizer. Uniform doubles take the top 53
// bits; Gaussians use Box-Muller (cosine branch only, two draws per sample),
// so any implementation holding (seed, counter) reproduces the stream.

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <utility>
#include <vector>

#include "molex/numerics.hpp"

namespace molex {

inline constexpr std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64() {
    ++counter_;
    return mix64(seed_ + counter_ * 0x9E3779B97F4A7C15ULL);
  }

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n). Modulo bias is below 2^-40 for the n used here.
  std::size_t uniform_int(std::size_t n) { return static_cast<std::size_t>(next_u64() % n); }

  double gaussian() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double gaussian(double mean, double stddev) { return mean + stddev * gaussian(); }

  // Independent child stream; depends only on (seed, stream_id).
  Rng fork(std::uint64_t stream_id) const {
    return Rng(mix64(seed_ ^ mix64(stream_id + 0x632BE59BD9B4E019ULL)));
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = uniform_int(i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

inline Matrix gaussian_matrix(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  Matrix m(rows, cols);
  for (double& v : m.data()) v = stddev * rng.gaussian();
  return m;
}

inline Matrix uniform_matrix(std::size_t rows, std::size_t cols, double lo, double hi, Rng& rng) {
  Matrix m(rows, cols);
  for (double& v : m.data()) v = rng.uniform(lo, hi);
  return m;
}

}  // namespace molex

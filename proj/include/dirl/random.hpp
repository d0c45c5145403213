#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

#include "dirl/tensor.hpp"

namespace dirl {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Stable seed for a sub-stream, e.g. derive_seed(master, {bag, crop}).
inline std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = splitmix64(master);
  for (std::uint64_t p : parts) h = splitmix64(h ^ splitmix64(p + 0x632be59bd9b4e019ULL));
  return h;
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform(double lo = 0.0, double hi = 1.0) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  double normal(double mean = 0.0, double stddev = 1.0) { return std::normal_distribution<double>(mean, stddev)(engine_); }
  std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_); }
  int poisson(double mean) { return mean > 0.0 ? std::poisson_distribution<int>(mean)(engine_) : 0; }
  bool bernoulli(double p) { return uniform() < p; }

  /// Normal truncated to [-2 std, 2 std] by rejection.
  double truncated_normal(double stddev) {
    for (;;) {
      double v = normal(0.0, stddev);
      if (std::abs(v) <= 2.0 * stddev) return v;
    }
  }

  Tensor truncated_normal_tensor(Shape shape, double stddev) {
    Tensor t(std::move(shape));
    for (double& v : t.storage()) v = truncated_normal(stddev);
    return t;
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace dirl

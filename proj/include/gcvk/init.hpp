#pragma once

#include <cstdint>
#include <random>

#include "gcvk/tensor.hpp"

namespace gcvk {

// Seeded generator for weight init and synthetic data. Same seed, same
// sequence of draws, so same weights bit-for-bit.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  // Tensor draws return zeros without consuming the stream. Used to build
  // models whose structure (shapes, counts) is needed but not their values.
  static Rng shape_only() {
    Rng r(0);
    r.shape_only_ = true;
    return r;
  }
  bool is_shape_only() const { return shape_only_; }

  double uniform(double lo = 0.0, double hi = 1.0);
  double normal(double mean = 0.0, double std = 1.0);
  // Normal draw redrawn until it lies within [mean - 2 std, mean + 2 std].
  double trunc_normal(double std);
  std::uint64_t next() { return engine_(); }

  Tensor randn(const Shape& shape, DType dtype, double std = 1.0);
  Tensor trunc_normal(const Shape& shape, DType dtype, double std);
  Tensor uniform(const Shape& shape, DType dtype, double lo, double hi);

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> standard_{0.0, 1.0};
  bool shape_only_ = false;
};

}  // namespace gcvk

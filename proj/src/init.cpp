#include "gcvk/init.hpp"

#include <cmath>

namespace gcvk {

double Rng::uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }

double Rng::normal(double mean, double std) { return mean + std * standard_(engine_); }

double Rng::trunc_normal(double std) {
  for (;;) {
    const double v = normal(0.0, 1.0);
    if (std::abs(v) <= 2.0) return v * std;
  }
}

Tensor Rng::randn(const Shape& shape, DType dtype, double std) {
  if (shape_only_) return Tensor::zeros(shape, dtype);
  std::vector<double> v(static_cast<std::size_t>(numel_of(shape)));
  for (auto& e : v) e = normal(0.0, std);
  return Tensor::from_doubles(shape, v, dtype);
}

Tensor Rng::trunc_normal(const Shape& shape, DType dtype, double std) {
  if (shape_only_) return Tensor::zeros(shape, dtype);
  std::vector<double> v(static_cast<std::size_t>(numel_of(shape)));
  for (auto& e : v) e = trunc_normal(std);
  return Tensor::from_doubles(shape, v, dtype);
}

Tensor Rng::uniform(const Shape& shape, DType dtype, double lo, double hi) {
  if (shape_only_) return Tensor::zeros(shape, dtype);
  std::vector<double> v(static_cast<std::size_t>(numel_of(shape)));
  for (auto& e : v) e = uniform(lo, hi);
  return Tensor::from_doubles(shape, v, dtype);
}

}  // namespace gcvk

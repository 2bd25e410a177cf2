#include "gcvk/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace gcvk {

const char* to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::usage: return "usage error";
    case ErrorKind::config: return "config error";
    case ErrorKind::shape: return "dimension error";
    case ErrorKind::layout: return "layout error";
    case ErrorKind::numeric: return "numeric error";
    case ErrorKind::domain: return "domain error";
    case ErrorKind::format: return "format error";
    case ErrorKind::unsupported: return "unsupported mode";
  }
  return "error";
}

const char* to_string(DType dtype) noexcept { return dtype == DType::f32 ? "f32" : "f64"; }

DType parse_dtype(const std::string& name) {
  if (name == "f32" || name == "float32") return DType::f32;
  if (name == "f64" || name == "float64") return DType::f64;
  fail(ErrorKind::usage, "unknown dtype '" + name + "' (expected f32 or f64)");
}

std::int64_t numel_of(const Shape& shape) {
  std::int64_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

void Tensor::check_shape(const Shape& shape, std::int64_t count) {
  for (auto e : shape) {
    require(e >= 1, ErrorKind::shape, "tensor extents must be >= 1, got " + shape_str(shape));
  }
  require(numel_of(shape) == count, ErrorKind::shape,
          "shape " + shape_str(shape) + " does not match " + std::to_string(count) + " values");
}

Tensor Tensor::from_doubles(Shape shape, const std::vector<double>& values, DType dtype) {
  if (dtype == DType::f64) return from<double>(std::move(shape), values);
  return from<float>(std::move(shape), std::vector<float>(values.begin(), values.end()));
}

Tensor Tensor::zeros(Shape shape, DType dtype) { return full(std::move(shape), 0.0, dtype); }

Tensor Tensor::full(Shape shape, double value, DType dtype) {
  const auto n = static_cast<std::size_t>(numel_of(shape));
  return dispatch(dtype, [&]<typename T>() {
    return from<T>(std::move(shape), std::vector<T>(n, static_cast<T>(value)));
  });
}

std::int64_t Tensor::dim(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  require(axis >= 0 && axis < r, ErrorKind::shape,
          "axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape()));
  return impl_->shape[static_cast<std::size_t>(axis)];
}

std::int64_t Tensor::numel() const { return numel_of(impl_->shape); }

double Tensor::at(std::int64_t i) const {
  return dispatch(dtype(), [&]<typename T>() { return static_cast<double>(data<T>()[static_cast<std::size_t>(i)]); });
}

double Tensor::item() const {
  require(numel() == 1, ErrorKind::shape, "item() needs a single element, shape is " + shape_str(shape()));
  return at(0);
}

std::vector<double> Tensor::to_doubles() const {
  return dispatch(dtype(), [&]<typename T>() {
    auto d = data<T>();
    return std::vector<double>(d.begin(), d.end());
  });
}

Tensor Tensor::to(DType target) const {
  if (target == dtype()) return *this;
  return from_doubles(shape(), to_doubles(), target);
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.dtype() != b.dtype()) return false;
  return dispatch(a.dtype(), [&]<typename T>() {
    auto x = a.data<T>();
    auto y = b.data<T>();
    return std::memcmp(x.data(), y.data(), x.size_bytes()) == 0;
  });
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), ErrorKind::shape,
          "max_abs_diff shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  double m = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.at(i) - b.at(i)));
  return m;
}

}  // namespace gcvk

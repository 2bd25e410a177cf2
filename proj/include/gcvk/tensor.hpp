#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "gcvk/error.hpp"

namespace gcvk {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

const char* to_string(DType dtype) noexcept;
DType parse_dtype(const std::string& name);

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

using Shape = std::vector<std::int64_t>;

std::int64_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

// Calls fn.template operator()<T>() with T = float or double for dtype.
template <typename Fn>
decltype(auto) dispatch(DType dtype, Fn&& fn) {
  if (dtype == DType::f32) return fn.template operator()<float>();
  return fn.template operator()<double>();
}

struct TensorImpl {
  Shape shape;
  DType dtype;
  std::variant<std::vector<float>, std::vector<double>> storage;
};

// Immutable dense row-major array. Copies share the underlying buffer; every
// operation produces a new buffer, so a Tensor never changes after creation.
class Tensor {
 public:
  Tensor() = default;

  template <typename T>
  static Tensor from(Shape shape, std::vector<T> values) {
    check_shape(shape, static_cast<std::int64_t>(values.size()));
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->dtype = dtype_of<T>();
    impl->storage = std::move(values);
    return Tensor(std::move(impl));
  }

  static Tensor from_doubles(Shape shape, const std::vector<double>& values, DType dtype);
  static Tensor zeros(Shape shape, DType dtype);
  static Tensor full(Shape shape, double value, DType dtype);
  static Tensor scalar(double value, DType dtype) { return full({}, value, dtype); }

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::int64_t dim(int axis) const;
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  std::int64_t numel() const;
  DType dtype() const { return impl_->dtype; }

  template <typename T>
  std::span<const T> data() const {
    const auto* vec = std::get_if<std::vector<T>>(&impl_->storage);
    require(vec != nullptr, ErrorKind::usage,
            std::string("tensor dtype is ") + to_string(dtype()) + ", requested other view");
    return *vec;
  }

  double at(std::int64_t flat_index) const;
  double item() const;
  std::vector<double> to_doubles() const;
  Tensor to(DType dtype) const;

  // Identity of the underlying buffer; used by the tape to key gradients.
  const TensorImpl* id() const noexcept { return impl_.get(); }

 private:
  explicit Tensor(std::shared_ptr<const TensorImpl> impl) : impl_(std::move(impl)) {}
  static void check_shape(const Shape& shape, std::int64_t count);

  std::shared_ptr<const TensorImpl> impl_;
};

bool bit_equal(const Tensor& a, const Tensor& b);
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace gcvk

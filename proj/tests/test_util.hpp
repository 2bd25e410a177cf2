#pragma once

#include <gtest/gtest.h>

#include <functional>
#include <vector>

#include "gcvk/error.hpp"
#include "gcvk/init.hpp"
#include "gcvk/tensor.hpp"

namespace testutil {

inline gcvk::Tensor randn(const gcvk::Shape& shape, std::uint64_t seed, double std = 1.0,
                          gcvk::DType dtype = gcvk::DType::f64) {
  gcvk::Rng rng(seed);
  return rng.randn(shape, dtype, std);
}

inline gcvk::Tensor t64(const gcvk::Shape& shape, const std::vector<double>& v) {
  return gcvk::Tensor::from_doubles(shape, v, gcvk::DType::f64);
}

// Runs f and reports the ErrorKind it threw; fails the test if nothing was thrown.
inline gcvk::ErrorKind error_kind(const std::function<void()>& f) {
  try {
    f();
  } catch (const gcvk::Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected a gcvk::Error";
  return gcvk::ErrorKind::unsupported;
}

inline std::string error_message(const std::function<void()>& f) {
  try {
    f();
  } catch (const gcvk::Error& e) {
    return e.what();
  }
  ADD_FAILURE() << "expected a gcvk::Error";
  return {};
}

}  // namespace testutil

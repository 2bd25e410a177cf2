#pragma once

#include <functional>
#include <string>

#include "gcvk/init.hpp"
#include "gcvk/ops.hpp"
#include "gcvk/tensor.hpp"

namespace gcvk {

// Visitor over named parameter slots. Slots are handles, so a visitor may
// replace a tensor (SGD step, weights import, gradcheck perturbation).
using ParamFn = std::function<void(const std::string& name, Tensor& value)>;

std::string join_name(const std::string& prefix, const std::string& leaf);

struct LinearParams {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out] or undefined

  static LinearParams init(std::int64_t in, std::int64_t out, DType dtype, Rng& rng, bool with_bias = true);
  Tensor operator()(const Tensor& x) const { return ops::linear(x, weight, bias); }
  std::int64_t in_features() const { return weight.dim(1); }
  std::int64_t out_features() const { return weight.dim(0); }
  void visit(const std::string& prefix, const ParamFn& fn);
};

struct Conv2dParams {
  Tensor weight;  // [Cout, Cin/groups, kh, kw]
  Tensor bias;    // [Cout] or undefined
  ops::Conv2dOptions opt;

  // Kaiming-normal weights (std sqrt(2 / fan_in)), zero bias.
  static Conv2dParams init(std::int64_t cin, std::int64_t cout, int kernel, const ops::Conv2dOptions& opt,
                           DType dtype, Rng& rng, bool with_bias = true);
  Tensor operator()(const Tensor& x) const { return ops::conv2d(x, weight, bias, opt); }
  void visit(const std::string& prefix, const ParamFn& fn);
};

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;
  double eps = 1e-5;

  static LayerNormParams init(std::int64_t channels, DType dtype);
  // Normalizes over the last axis.
  Tensor operator()(const Tensor& x) const { return ops::layernorm(x, gamma, beta, eps); }
  // Normalizes [B, C, H, W] over C.
  Tensor channels(const Tensor& x) const;
  void visit(const std::string& prefix, const ParamFn& fn);
};

// Per-channel affine on [B, C, H, W]; inference-form batch norm with unit
// running variance and zero running mean folded in.
struct ChannelAffineParams {
  Tensor gamma;
  Tensor beta;

  static ChannelAffineParams init(std::int64_t channels, DType dtype);
  Tensor operator()(const Tensor& x) const;
  void visit(const std::string& prefix, const ParamFn& fn);
};

// Linear(C, rC) -> GELU -> Linear(rC, C).
struct MlpParams {
  LinearParams fc1;
  LinearParams fc2;

  static MlpParams init(std::int64_t dim, std::int64_t hidden, DType dtype, Rng& rng);
  Tensor operator()(const Tensor& x) const { return fc2(ops::gelu(fc1(x))); }
  void visit(const std::string& prefix, const ParamFn& fn);
};

// Number of scalars reachable through visit().
template <typename P>
std::int64_t param_count(P& params) {
  std::int64_t n = 0;
  params.visit("", [&](const std::string&, Tensor& t) {
    if (t.defined()) n += t.numel();
  });
  return n;
}

}  // namespace gcvk

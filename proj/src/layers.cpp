#include "gcvk/layers.hpp"

#include <cmath>

namespace gcvk {

std::string join_name(const std::string& prefix, const std::string& leaf) {
  return prefix.empty() ? leaf : prefix + "." + leaf;
}

LinearParams LinearParams::init(std::int64_t in, std::int64_t out, DType dtype, Rng& rng, bool with_bias) {
  LinearParams p;
  p.weight = rng.trunc_normal({out, in}, dtype, 0.02);
  if (with_bias) p.bias = Tensor::zeros({out}, dtype);
  return p;
}

void LinearParams::visit(const std::string& prefix, const ParamFn& fn) {
  fn(join_name(prefix, "weight"), weight);
  if (bias.defined()) fn(join_name(prefix, "bias"), bias);
}

Conv2dParams Conv2dParams::init(std::int64_t cin, std::int64_t cout, int kernel, const ops::Conv2dOptions& opt,
                                DType dtype, Rng& rng, bool with_bias) {
  Conv2dParams p;
  p.opt = opt;
  const std::int64_t cin_g = cin / opt.groups;
  const double fan_in = static_cast<double>(cin_g * kernel * kernel);
  p.weight = rng.randn({cout, cin_g, kernel, kernel}, dtype, std::sqrt(2.0 / fan_in));
  if (with_bias) p.bias = Tensor::zeros({cout}, dtype);
  return p;
}

void Conv2dParams::visit(const std::string& prefix, const ParamFn& fn) {
  fn(join_name(prefix, "weight"), weight);
  if (bias.defined()) fn(join_name(prefix, "bias"), bias);
}

LayerNormParams LayerNormParams::init(std::int64_t channels, DType dtype) {
  return LayerNormParams{Tensor::full({channels}, 1.0, dtype), Tensor::zeros({channels}, dtype)};
}

Tensor LayerNormParams::channels(const Tensor& x) const {
  require(x.rank() == 4, ErrorKind::shape, "channel layernorm expects [B,C,H,W], got " + shape_str(x.shape()));
  return ops::permute((*this)(ops::permute(x, {0, 2, 3, 1})), {0, 3, 1, 2});
}

void LayerNormParams::visit(const std::string& prefix, const ParamFn& fn) {
  fn(join_name(prefix, "gamma"), gamma);
  fn(join_name(prefix, "beta"), beta);
}

ChannelAffineParams ChannelAffineParams::init(std::int64_t channels, DType dtype) {
  return ChannelAffineParams{Tensor::full({channels}, 1.0, dtype), Tensor::zeros({channels}, dtype)};
}

Tensor ChannelAffineParams::operator()(const Tensor& x) const {
  const std::int64_t c = gamma.dim(0);
  require(x.rank() == 4 && x.dim(1) == c, ErrorKind::shape,
          "channel affine expects [B," + std::to_string(c) + ",H,W], got " + shape_str(x.shape()));
  return ops::add(ops::mul(x, ops::reshape(gamma, {c, 1, 1})), ops::reshape(beta, {c, 1, 1}));
}

void ChannelAffineParams::visit(const std::string& prefix, const ParamFn& fn) {
  fn(join_name(prefix, "gamma"), gamma);
  fn(join_name(prefix, "beta"), beta);
}

MlpParams MlpParams::init(std::int64_t dim, std::int64_t hidden, DType dtype, Rng& rng) {
  MlpParams p;
  p.fc1 = LinearParams::init(dim, hidden, dtype, rng);
  p.fc2 = LinearParams::init(hidden, dim, dtype, rng);
  return p;
}

void MlpParams::visit(const std::string& prefix, const ParamFn& fn) {
  fc1.visit(join_name(prefix, "fc1"), fn);
  fc2.visit(join_name(prefix, "fc2"), fn);
}

}  // namespace gcvk

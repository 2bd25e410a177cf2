#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "gcvk/attention.hpp"
#include "gcvk/layers.hpp"

namespace gcvk::mamba {

// Zero-order-hold discretization of a diagonal SSM:
//   a_bar = exp(delta * A),  b_bar = (delta A)^-1 (exp(delta A) - 1) delta B
// which simplifies elementwise to expm1(delta A) / A * B.
struct Discretized {
  std::vector<double> a_bar;
  std::vector<double> b_bar;
};
Discretized discretize(std::span<const double> a, std::span<const double> b, double delta);

// Selective scan over lanes (batch, channel):
//   h_t = a_bar_t * h_{t-1} + b_bar_t * x_t,  y_t = <C_t, h_t> + D * x_t
// with a_bar_t, b_bar_t from discretize(A[d], B[:, t], delta_t), h_0 = 0.
//   x, delta: [B, D, T] (delta > 0), a: [D, M] (< 0), b, c: [B, M, T],
//   d_skip: [D] or undefined.
Tensor selective_scan(const Tensor& x, const Tensor& delta, const Tensor& a, const Tensor& b, const Tensor& c,
                      const Tensor& d_skip);

// Convolution form of a time-invariant SSM lane: K[t] = <C, a_bar^t * b_bar>.
// b and c are [M, T] (state-major like one batch row of the scan inputs);
// delta is [T]. Throws ErrorKind::unsupported if delta, B or C vary in time.
std::vector<double> ssm_conv_kernel(std::span<const double> a, std::span<const double> delta,
                                    std::span<const double> b, std::span<const double> c, std::int64_t steps);

// y[t] = sum_{s <= t} kernel[s] * x[t - s]
std::vector<double> causal_conv(std::span<const double> x, std::span<const double> kernel);

struct MixerParams {
  std::int64_t dim = 0;
  std::int64_t state = 16;
  std::int64_t dt_rank = 1;
  LinearParams in_proj;   // C -> C, chunked into the scan and symmetric branches
  Conv2dParams conv_x;    // depthwise, kernel 1x3, same padding
  Conv2dParams conv_z;
  LinearParams x_proj;    // C/2 -> dt_rank + 2M
  LinearParams dt_proj;   // dt_rank -> C/2
  Tensor a_log;           // [C/2, M]; A = -exp(a_log)
  Tensor d_skip;          // [C/2]
  LinearParams out_proj;  // C -> C

  std::int64_t branch() const { return dim / 2; }
  static MixerParams init(std::int64_t dim, std::int64_t state, DType dtype, Rng& rng, double dt_min = 1e-3,
                          double dt_max = 0.1);
  void visit(const std::string& prefix, const ParamFn& fn);
};

// [B, T, C] -> [B, T, C]
//   X1 = Scan(SiLU(Conv(Linear(C, C/2) x)));  X2 = SiLU(Conv(Linear(C, C/2) x))
//   out = Linear(C, C)(Concat(X1, X2))
// Conv is depthwise, non-causal, same-padded, kernel 3.
Tensor mixer(const Tensor& x, const MixerParams& p);

// Depthwise 1D convolution on [B, D, T] using the 1x3 conv params.
Tensor depthwise_conv1d(const Tensor& x, const Conv2dParams& conv);

enum class LayerKind { mamba, attention };

// "M" for the first N/2 layers (rounded up for odd N), "S" for the rest.
std::string hybrid_pattern(int layers);

struct HybridLayerParams {
  LayerKind kind = LayerKind::mamba;
  LayerNormParams norm1;
  LayerNormParams norm2;
  MixerParams mixer;      // kind == mamba
  AttentionParams attn;   // kind == attention (plain MHSA)
  MlpParams mlp;

  static HybridLayerParams init(LayerKind kind, std::int64_t dim, std::int64_t heads, double mlp_ratio,
                                std::int64_t state, DType dtype, Rng& rng);
  void visit(const std::string& prefix, const ParamFn& fn);
};

// X' = Mixer(Norm(X)) + X;  out = MLP(Norm(X')) + X'. x: [B, T, C].
Tensor hybrid_layer(const Tensor& x, const HybridLayerParams& p);

}  // namespace gcvk::mamba

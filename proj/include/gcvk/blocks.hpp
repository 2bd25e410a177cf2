#pragma once

#include <cstdint>
#include <vector>

#include "gcvk/layers.hpp"

namespace gcvk {

// Squeeze-and-excitation: x * sigmoid(expand(relu(reduce(avgpool(x))))).
struct SeParams {
  LinearParams reduce;  // C -> C / ratio
  LinearParams expand;  // C / ratio -> C

  static SeParams init(std::int64_t channels, int ratio, DType dtype, Rng& rng);
  void visit(const std::string& prefix, const ParamFn& fn);
};

Tensor se_block(const Tensor& x, const SeParams& p);

// Modified Fused-MBConv without channel expansion:
//   x' = DWConv3x3(x); x' = GELU(x'); x' = SE(x'); out = Conv1x1(x') + x
struct FusedMBConvParams {
  Conv2dParams dw;  // depthwise 3x3, stride 1, padding 1
  SeParams se;
  Conv2dParams pw;  // pointwise C -> C

  static FusedMBConvParams init(std::int64_t channels, int se_ratio, DType dtype, Rng& rng);
  std::int64_t channels() const { return dw.weight.dim(0); }
  void visit(const std::string& prefix, const ParamFn& fn);
};

Tensor fused_mbconv(const Tensor& x, const FusedMBConvParams& p);

enum class DownsamplerKind { conv, maxpool };

const char* to_string(DownsamplerKind k) noexcept;
DownsamplerKind parse_downsampler(const std::string& name);

// Stage-entry reduction. conv: Fused-MBConv -> Conv3x3 stride 2 (Cin -> Cout)
// -> LayerNorm over channels. maxpool: Fused-MBConv -> MaxPool(3, 2, 1) ->
// Conv1x1 (Cin -> Cout) -> LayerNorm.
struct DownsampleParams {
  DownsamplerKind kind = DownsamplerKind::conv;
  FusedMBConvParams mbconv;
  Conv2dParams reduce;
  LayerNormParams norm;

  static DownsampleParams init(std::int64_t cin, std::int64_t cout, int se_ratio, DownsamplerKind kind,
                               DType dtype, Rng& rng);
  void visit(const std::string& prefix, const ParamFn& fn);
};

Tensor downsample(const Tensor& x, const DownsampleParams& p);

// log2(extent / window) when the ratio is an exact power of two; throws a
// config error otherwise.
int gtg_repetitions(std::int64_t extent, std::int64_t window);

// Global token generator: (Fused-MBConv -> MaxPool(3, 2, 1)) repeated
// log2(H / h) times, mapping stage features [B, C, H, W] to q_g [B, C, h, w].
struct GtgParams {
  std::int64_t window_h = 1;
  std::int64_t window_w = 1;
  std::vector<FusedMBConvParams> layers;

  static GtgParams init(std::int64_t channels, std::int64_t height, std::int64_t width, std::int64_t window_h,
                        std::int64_t window_w, int se_ratio, DType dtype, Rng& rng);
  void visit(const std::string& prefix, const ParamFn& fn);
};

Tensor global_token_gen(const Tensor& stage_features, const GtgParams& p);

}  // namespace gcvk

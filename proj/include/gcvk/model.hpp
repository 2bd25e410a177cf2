#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "gcvk/config.hpp"
#include "gcvk/flops.hpp"
#include "gcvk/mamba.hpp"
#include "gcvk/windowing.hpp"

namespace gcvk {

// Pre-norm transformer block: x += Attn(LN(x)); x += MLP(LN(x)).
struct GcVitBlockParams {
  LayerNormParams norm1;
  AttentionParams attn;
  LayerNormParams norm2;
  MlpParams mlp;

  bool is_global() const { return attn.kind == AttentionKind::global; }
  void visit(const std::string& prefix, const ParamFn& fn);
};

// Windowed tokens [B*N, hw, C] through one block; q_g is used by global blocks.
Tensor gcvit_block(const Tensor& tokens, const Tensor& q_global, const GcVitBlockParams& p);

struct GcVitStageParams {
  DownsampleParams down;
  GtgParams gtg;
  std::vector<GcVitBlockParams> blocks;  // even index local, odd index global
  std::int64_t window = 1;

  void visit(const std::string& prefix, const ParamFn& fn);
};

// [B, Cin, 2H, 2W] -> [B, C, H, W]
Tensor gcvit_stage(const Tensor& x, const GcVitStageParams& p);

// MambaVision-style convolutional pieces (batch norm in inference form).
struct ConvUnitParams {
  Conv2dParams conv;
  ChannelAffineParams norm;
  void visit(const std::string& prefix, const ParamFn& fn);
};

// z = BN(Conv3x3(GELU(BN(Conv3x3(z))))) + z
struct ResidualConvBlockParams {
  ConvUnitParams first;
  ConvUnitParams second;
  void visit(const std::string& prefix, const ParamFn& fn);
};

Tensor residual_conv_block(const Tensor& x, const ResidualConvBlockParams& p);

struct HybridStageParams {
  bool has_down = false;
  ConvUnitParams down;                           // Conv3x3 stride 2 + BN
  std::vector<ResidualConvBlockParams> convs;    // stages 1-2
  std::vector<mamba::HybridLayerParams> layers;  // stages 3-4, pattern M..MS..S

  void visit(const std::string& prefix, const ParamFn& fn);
};

struct Model {
  ModelConfig config;
  DType dtype = DType::f32;

  // gcvit
  PatchStemParams stem;
  std::array<GcVitStageParams, 4> stages;
  // mamba_hybrid
  std::array<ConvUnitParams, 2> hybrid_stem;
  std::array<HybridStageParams, 4> hybrid_stages;

  LayerNormParams head_norm;
  LinearParams head;

  // [B, 3, S, S] -> logits [B, classes]
  Tensor forward(const Tensor& images) const;
  // Stem output followed by the four stage outputs, each [B, C_i, H_i, W_i].
  std::vector<Tensor> features(const Tensor& images) const;

  void visit(const std::string& prefix, const ParamFn& fn);
  void visit(const ParamFn& fn) { visit("", fn); }
  std::int64_t param_count() const;
};

Model build_model(const ModelConfig& config, std::uint64_t seed, DType dtype = DType::f32);
// Same structure as build_model with every weight zero; for cost reports.
Model build_model_shapes(const ModelConfig& config, DType dtype = DType::f32);

struct StageCost {
  int stage = 0;
  std::int64_t dim = 0;
  std::int64_t resolution = 0;
  std::int64_t window = 0;
  int local_blocks = 0;
  int global_blocks = 0;
  int gtg_repetitions = 0;
  std::string pattern;  // hybrid stages: "MMSS"; conv stages: "C" per block
  std::int64_t params = 0;
  FlopTally flops;
  // depth x 2HW(2C^2 + hwC); every block priced as local. Global blocks
  // omit the query projection, so the exact attention count is this minus
  // global_blocks * HW * C^2.
  std::uint64_t attention_closed_form = 0;
};

struct CostReport {
  std::string variant;
  std::int64_t img_size = 0;
  std::int64_t batch = 1;
  std::int64_t stem_params = 0;
  std::int64_t head_params = 0;
  std::int64_t total_params = 0;
  FlopTally stem_flops;
  FlopTally head_flops;
  FlopTally total_flops;
  std::vector<StageCost> stages;
};

// Attention MACs of one local block on an H x W map: 2HW(2C^2 + hwC).
std::uint64_t attention_closed_form(std::int64_t height, std::int64_t width, std::int64_t dim,
                                    std::int64_t window_h, std::int64_t window_w);

// Analytic parameter and MAC counts for a batch at the config's image size.
CostReport cost_report(const Model& model, std::int64_t batch = 1);

std::string format_report(const CostReport& report);
std::string report_to_json(const CostReport& report);

}  // namespace gcvk

#include "gcvk/blocks.hpp"

namespace gcvk {

SeParams SeParams::init(std::int64_t channels, int ratio, DType dtype, Rng& rng) {
  require(ratio >= 1 && channels % ratio == 0, ErrorKind::config,
          "SE ratio " + std::to_string(ratio) + " does not divide " + std::to_string(channels) + " channels");
  SeParams p;
  p.reduce = LinearParams::init(channels, channels / ratio, dtype, rng);
  p.expand = LinearParams::init(channels / ratio, channels, dtype, rng);
  return p;
}

void SeParams::visit(const std::string& prefix, const ParamFn& fn) {
  reduce.visit(join_name(prefix, "reduce"), fn);
  expand.visit(join_name(prefix, "expand"), fn);
}

Tensor se_block(const Tensor& x, const SeParams& p) {
  require(x.rank() == 4 && x.dim(1) == p.reduce.in_features(), ErrorKind::shape,
          "se_block: input " + shape_str(x.shape()) + " does not have " + std::to_string(p.reduce.in_features()) +
              " channels");
  const Tensor pooled = ops::global_avg_pool(x);
  const Tensor gate = ops::sigmoid(p.expand(ops::relu(p.reduce(pooled))));
  return ops::mul(x, ops::reshape(gate, {x.dim(0), x.dim(1), 1, 1}));
}

FusedMBConvParams FusedMBConvParams::init(std::int64_t channels, int se_ratio, DType dtype, Rng& rng) {
  FusedMBConvParams p;
  ops::Conv2dOptions dw_opt;
  dw_opt.pad_h = dw_opt.pad_w = 1;
  dw_opt.groups = static_cast<int>(channels);
  p.dw = Conv2dParams::init(channels, channels, 3, dw_opt, dtype, rng);
  p.se = SeParams::init(channels, se_ratio, dtype, rng);
  p.pw = Conv2dParams::init(channels, channels, 1, {}, dtype, rng);
  return p;
}

void FusedMBConvParams::visit(const std::string& prefix, const ParamFn& fn) {
  dw.visit(join_name(prefix, "dw"), fn);
  se.visit(join_name(prefix, "se"), fn);
  pw.visit(join_name(prefix, "pw"), fn);
}

Tensor fused_mbconv(const Tensor& x, const FusedMBConvParams& p) {
  require(x.rank() == 4 && x.dim(1) == p.channels(), ErrorKind::shape,
          "fused_mbconv: input " + shape_str(x.shape()) + " does not have " + std::to_string(p.channels()) +
              " channels");
  Tensor h = p.dw(x);
  h = ops::gelu(h);
  h = se_block(h, p.se);
  return ops::add(p.pw(h), x);
}

const char* to_string(DownsamplerKind k) noexcept { return k == DownsamplerKind::conv ? "conv" : "maxpool"; }

DownsamplerKind parse_downsampler(const std::string& name) {
  if (name == "conv") return DownsamplerKind::conv;
  if (name == "maxpool") return DownsamplerKind::maxpool;
  fail(ErrorKind::config, "downsampler must be \"conv\" or \"maxpool\", got \"" + name + "\"");
}

DownsampleParams DownsampleParams::init(std::int64_t cin, std::int64_t cout, int se_ratio, DownsamplerKind kind,
                                        DType dtype, Rng& rng) {
  DownsampleParams p;
  p.kind = kind;
  p.mbconv = FusedMBConvParams::init(cin, se_ratio, dtype, rng);
  if (kind == DownsamplerKind::conv) {
    ops::Conv2dOptions opt;
    opt.stride_h = opt.stride_w = 2;
    opt.pad_h = opt.pad_w = 1;
    p.reduce = Conv2dParams::init(cin, cout, 3, opt, dtype, rng, false);
  } else {
    p.reduce = Conv2dParams::init(cin, cout, 1, {}, dtype, rng, false);
  }
  p.norm = LayerNormParams::init(cout, dtype);
  return p;
}

void DownsampleParams::visit(const std::string& prefix, const ParamFn& fn) {
  mbconv.visit(join_name(prefix, "mbconv"), fn);
  reduce.visit(join_name(prefix, "reduce"), fn);
  norm.visit(join_name(prefix, "norm"), fn);
}

Tensor downsample(const Tensor& x, const DownsampleParams& p) {
  require(x.rank() == 4, ErrorKind::shape, "downsample: expected [B,C,H,W], got " + shape_str(x.shape()));
  require(x.dim(2) % 2 == 0 && x.dim(3) % 2 == 0, ErrorKind::config,
          "downsample: spatial extents must be even, got " + shape_str(x.shape()));
  Tensor h = fused_mbconv(x, p.mbconv);
  if (p.kind == DownsamplerKind::maxpool) h = ops::maxpool2d(h, 3, 2, 1);
  h = p.reduce(h);
  return p.norm.channels(h);
}

int gtg_repetitions(std::int64_t extent, std::int64_t window) {
  require(window >= 1 && extent % window == 0, ErrorKind::config,
          "GTG: extent " + std::to_string(extent) + " is not a multiple of window " + std::to_string(window));
  std::int64_t ratio = extent / window;
  int reps = 0;
  while (ratio > 1) {
    require(ratio % 2 == 0, ErrorKind::config,
            "GTG: extent/window ratio " + std::to_string(extent / window) + " is not a power of two");
    ratio /= 2;
    ++reps;
  }
  return reps;
}

GtgParams GtgParams::init(std::int64_t channels, std::int64_t height, std::int64_t width, std::int64_t window_h,
                          std::int64_t window_w, int se_ratio, DType dtype, Rng& rng) {
  const int reps = gtg_repetitions(height, window_h);
  require(gtg_repetitions(width, window_w) == reps, ErrorKind::config,
          "GTG: height and width need the same number of halvings");
  GtgParams p;
  p.window_h = window_h;
  p.window_w = window_w;
  for (int i = 0; i < reps; ++i) p.layers.push_back(FusedMBConvParams::init(channels, se_ratio, dtype, rng));
  return p;
}

void GtgParams::visit(const std::string& prefix, const ParamFn& fn) {
  for (std::size_t i = 0; i < layers.size(); ++i) layers[i].visit(join_name(prefix, std::to_string(i)), fn);
}

Tensor global_token_gen(const Tensor& stage_features, const GtgParams& p) {
  require(stage_features.rank() == 4, ErrorKind::shape,
          "global_token_gen: expected [B,C,H,W], got " + shape_str(stage_features.shape()));
  const int reps = gtg_repetitions(stage_features.dim(2), p.window_h);
  require(reps == static_cast<int>(p.layers.size()), ErrorKind::config,
          "global_token_gen: input " + shape_str(stage_features.shape()) + " needs " + std::to_string(reps) +
              " reductions, parameters hold " + std::to_string(p.layers.size()));
  Tensor h = stage_features;
  for (const auto& layer : p.layers) h = ops::maxpool2d(fused_mbconv(h, layer), 3, 2, 1);
  require(h.dim(2) == p.window_h && h.dim(3) == p.window_w, ErrorKind::shape,
          "global_token_gen: produced " + shape_str(h.shape()) + ", expected window " + std::to_string(p.window_h) +
              "x" + std::to_string(p.window_w));
  return h;
}

}  // namespace gcvk

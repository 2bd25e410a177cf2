#include "gcvk/windowing.hpp"

namespace gcvk {

void WindowLayout::validate() const {
  require(window_h >= 1 && window_w >= 1 && height >= 1 && width >= 1, ErrorKind::layout,
          "window layout extents must be positive");
  require(height % window_h == 0 && width % window_w == 0, ErrorKind::layout,
          "feature map " + std::to_string(height) + "x" + std::to_string(width) + " is not divisible by window " +
              std::to_string(window_h) + "x" + std::to_string(window_w));
}

Tensor window_partition(const Tensor& x, const WindowLayout& layout) {
  layout.validate();
  require(x.rank() == 4 && x.dim(2) == layout.height && x.dim(3) == layout.width, ErrorKind::layout,
          "window_partition: input " + shape_str(x.shape()) + " does not match layout " +
              std::to_string(layout.height) + "x" + std::to_string(layout.width));
  const std::int64_t b = x.dim(0), c = x.dim(1);
  // [B, C, rows, h, cols, w] -> [B, rows, cols, h, w, C]
  Tensor t = ops::reshape(x, {b, c, layout.rows(), layout.window_h, layout.cols(), layout.window_w});
  t = ops::permute(t, {0, 2, 4, 3, 5, 1});
  return ops::reshape(t, {b * layout.count(), layout.tokens(), c});
}

Tensor window_reverse(const Tensor& tokens, const WindowLayout& layout, std::int64_t batch) {
  layout.validate();
  require(tokens.rank() == 3 && tokens.dim(0) == batch * layout.count() && tokens.dim(1) == layout.tokens(),
          ErrorKind::layout,
          "window_reverse: tokens " + shape_str(tokens.shape()) + " do not match " + std::to_string(batch) + "x" +
              std::to_string(layout.count()) + " windows of " + std::to_string(layout.tokens()) + " tokens");
  const std::int64_t c = tokens.dim(2);
  Tensor t = ops::reshape(tokens, {batch, layout.rows(), layout.cols(), layout.window_h, layout.window_w, c});
  t = ops::permute(t, {0, 5, 1, 3, 2, 4});
  return ops::reshape(t, {batch, c, layout.height, layout.width});
}

PatchStemParams PatchStemParams::init(std::int64_t in_channels, std::int64_t dim, int se_ratio, DType dtype,
                                      Rng& rng) {
  PatchStemParams p;
  ops::Conv2dOptions opt;
  opt.stride_h = opt.stride_w = 2;
  opt.pad_h = opt.pad_w = 1;
  p.conv = Conv2dParams::init(in_channels, dim, 3, opt, dtype, rng);
  p.mbconv = FusedMBConvParams::init(dim, se_ratio, dtype, rng);
  return p;
}

void PatchStemParams::visit(const std::string& prefix, const ParamFn& fn) {
  conv.visit(join_name(prefix, "conv"), fn);
  mbconv.visit(join_name(prefix, "mbconv"), fn);
}

Tensor patch_stem(const Tensor& x, const PatchStemParams& p) {
  require(x.rank() == 4, ErrorKind::shape, "patch_stem: expected [B,C,H,W], got " + shape_str(x.shape()));
  require(x.dim(2) % 4 == 0 && x.dim(3) % 4 == 0, ErrorKind::config,
          "patch_stem: input extents must be divisible by 4, got " + shape_str(x.shape()));
  return fused_mbconv(p.conv(x), p.mbconv);
}

}  // namespace gcvk

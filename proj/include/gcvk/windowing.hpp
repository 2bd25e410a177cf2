#pragma once

#include <cstdint>

#include "gcvk/blocks.hpp"

namespace gcvk {

struct WindowLayout {
  std::int64_t height = 1;
  std::int64_t width = 1;
  std::int64_t window_h = 1;
  std::int64_t window_w = 1;

  std::int64_t rows() const { return height / window_h; }
  std::int64_t cols() const { return width / window_w; }
  std::int64_t count() const { return rows() * cols(); }
  std::int64_t tokens() const { return window_h * window_w; }
  // Throws a layout error unless both extents divide evenly.
  void validate() const;
};

// [B, C, H, W] -> [B * N, h * w, C]. Window index b * N + (row * cols + col);
// tokens inside a window are row-major over (y, x).
Tensor window_partition(const Tensor& x, const WindowLayout& layout);

// Exact inverse of window_partition.
Tensor window_reverse(const Tensor& tokens, const WindowLayout& layout, std::int64_t batch);

// Overlapping patch stem: Conv3x3 stride 2 padding 1 (3 -> C) followed by one
// Fused-MBConv. Halves the resolution; the first stage's downsampler halves
// it again.
struct PatchStemParams {
  Conv2dParams conv;
  FusedMBConvParams mbconv;

  static PatchStemParams init(std::int64_t in_channels, std::int64_t dim, int se_ratio, DType dtype, Rng& rng);
  void visit(const std::string& prefix, const ParamFn& fn);
};

Tensor patch_stem(const Tensor& x, const PatchStemParams& p);

}  // namespace gcvk

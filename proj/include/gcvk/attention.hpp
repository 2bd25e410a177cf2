#pragma once

#include <cstdint>
#include <vector>

#include "gcvk/layers.hpp"

namespace gcvk {

enum class AttentionKind {
  local,   // q, k, v from one C -> 3C linear; relative position bias
  global,  // k, v from a C -> 2C linear; query supplied by the GTG
  plain    // q, k, v from C -> 3C; no position bias (hybrid-stage MHSA)
};

const char* to_string(AttentionKind k) noexcept;

// Flat index (dy + h - 1) * (2w - 1) + (dx + w - 1) for every ordered pair
// (i, j) of tokens in an h x w window, with d = pos(i) - pos(j). Row-major
// [hw, hw].
std::vector<std::int32_t> relative_position_index(std::int64_t window_h, std::int64_t window_w);
inline std::vector<std::int32_t> relative_position_index(std::int64_t p) { return relative_position_index(p, p); }

struct AttentionParams {
  AttentionKind kind = AttentionKind::local;
  std::int64_t dim = 0;
  std::int64_t heads = 1;
  std::int64_t window_h = 1;
  std::int64_t window_w = 1;
  LinearParams qkv;   // [3C, C] (local, plain) or [2C, C] (global)
  LinearParams proj;  // [C, C]
  Tensor bias_table;  // [heads, (2h-1)(2w-1)]; undefined for plain
  std::vector<std::int32_t> rel_index;

  std::int64_t head_dim() const { return dim / heads; }
  static AttentionParams init(AttentionKind kind, std::int64_t dim, std::int64_t heads, std::int64_t window_h,
                              std::int64_t window_w, DType dtype, Rng& rng);
  void visit(const std::string& prefix, const ParamFn& fn);
};

// Relative position bias gathered to [heads, hw, hw].
Tensor relative_bias(const AttentionParams& p);

// Core of every variant: Softmax(q k^T / sqrt(d) + bias) v per head.
// q, k, v: [B*, F, n, d]; bias: [F, n, n] or undefined. Returns [B*, n, F*d].
Tensor attend(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& bias);

// Attention probabilities Softmax(q k^T / sqrt(d) + bias), [B*, F, n, n].
Tensor attention_weights(const Tensor& q, const Tensor& k, const Tensor& bias);

// tokens [B*, hw, C] -> [B*, hw, C]
Tensor local_attention(const Tensor& tokens, const AttentionParams& p);

// tokens [B * N, hw, C], q_g [B, C, h, w] -> [B * N, hw, C]. q_g token t is
// position t of the h x w grid (row-major) with channels split [F, d], F
// outer; each batch entry's q_g is shared by its N consecutive windows.
Tensor global_attention(const Tensor& tokens, const Tensor& q_global, const AttentionParams& p);

// Generic multi-head self-attention over [B, T, C] without position bias.
Tensor self_attention(const Tensor& tokens, const AttentionParams& p);

// Splits [B*, n, C] into heads: [B*, F, n, d].
Tensor split_heads(const Tensor& x, std::int64_t heads);

}  // namespace gcvk

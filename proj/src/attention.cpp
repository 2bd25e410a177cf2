#include "gcvk/attention.hpp"

#include <cmath>

namespace gcvk {

const char* to_string(AttentionKind k) noexcept {
  switch (k) {
    case AttentionKind::local: return "local";
    case AttentionKind::global: return "global";
    case AttentionKind::plain: return "plain";
  }
  return "?";
}

std::vector<std::int32_t> relative_position_index(std::int64_t window_h, std::int64_t window_w) {
  require(window_h >= 1 && window_w >= 1, ErrorKind::config, "relative_position_index: window extent must be >= 1");
  const std::int64_t n = window_h * window_w;
  std::vector<std::int32_t> idx(static_cast<std::size_t>(n * n));
  for (std::int64_t i = 0; i < n; ++i) {
    const std::int64_t yi = i / window_w, xi = i % window_w;
    for (std::int64_t j = 0; j < n; ++j) {
      const std::int64_t yj = j / window_w, xj = j % window_w;
      const std::int64_t dy = yi - yj + window_h - 1;
      const std::int64_t dx = xi - xj + window_w - 1;
      idx[static_cast<std::size_t>(i * n + j)] = static_cast<std::int32_t>(dy * (2 * window_w - 1) + dx);
    }
  }
  return idx;
}

AttentionParams AttentionParams::init(AttentionKind kind, std::int64_t dim, std::int64_t heads,
                                      std::int64_t window_h, std::int64_t window_w, DType dtype, Rng& rng) {
  require(heads >= 1 && dim % heads == 0, ErrorKind::config,
          "attention: dim " + std::to_string(dim) + " is not divisible by " + std::to_string(heads) + " heads");
  AttentionParams p;
  p.kind = kind;
  p.dim = dim;
  p.heads = heads;
  p.window_h = window_h;
  p.window_w = window_w;
  p.qkv = LinearParams::init(dim, (kind == AttentionKind::global ? 2 : 3) * dim, dtype, rng);
  p.proj = LinearParams::init(dim, dim, dtype, rng);
  if (kind != AttentionKind::plain) {
    p.bias_table = rng.trunc_normal({heads, (2 * window_h - 1) * (2 * window_w - 1)}, dtype, 0.02);
    p.rel_index = relative_position_index(window_h, window_w);
  }
  return p;
}

void AttentionParams::visit(const std::string& prefix, const ParamFn& fn) {
  qkv.visit(join_name(prefix, kind == AttentionKind::global ? "kv" : "qkv"), fn);
  proj.visit(join_name(prefix, "proj"), fn);
  if (bias_table.defined()) fn(join_name(prefix, "bias_table"), bias_table);
}

Tensor relative_bias(const AttentionParams& p) {
  const std::int64_t n = p.window_h * p.window_w;
  return ops::take_columns(p.bias_table, p.rel_index, {n, n});
}

Tensor split_heads(const Tensor& x, std::int64_t heads) {
  const std::int64_t b = x.dim(0), n = x.dim(1), c = x.dim(2);
  return ops::permute(ops::reshape(x, {b, n, heads, c / heads}), {0, 2, 1, 3});
}

Tensor attention_weights(const Tensor& q, const Tensor& k, const Tensor& bias) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.dim(-1)));
  Tensor logits = ops::scale(ops::matmul(q, ops::transpose_last2(k)), scale);
  if (bias.defined()) logits = ops::add(logits, bias);
  return ops::softmax(logits, -1);
}

Tensor attend(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& bias) {
  const Tensor out = ops::matmul(attention_weights(q, k, bias), v);  // [B*, F, n, d]
  const std::int64_t b = out.dim(0), f = out.dim(1), n = out.dim(2), d = out.dim(3);
  return ops::reshape(ops::permute(out, {0, 2, 1, 3}), {b, n, f * d});
}

namespace {

void check_tokens(const Tensor& tokens, const AttentionParams& p, const char* op) {
  require(tokens.rank() == 3 && tokens.dim(2) == p.dim, ErrorKind::shape,
          std::string(op) + ": tokens " + shape_str(tokens.shape()) + " do not have " + std::to_string(p.dim) +
              " channels");
}

// [B*, n, 3C] or [B*, n, 2C] -> parts of [B*, F, n, d], F outer in channels.
std::vector<Tensor> project_heads(const Tensor& tokens, const AttentionParams& p, std::int64_t parts) {
  const std::int64_t b = tokens.dim(0), n = tokens.dim(1);
  Tensor packed = ops::reshape(p.qkv(tokens), {b, n, parts, p.heads, p.head_dim()});
  packed = ops::permute(packed, {2, 0, 3, 1, 4});  // [parts, B*, F, n, d]
  std::vector<Tensor> out;
  for (const auto& part : ops::split(packed, std::vector<std::int64_t>(static_cast<std::size_t>(parts), 1), 0)) {
    out.push_back(ops::reshape(part, {b, p.heads, n, p.head_dim()}));
  }
  return out;
}

}  // namespace

Tensor local_attention(const Tensor& tokens, const AttentionParams& p) {
  require(p.kind == AttentionKind::local, ErrorKind::usage, "local_attention: parameters are not local");
  check_tokens(tokens, p, "local_attention");
  require(tokens.dim(1) == p.window_h * p.window_w, ErrorKind::shape,
          "local_attention: " + std::to_string(tokens.dim(1)) + " tokens per window, expected " +
              std::to_string(p.window_h * p.window_w));
  const auto qkv = project_heads(tokens, p, 3);
  return p.proj(attend(qkv[0], qkv[1], qkv[2], relative_bias(p)));
}

Tensor global_attention(const Tensor& tokens, const Tensor& q_global, const AttentionParams& p) {
  require(p.kind == AttentionKind::global, ErrorKind::usage, "global_attention: parameters are not global");
  check_tokens(tokens, p, "global_attention");
  const std::int64_t n = p.window_h * p.window_w;
  require(tokens.dim(1) == n, ErrorKind::shape,
          "global_attention: " + std::to_string(tokens.dim(1)) + " tokens per window, expected " + std::to_string(n));
  require(q_global.rank() == 4 && q_global.dim(1) == p.dim && q_global.dim(2) == p.window_h &&
              q_global.dim(3) == p.window_w,
          ErrorKind::shape,
          "global_attention: q_g " + shape_str(q_global.shape()) + " does not match [B, " + std::to_string(p.dim) +
              ", " + std::to_string(p.window_h) + ", " + std::to_string(p.window_w) + "]");
  const std::int64_t b = q_global.dim(0), bstar = tokens.dim(0);
  require(bstar % b == 0, ErrorKind::shape,
          "global_attention: q_g batch " + std::to_string(b) + " does not divide token batch " + std::to_string(bstar));

  const auto kv = project_heads(tokens, p, 2);
  // q_g [B, C, h, w] -> [B, hw, C] -> [B, F, hw, d] -> repeated per window.
  Tensor q = ops::reshape(ops::permute(q_global, {0, 2, 3, 1}), {b, n, p.dim});
  q = ops::repeat_batch(split_heads(q, p.heads), bstar / b);
  return p.proj(attend(q, kv[0], kv[1], relative_bias(p)));
}

Tensor self_attention(const Tensor& tokens, const AttentionParams& p) {
  require(p.kind == AttentionKind::plain, ErrorKind::usage, "self_attention: parameters carry a position bias");
  check_tokens(tokens, p, "self_attention");
  const auto qkv = project_heads(tokens, p, 3);
  return p.proj(attend(qkv[0], qkv[1], qkv[2], Tensor()));
}

}  // namespace gcvk

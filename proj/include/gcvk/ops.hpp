#pragma once

#include <cstdint>
#include <vector>

#include "gcvk/tensor.hpp"

// Differentiable primitives. Every op records itself on the active Tape when
// one of its inputs is tracked. Reductions accumulate sequentially in index
// order so results are bit-reproducible.
namespace gcvk::ops {

// Elementwise, numpy-style broadcasting (right-aligned extents, 1 stretches).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);

Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);  // exact erf form
Tensor silu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor exp(const Tensor& x);

// Sums a broadcast result back down to `shape` (inverse of broadcasting).
Tensor sum_to(const Tensor& x, const Shape& shape);
Tensor sum(const Tensor& x);   // scalar
Tensor mean(const Tensor& x);  // scalar

// a[..., m, k] x b[..., k, n]; leading extents must be equal.
Tensor matmul(const Tensor& a, const Tensor& b);
// x[..., in] W^T + bias with W: [out, in]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor softmax(const Tensor& x, int axis);
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);

struct Conv2dOptions {
  int stride_h = 1;
  int stride_w = 1;
  int pad_h = 0;
  int pad_w = 0;
  int groups = 1;
};
// Cross-correlation with zero padding. x: [N, Cin, H, W], w: [Cout, Cin/groups, kh, kw].
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, const Conv2dOptions& opt);
Tensor maxpool2d(const Tensor& x, int kernel = 3, int stride = 2, int padding = 1);
Tensor global_avg_pool(const Tensor& x);  // [N, C, H, W] -> [N, C]

Tensor reshape(const Tensor& x, const Shape& shape);
Tensor permute(const Tensor& x, const std::vector<int>& perm);
Tensor transpose_last2(const Tensor& x);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t length);
std::vector<Tensor> split(const Tensor& x, const std::vector<std::int64_t>& sizes, int axis);

// Repeats each leading-axis entry `times` times consecutively:
// [B, ...] -> [B * times, ...] with row b*times + r equal to row b.
Tensor repeat_batch(const Tensor& x, std::int64_t times);

// out[r, i] = table[r, index[i]] for table [R, K]; result reshaped to
// [R, out_tail...]. Backward scatter-adds into the table.
Tensor take_columns(const Tensor& table, const std::vector<std::int32_t>& index,
                    const Shape& out_tail);

// Mean cross-entropy of logits [B, K] against integer labels.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);

}  // namespace gcvk::ops

#pragma once

// Scalar-loop reference implementations used as independent oracles. They
// read weights out of the library's parameter structs but recompute every
// activation with plain nested loops in double precision.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "gcvk/mamba.hpp"
#include "gcvk/model.hpp"

namespace oracle {

using gcvk::Shape;
using gcvk::Tensor;

struct Arr {
  Shape shape;
  std::vector<double> v;

  Arr() = default;
  Arr(Shape s) : shape(std::move(s)), v(static_cast<std::size_t>(gcvk::numel_of(shape)), 0.0) {}
  Arr(const Tensor& t) : shape(t.shape()), v(t.to_doubles()) {}

  std::int64_t dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
  double& at(std::int64_t i) { return v[static_cast<std::size_t>(i)]; }
  double at(std::int64_t i) const { return v[static_cast<std::size_t>(i)]; }
  // 4-D [a, b, c, d]
  double& at4(std::int64_t a, std::int64_t b, std::int64_t c, std::int64_t d) {
    return at(((a * dim(1) + b) * dim(2) + c) * dim(3) + d);
  }
  double at4(std::int64_t a, std::int64_t b, std::int64_t c, std::int64_t d) const {
    return at(((a * dim(1) + b) * dim(2) + c) * dim(3) + d);
  }
  // 3-D [a, b, c]
  double& at3(std::int64_t a, std::int64_t b, std::int64_t c) { return at((a * dim(1) + b) * dim(2) + c); }
  double at3(std::int64_t a, std::int64_t b, std::int64_t c) const { return at((a * dim(1) + b) * dim(2) + c); }
  Tensor tensor(gcvk::DType dtype = gcvk::DType::f64) const { return Tensor::from_doubles(shape, v, dtype); }
};

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double silu(double x) { return x * sigmoid(x); }
inline double softplus(double x) { return x > 20 ? x : std::log1p(std::exp(x)); }

template <typename F>
Arr map(Arr a, F f) {
  for (auto& x : a.v) x = f(x);
  return a;
}

inline Arr add(Arr a, const Arr& b) {
  for (std::size_t i = 0; i < a.v.size(); ++i) a.v[i] += b.v[i];
  return a;
}

inline Arr conv2d(const Arr& x, const gcvk::Conv2dParams& p) {
  const Arr w(p.weight);
  const std::vector<double> bias = p.bias.defined() ? p.bias.to_doubles() : std::vector<double>();
  const auto& o = p.opt;
  const std::int64_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::int64_t cout = w.dim(0), cg = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  const std::int64_t ho = (h + 2 * o.pad_h - kh) / o.stride_h + 1, wo = (wd + 2 * o.pad_w - kw) / o.stride_w + 1;
  const std::int64_t per_group_out = cout / o.groups;
  (void)cin;
  Arr y({n, cout, ho, wo});
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t co = 0; co < cout; ++co) {
      const std::int64_t g = co / per_group_out;
      for (std::int64_t oy = 0; oy < ho; ++oy)
        for (std::int64_t ox = 0; ox < wo; ++ox) {
          double s = bias.empty() ? 0.0 : bias[static_cast<std::size_t>(co)];
          for (std::int64_t ci = 0; ci < cg; ++ci)
            for (std::int64_t ky = 0; ky < kh; ++ky)
              for (std::int64_t kx = 0; kx < kw; ++kx) {
                const std::int64_t iy = oy * o.stride_h - o.pad_h + ky, ix = ox * o.stride_w - o.pad_w + kx;
                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                s += w.at4(co, ci, ky, kx) * x.at4(b, g * cg + ci, iy, ix);
              }
          y.at4(b, co, oy, ox) = s;
        }
    }
  return y;
}

// x [..., in] -> [..., out]
inline Arr linear(const Arr& x, const gcvk::LinearParams& p) {
  const Arr w(p.weight);
  const std::vector<double> bias = p.bias.defined() ? p.bias.to_doubles() : std::vector<double>();
  const std::int64_t in = w.dim(1), out = w.dim(0), rows = static_cast<std::int64_t>(x.v.size()) / in;
  Shape s = x.shape;
  s.back() = out;
  Arr y(s);
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t o = 0; o < out; ++o) {
      double acc = bias.empty() ? 0.0 : bias[static_cast<std::size_t>(o)];
      for (std::int64_t i = 0; i < in; ++i) acc += x.at(r * in + i) * w.at(o * in + i);
      y.at(r * out + o) = acc;
    }
  return y;
}

inline Arr layernorm_last(const Arr& x, const gcvk::LayerNormParams& p) {
  const auto g = p.gamma.to_doubles(), b = p.beta.to_doubles();
  const auto c = static_cast<std::int64_t>(g.size());
  Arr y(x.shape);
  for (std::int64_t r = 0; r < static_cast<std::int64_t>(x.v.size()) / c; ++r) {
    double mean = 0.0, var = 0.0;
    for (std::int64_t i = 0; i < c; ++i) mean += x.at(r * c + i);
    mean /= static_cast<double>(c);
    for (std::int64_t i = 0; i < c; ++i) var += (x.at(r * c + i) - mean) * (x.at(r * c + i) - mean);
    var /= static_cast<double>(c);
    for (std::int64_t i = 0; i < c; ++i) {
      y.at(r * c + i) = (x.at(r * c + i) - mean) / std::sqrt(var + p.eps) * g[static_cast<std::size_t>(i)] +
                        b[static_cast<std::size_t>(i)];
    }
  }
  return y;
}

// [B, C, H, W] normalized over C.
inline Arr layernorm_channels(const Arr& x, const gcvk::LayerNormParams& p) {
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Arr t({n * h * w, c});
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t xx = 0; xx < w; ++xx) t.at(((b * h + y) * w + xx) * c + ch) = x.at4(b, ch, y, xx);
  const Arr nt = layernorm_last(t, p);
  Arr out(x.shape);
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t xx = 0; xx < w; ++xx) out.at4(b, ch, y, xx) = nt.at(((b * h + y) * w + xx) * c + ch);
  return out;
}

inline Arr maxpool(const Arr& x, int k = 3, int s = 2, int pad = 1) {
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t ho = (h + 2 * pad - k) / s + 1, wo = (w + 2 * pad - k) / s + 1;
  Arr y({n, c, ho, wo});
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t oy = 0; oy < ho; ++oy)
        for (std::int64_t ox = 0; ox < wo; ++ox) {
          double m = -INFINITY;
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              const std::int64_t iy = oy * s - pad + ky, ix = ox * s - pad + kx;
              if (iy >= 0 && iy < h && ix >= 0 && ix < w) m = std::max(m, x.at4(b, ch, iy, ix));
            }
          y.at4(b, ch, oy, ox) = m;
        }
  return y;
}

inline Arr avgpool(const Arr& x) {
  const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Arr y({n, c});
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::int64_t i = 0; i < hw; ++i) s += x.at((b * c + ch) * hw + i);
      y.at(b * c + ch) = s / static_cast<double>(hw);
    }
  return y;
}

inline Arr se(const Arr& x, const gcvk::SeParams& p) {
  const Arr pooled = avgpool(x);
  const Arr gate = map(linear(map(linear(pooled, p.reduce), [](double v) { return std::max(v, 0.0); }), p.expand),
                       sigmoid);
  Arr y(x.shape);
  const std::int64_t hw = x.dim(2) * x.dim(3);
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(x.v.size()); ++i) y.at(i) = x.at(i) * gate.at(i / hw);
  return y;
}

inline Arr fused_mbconv(const Arr& x, const gcvk::FusedMBConvParams& p) {
  Arr h = conv2d(x, p.dw);
  h = map(h, gelu);
  h = se(h, p.se);
  return add(conv2d(h, p.pw), x);
}

inline Arr downsample(const Arr& x, const gcvk::DownsampleParams& p) {
  Arr h = fused_mbconv(x, p.mbconv);
  if (p.kind == gcvk::DownsamplerKind::maxpool) h = maxpool(h);
  return layernorm_channels(conv2d(h, p.reduce), p.norm);
}

inline Arr gtg(const Arr& x, const gcvk::GtgParams& p) {
  Arr h = x;
  for (const auto& l : p.layers) h = maxpool(fused_mbconv(h, l));
  return h;
}

// [B, C, H, W] -> [B*N, h*w, C] by index arithmetic.
inline Arr partition(const Arr& x, std::int64_t wh, std::int64_t ww) {
  const std::int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t rows = h / wh, cols = w / ww, n = rows * cols;
  Arr t({b * n, wh * ww, c});
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t xx = 0; xx < w; ++xx) {
          const std::int64_t win = bi * n + (y / wh) * cols + xx / ww;
          const std::int64_t tok = (y % wh) * ww + xx % ww;
          t.at3(win, tok, ch) = x.at4(bi, ch, y, xx);
        }
  return t;
}

inline Arr reverse(const Arr& t, std::int64_t b, std::int64_t c, std::int64_t h, std::int64_t w, std::int64_t wh,
                   std::int64_t ww) {
  const std::int64_t cols = w / ww, n = (h / wh) * cols;
  Arr x({b, c, h, w});
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t xx = 0; xx < w; ++xx)
          x.at4(bi, ch, y, xx) = t.at3(bi * n + (y / wh) * cols + xx / ww, (y % wh) * ww + xx % ww, ch);
  return x;
}

// Per-pair attention. q: [B*, n, C] (already projected), k, v: [B*, m, C];
// heads split channels [F, d] with F outer. bias(f, i, j) may be empty.
inline Arr attention_core(const Arr& q, const Arr& k, const Arr& v, std::int64_t heads, const Arr* bias_table,
                          const std::vector<std::int32_t>* index) {
  const std::int64_t bs = q.dim(0), n = q.dim(1), c = q.dim(2), m = k.dim(1), d = c / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  Arr out({bs, n, c});
  for (std::int64_t b = 0; b < bs; ++b)
    for (std::int64_t f = 0; f < heads; ++f)
      for (std::int64_t i = 0; i < n; ++i) {
        std::vector<double> logits(static_cast<std::size_t>(m));
        double mx = -INFINITY;
        for (std::int64_t j = 0; j < m; ++j) {
          double s = 0.0;
          for (std::int64_t e = 0; e < d; ++e) s += q.at3(b, i, f * d + e) * k.at3(b, j, f * d + e);
          s *= scale;
          if (bias_table) s += bias_table->at(f * bias_table->dim(1) + (*index)[static_cast<std::size_t>(i * m + j)]);
          logits[static_cast<std::size_t>(j)] = s;
          mx = std::max(mx, s);
        }
        double z = 0.0;
        for (auto& l : logits) z += (l = std::exp(l - mx));
        for (std::int64_t e = 0; e < d; ++e) {
          double acc = 0.0;
          for (std::int64_t j = 0; j < m; ++j) acc += logits[static_cast<std::size_t>(j)] / z * v.at3(b, j, f * d + e);
          out.at3(b, i, f * d + e) = acc;
        }
      }
  return out;
}

// Splits the packed projection [B*, n, parts*C] into part p.
inline Arr part(const Arr& packed, int parts, int p) {
  const std::int64_t bs = packed.dim(0), n = packed.dim(1), c = packed.dim(2) / parts;
  Arr out({bs, n, c});
  for (std::int64_t b = 0; b < bs; ++b)
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t ch = 0; ch < c; ++ch) out.at3(b, i, ch) = packed.at3(b, i, p * c + ch);
  return out;
}

inline Arr local_attention(const Arr& tokens, const gcvk::AttentionParams& p) {
  const Arr qkv = linear(tokens, p.qkv);
  const Arr table(p.bias_table);
  return linear(attention_core(part(qkv, 3, 0), part(qkv, 3, 1), part(qkv, 3, 2), p.heads, &table, &p.rel_index),
                p.proj);
}

inline Arr plain_attention(const Arr& tokens, const gcvk::AttentionParams& p) {
  const Arr qkv = linear(tokens, p.qkv);
  return linear(attention_core(part(qkv, 3, 0), part(qkv, 3, 1), part(qkv, 3, 2), p.heads, nullptr, nullptr),
                p.proj);
}

// q_g [B, C, h, w]; window b*N + r uses q_g batch entry b.
inline Arr global_attention(const Arr& tokens, const Arr& q_global, const gcvk::AttentionParams& p) {
  const Arr kv = linear(tokens, p.qkv);
  const std::int64_t bs = tokens.dim(0), n = tokens.dim(1), c = tokens.dim(2);
  const std::int64_t b = q_global.dim(0), per = bs / b, w = q_global.dim(3);
  Arr q({bs, n, c});
  for (std::int64_t win = 0; win < bs; ++win)
    for (std::int64_t t = 0; t < n; ++t)
      for (std::int64_t ch = 0; ch < c; ++ch) q.at3(win, t, ch) = q_global.at4(win / per, ch, t / w, t % w);
  const Arr table(p.bias_table);
  return linear(attention_core(q, part(kv, 2, 0), part(kv, 2, 1), p.heads, &table, &p.rel_index), p.proj);
}

inline Arr mlp(const Arr& x, const gcvk::MlpParams& p) { return linear(map(linear(x, p.fc1), gelu), p.fc2); }

inline Arr gcvit_block(const Arr& t, const Arr& q_global, const gcvk::GcVitBlockParams& p) {
  const Arr n1 = layernorm_last(t, p.norm1);
  const Arr h = add(p.is_global() ? global_attention(n1, q_global, p.attn) : local_attention(n1, p.attn), t);
  return add(mlp(layernorm_last(h, p.norm2), p.mlp), h);
}

inline Arr gcvit_stage(const Arr& x, const gcvk::GcVitStageParams& p) {
  const Arr h = downsample(x, p.down);
  const Arr q = gtg(h, p.gtg);
  Arr t = partition(h, p.window, p.window);
  for (const auto& blk : p.blocks) t = gcvit_block(t, q, blk);
  return reverse(t, h.dim(0), h.dim(1), h.dim(2), h.dim(3), p.window, p.window);
}

inline Arr channel_affine(const Arr& x, const gcvk::ChannelAffineParams& p) {
  const auto g = p.gamma.to_doubles(), b = p.beta.to_doubles();
  const std::int64_t c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Arr y(x.shape);
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(x.v.size()); ++i) {
    const auto ch = static_cast<std::size_t>((i / hw) % c);
    y.at(i) = x.at(i) * g[ch] + b[ch];
  }
  return y;
}

// Depthwise 1D conv, kernel 3, padding 1: x [B, D, T].
inline Arr conv1d(const Arr& x, const gcvk::Conv2dParams& p) {
  const Arr w(p.weight);
  const std::vector<double> bias = p.bias.defined() ? p.bias.to_doubles() : std::vector<double>();
  const std::int64_t b = x.dim(0), d = x.dim(1), t = x.dim(2);
  Arr y(x.shape);
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t c = 0; c < d; ++c)
      for (std::int64_t i = 0; i < t; ++i) {
        double s = bias.empty() ? 0.0 : bias[static_cast<std::size_t>(c)];
        for (std::int64_t k = 0; k < 3; ++k) {
          const std::int64_t j = i - 1 + k;
          if (j >= 0 && j < t) s += w.at(c * 3 + k) * x.at3(bi, c, j);
        }
        y.at3(bi, c, i) = s;
      }
  return y;
}

// Naive recurrence: x, delta [B, D, T]; a [D, M]; b, c [B, M, T]; skip [D] or empty.
inline Arr scan(const Arr& x, const Arr& delta, const Arr& a, const Arr& b, const Arr& c,
                const std::vector<double>& skip) {
  const std::int64_t bs = x.dim(0), d = x.dim(1), t = x.dim(2), m = a.dim(1);
  Arr y(x.shape);
  for (std::int64_t bi = 0; bi < bs; ++bi)
    for (std::int64_t ch = 0; ch < d; ++ch) {
      std::vector<double> h(static_cast<std::size_t>(m), 0.0);
      for (std::int64_t i = 0; i < t; ++i) {
        const double dt = delta.at3(bi, ch, i), xt = x.at3(bi, ch, i);
        double out = 0.0;
        for (std::int64_t s = 0; s < m; ++s) {
          const double am = a.at(ch * m + s);
          const double abar = std::exp(dt * am);
          const double bbar = (1.0 / (dt * am)) * (abar - 1.0) * (dt * b.at3(bi, s, i));
          h[static_cast<std::size_t>(s)] = abar * h[static_cast<std::size_t>(s)] + bbar * xt;
          out += c.at3(bi, s, i) * h[static_cast<std::size_t>(s)];
        }
        y.at3(bi, ch, i) = out + (skip.empty() ? 0.0 : skip[static_cast<std::size_t>(ch)] * xt);
      }
    }
  return y;
}

inline Arr transpose12(const Arr& x) {
  const std::int64_t b = x.dim(0), n = x.dim(1), c = x.dim(2);
  Arr y({b, c, n});
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < c; ++j) y.at3(bi, j, i) = x.at3(bi, i, j);
  return y;
}

// Columns [from, from + len) of the last axis.
inline Arr columns(const Arr& x, std::int64_t from, std::int64_t len) {
  const std::int64_t c = x.shape.back(), rows = static_cast<std::int64_t>(x.v.size()) / c;
  Shape s = x.shape;
  s.back() = len;
  Arr y(s);
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t j = 0; j < len; ++j) y.at(r * len + j) = x.at(r * c + from + j);
  return y;
}

// x [B, T, C] -> [B, T, C]
inline Arr mixer(const Arr& x, const gcvk::mamba::MixerParams& p) {
  const std::int64_t half = p.dim / 2, b = x.dim(0), t = x.dim(1);
  const Arr proj = linear(x, p.in_proj);
  const Arr xs = map(conv1d(transpose12(columns(proj, 0, half)), p.conv_x), silu);     // [B, D, T]
  const Arr zs = map(conv1d(transpose12(columns(proj, half, half)), p.conv_z), silu);  // [B, D, T]
  const Arr dbl = linear(transpose12(xs), p.x_proj);                                   // [B, T, R + 2M]
  const Arr delta = transpose12(map(linear(columns(dbl, 0, p.dt_rank), p.dt_proj), softplus));
  const Arr bm = transpose12(columns(dbl, p.dt_rank, p.state));
  const Arr cm = transpose12(columns(dbl, p.dt_rank + p.state, p.state));
  const Arr a = map(Arr(p.a_log), [](double v) { return -std::exp(v); });
  const Arr ys = scan(xs, delta, a, bm, cm, p.d_skip.to_doubles());
  Arr joined({b, t, p.dim});
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t i = 0; i < t; ++i)
      for (std::int64_t c = 0; c < half; ++c) {
        joined.at3(bi, i, c) = ys.at3(bi, c, i);
        joined.at3(bi, i, half + c) = zs.at3(bi, c, i);
      }
  return linear(joined, p.out_proj);
}

inline Arr hybrid_layer(const Arr& x, const gcvk::mamba::HybridLayerParams& p) {
  const Arr n1 = layernorm_last(x, p.norm1);
  const Arr h = add(p.kind == gcvk::mamba::LayerKind::mamba ? mixer(n1, p.mixer) : plain_attention(n1, p.attn), x);
  return add(mlp(layernorm_last(h, p.norm2), p.mlp), h);
}

inline Arr to_tokens(const Arr& x) {
  const std::int64_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Arr t({b, hw, c});
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t i = 0; i < hw; ++i) t.at3(bi, i, ch) = x.at((bi * c + ch) * hw + i);
  return t;
}

inline Arr from_tokens(const Arr& t, std::int64_t h, std::int64_t w) {
  const std::int64_t b = t.dim(0), hw = t.dim(1), c = t.dim(2);
  Arr x({b, c, h, w});
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t i = 0; i < hw; ++i) x.at((bi * c + ch) * hw + i) = t.at3(bi, i, ch);
  return x;
}

// Whole-model forward composed from the scalar blocks above.
inline Arr model_forward(const gcvk::Model& m, const Arr& images) {
  Arr h;
  if (m.config.mixer == gcvk::MixerKind::gcvit) {
    h = fused_mbconv(conv2d(images, m.stem.conv), m.stem.mbconv);
    for (const auto& s : m.stages) h = gcvit_stage(h, s);
  } else {
    h = images;
    for (const auto& u : m.hybrid_stem) h = map(channel_affine(conv2d(h, u.conv), u.norm), [](double v) {
      return std::max(v, 0.0);
    });
    for (const auto& s : m.hybrid_stages) {
      if (s.has_down) h = channel_affine(conv2d(h, s.down.conv), s.down.norm);
      for (const auto& blk : s.convs) {
        const Arr inner = map(channel_affine(conv2d(h, blk.first.conv), blk.first.norm), gelu);
        h = add(channel_affine(conv2d(inner, blk.second.conv), blk.second.norm), h);
      }
      if (s.layers.empty()) continue;
      const std::int64_t hh = h.dim(2), ww = h.dim(3);
      Arr t = to_tokens(h);
      for (const auto& l : s.layers) t = hybrid_layer(t, l);
      h = from_tokens(t, hh, ww);
    }
  }
  return linear(avgpool(layernorm_channels(h, m.head_norm)), m.head);
}

inline double max_abs_diff(const Arr& a, const Tensor& t) {
  const auto v = t.to_doubles();
  double m = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) m = std::max(m, std::abs(a.v[i] - v[i]));
  return m;
}

}  // namespace oracle

#include "gcvk/mamba.hpp"

#include <cmath>

#include "gcvk/autograd.hpp"
#include "gcvk/flops.hpp"

namespace gcvk::mamba {

Discretized discretize(std::span<const double> a, std::span<const double> b, double delta) {
  require(delta > 0.0, ErrorKind::domain, "discretize: delta must be positive, got " + std::to_string(delta));
  require(a.size() == b.size(), ErrorKind::shape, "discretize: A and B lengths differ");
  Discretized out;
  out.a_bar.resize(a.size());
  out.b_bar.resize(a.size());
  for (std::size_t m = 0; m < a.size(); ++m) {
    require(a[m] < 0.0, ErrorKind::domain, "discretize: A entries must be negative");
    out.a_bar[m] = std::exp(delta * a[m]);
    out.b_bar[m] = std::expm1(delta * a[m]) / a[m] * b[m];
  }
  return out;
}

namespace {

struct ScanDims {
  std::int64_t batch, channels, steps, state;
};

ScanDims check_scan(const Tensor& x, const Tensor& delta, const Tensor& a, const Tensor& b, const Tensor& c,
                    const Tensor& d_skip) {
  require(x.rank() == 3, ErrorKind::shape, "selective_scan: x must be [B, D, T], got " + shape_str(x.shape()));
  ScanDims s{x.dim(0), x.dim(1), x.dim(2), a.rank() == 2 ? a.dim(1) : 0};
  require(delta.shape() == x.shape(), ErrorKind::shape,
          "selective_scan: delta " + shape_str(delta.shape()) + " must match x " + shape_str(x.shape()));
  require(a.rank() == 2 && a.dim(0) == s.channels, ErrorKind::shape,
          "selective_scan: A must be [D, M], got " + shape_str(a.shape()));
  const Shape bc{s.batch, s.state, s.steps};
  require(b.shape() == bc && c.shape() == bc, ErrorKind::shape,
          "selective_scan: B and C must be " + shape_str(bc) + ", got " + shape_str(b.shape()) + " and " +
              shape_str(c.shape()));
  if (d_skip.defined()) {
    require(d_skip.rank() == 1 && d_skip.dim(0) == s.channels, ErrorKind::shape, "selective_scan: D must be [D]");
  }
  for (const Tensor* t : {&delta, &a, &b, &c}) {
    require(t->dtype() == x.dtype(), ErrorKind::usage, "selective_scan: mixed dtypes");
  }
  return s;
}

}  // namespace

Tensor selective_scan(const Tensor& x, const Tensor& delta, const Tensor& a, const Tensor& b, const Tensor& c,
                      const Tensor& d_skip) {
  const ScanDims s = check_scan(x, delta, a, b, c, d_skip);
  const auto xv = x.to_doubles();
  const auto dv = delta.to_doubles();
  const auto av = a.to_doubles();
  const auto bv = b.to_doubles();
  const auto cv = c.to_doubles();
  const std::vector<double> skip = d_skip.defined() ? d_skip.to_doubles() : std::vector<double>();
  for (double v : dv) require(std::isfinite(v), ErrorKind::numeric, "selective_scan: non-finite delta");
  for (double v : av) require(v < 0.0, ErrorKind::domain, "selective_scan: A entries must be negative");

  const std::int64_t B = s.batch, D = s.channels, T = s.steps, M = s.state;
  auto lane = [&](std::int64_t bi, std::int64_t d) { return (bi * D + d) * T; };
  auto bc_at = [&](std::int64_t bi, std::int64_t m, std::int64_t t) { return (bi * M + m) * T + t; };

  // Saved states [B, D, T, M] for backward.
  std::vector<double> hs(static_cast<std::size_t>(B * D * T * M));
  std::vector<double> y(static_cast<std::size_t>(B * D * T));
  for (std::int64_t bi = 0; bi < B; ++bi) {
    for (std::int64_t d = 0; d < D; ++d) {
      std::vector<double> h(static_cast<std::size_t>(M), 0.0);
      for (std::int64_t t = 0; t < T; ++t) {
        const double dt = dv[lane(bi, d) + t];
        const double xt = xv[lane(bi, d) + t];
        double acc = 0.0;
        for (std::int64_t m = 0; m < M; ++m) {
          const double am = av[d * M + m];
          const double a_bar = std::exp(dt * am);
          const double b_bar = std::expm1(dt * am) / am * bv[bc_at(bi, m, t)];
          h[m] = a_bar * h[m] + b_bar * xt;
          hs[((lane(bi, d) + t) * M) + m] = h[m];
          acc += cv[bc_at(bi, m, t)] * h[m];
        }
        y[lane(bi, d) + t] = skip.empty() ? acc : acc + skip[d] * xt;
      }
    }
  }
  // a_bar h + b_bar x and <C, h> per state, plus the skip term.
  count_macs(static_cast<std::uint64_t>(B * D * T * (3 * M + (skip.empty() ? 0 : 1))));
  Tensor out = Tensor::from_doubles(x.shape(), y, x.dtype());

  record_op({x, delta, a, b, c, d_skip}, out,
            [s, xv, dv, av, bv, cv, skip, hs = std::move(hs), dt = x.dtype(), has_skip = d_skip.defined()](
                const Tensor& g) {
              const std::int64_t B = s.batch, D = s.channels, T = s.steps, M = s.state;
              const auto gy = g.to_doubles();
              std::vector<double> gx(xv.size(), 0.0), gdelta(dv.size(), 0.0), ga(av.size(), 0.0);
              std::vector<double> gb(bv.size(), 0.0), gc(cv.size(), 0.0), gskip(static_cast<std::size_t>(D), 0.0);
              auto lane = [&](std::int64_t bi, std::int64_t d) { return (bi * D + d) * T; };
              auto bc_at = [&](std::int64_t bi, std::int64_t m, std::int64_t t) { return (bi * M + m) * T + t; };
              std::vector<double> gh(static_cast<std::size_t>(M));
              for (std::int64_t bi = 0; bi < B; ++bi) {
                for (std::int64_t d = 0; d < D; ++d) {
                  std::fill(gh.begin(), gh.end(), 0.0);
                  for (std::int64_t t = T - 1; t >= 0; --t) {
                    const std::int64_t li = lane(bi, d) + t;
                    const double gyt = gy[li];
                    const double xt = xv[li];
                    const double delta_t = dv[li];
                    double gxt = 0.0;
                    if (!skip.empty()) {
                      gskip[d] += gyt * xt;
                      gxt += gyt * skip[d];
                    }
                    double gdt = 0.0;
                    for (std::int64_t m = 0; m < M; ++m) {
                      const double h_t = hs[li * M + m];
                      const double h_prev = t > 0 ? hs[(li - 1) * M + m] : 0.0;
                      gc[bc_at(bi, m, t)] += gyt * h_t;
                      gh[m] += gyt * cv[bc_at(bi, m, t)];
                      const double am = av[d * M + m];
                      const double e = std::exp(delta_t * am);
                      const double em1 = std::expm1(delta_t * am);
                      const double gfac = em1 / am;
                      const double bm = bv[bc_at(bi, m, t)];
                      const double g_abar = gh[m] * h_prev;
                      const double g_bbar = gh[m] * xt;
                      gxt += gh[m] * gfac * bm;
                      gb[bc_at(bi, m, t)] += g_bbar * gfac;
                      const double g_fac = g_bbar * bm;
                      gdt += g_abar * am * e + g_fac * e;
                      ga[d * M + m] += g_abar * delta_t * e + g_fac * (delta_t * e * am - em1) / (am * am);
                      gh[m] *= e;
                    }
                    gx[li] = gxt;
                    gdelta[li] = gdt;
                  }
                }
              }
              const Shape xs{B, D, T}, bs{B, M, T};
              std::vector<Tensor> res{Tensor::from_doubles(xs, gx, dt), Tensor::from_doubles(xs, gdelta, dt),
                                      Tensor::from_doubles({D, M}, ga, dt), Tensor::from_doubles(bs, gb, dt),
                                      Tensor::from_doubles(bs, gc, dt), Tensor()};
              if (has_skip) res[5] = Tensor::from_doubles({D}, gskip, dt);
              return res;
            });
  return out;
}

std::vector<double> ssm_conv_kernel(std::span<const double> a, std::span<const double> delta,
                                    std::span<const double> b, std::span<const double> c, std::int64_t steps) {
  const auto M = static_cast<std::int64_t>(a.size());
  require(steps >= 1 && static_cast<std::int64_t>(delta.size()) == steps &&
              static_cast<std::int64_t>(b.size()) == M * steps && static_cast<std::int64_t>(c.size()) == M * steps,
          ErrorKind::shape, "ssm_conv_kernel: expected delta [T], B and C [M, T]");
  for (std::int64_t t = 1; t < steps; ++t) {
    bool frozen = delta[t] == delta[0];
    for (std::int64_t m = 0; m < M; ++m) {
      frozen = frozen && b[m * steps + t] == b[m * steps] && c[m * steps + t] == c[m * steps];
    }
    require(frozen, ErrorKind::unsupported,
            "ssm_conv_kernel: parameters vary over time (selective mode has no convolution kernel)");
  }
  std::vector<double> b0(static_cast<std::size_t>(M)), c0(static_cast<std::size_t>(M));
  for (std::int64_t m = 0; m < M; ++m) {
    b0[m] = b[m * steps];
    c0[m] = c[m * steps];
  }
  const Discretized ssm = discretize(a, b0, delta[0]);
  std::vector<double> kernel(static_cast<std::size_t>(steps));
  std::vector<double> power(ssm.b_bar);  // a_bar^t * b_bar
  for (std::int64_t t = 0; t < steps; ++t) {
    double k = 0.0;
    for (std::int64_t m = 0; m < M; ++m) {
      k += c0[m] * power[m];
      power[m] *= ssm.a_bar[m];
    }
    kernel[t] = k;
  }
  return kernel;
}

std::vector<double> causal_conv(std::span<const double> x, std::span<const double> kernel) {
  std::vector<double> y(x.size(), 0.0);
  for (std::size_t t = 0; t < x.size(); ++t) {
    double acc = 0.0;
    for (std::size_t s = 0; s <= t && s < kernel.size(); ++s) acc += kernel[s] * x[t - s];
    y[t] = acc;
  }
  return y;
}

namespace {

Conv2dParams init_conv1d(std::int64_t channels, DType dtype, Rng& rng) {
  Conv2dParams p;
  p.opt.pad_w = 1;
  p.opt.groups = static_cast<int>(channels);
  p.weight = rng.randn({channels, 1, 1, 3}, dtype, std::sqrt(2.0 / 3.0));
  p.bias = Tensor::zeros({channels}, dtype);
  return p;
}

}  // namespace

MixerParams MixerParams::init(std::int64_t dim, std::int64_t state, DType dtype, Rng& rng, double dt_min,
                              double dt_max) {
  require(dim >= 2 && dim % 2 == 0, ErrorKind::config,
          "mamba mixer: embedding dim must be even, got " + std::to_string(dim));
  require(state >= 1, ErrorKind::config, "mamba mixer: state size must be >= 1");
  MixerParams p;
  p.dim = dim;
  p.state = state;
  p.dt_rank = (dim + 15) / 16;
  const std::int64_t half = dim / 2;
  p.in_proj = LinearParams::init(dim, dim, dtype, rng);
  p.conv_x = init_conv1d(half, dtype, rng);
  p.conv_z = init_conv1d(half, dtype, rng);
  p.x_proj = LinearParams::init(half, p.dt_rank + 2 * state, dtype, rng);
  p.dt_proj.weight = rng.uniform({half, p.dt_rank}, dtype, -1.0 / std::sqrt(static_cast<double>(p.dt_rank)),
                                 1.0 / std::sqrt(static_cast<double>(p.dt_rank)));
  // Bias is softplus^-1 of a log-uniform step in [dt_min, dt_max].
  std::vector<double> dt_bias(static_cast<std::size_t>(half));
  for (auto& v : dt_bias) {
    const double dt = std::max(1e-4, std::exp(rng.uniform(std::log(dt_min), std::log(dt_max))));
    v = dt + std::log(-std::expm1(-dt));
  }
  p.dt_proj.bias = Tensor::from_doubles({half}, dt_bias, dtype);
  std::vector<double> a_log(static_cast<std::size_t>(half * state));
  for (std::int64_t d = 0; d < half; ++d) {
    for (std::int64_t m = 0; m < state; ++m) a_log[d * state + m] = std::log(static_cast<double>(m + 1));
  }
  p.a_log = Tensor::from_doubles({half, state}, a_log, dtype);
  p.d_skip = Tensor::full({half}, 1.0, dtype);
  p.out_proj = LinearParams::init(dim, dim, dtype, rng);
  return p;
}

void MixerParams::visit(const std::string& prefix, const ParamFn& fn) {
  in_proj.visit(join_name(prefix, "in_proj"), fn);
  conv_x.visit(join_name(prefix, "conv_x"), fn);
  conv_z.visit(join_name(prefix, "conv_z"), fn);
  x_proj.visit(join_name(prefix, "x_proj"), fn);
  dt_proj.visit(join_name(prefix, "dt_proj"), fn);
  fn(join_name(prefix, "a_log"), a_log);
  fn(join_name(prefix, "d_skip"), d_skip);
  out_proj.visit(join_name(prefix, "out_proj"), fn);
}

Tensor depthwise_conv1d(const Tensor& x, const Conv2dParams& conv) {
  const std::int64_t b = x.dim(0), d = x.dim(1), t = x.dim(2);
  return ops::reshape(conv(ops::reshape(x, {b, d, 1, t})), {b, d, t});
}

Tensor mixer(const Tensor& x, const MixerParams& p) {
  require(x.rank() == 3 && x.dim(2) == p.dim, ErrorKind::shape,
          "mamba mixer: input " + shape_str(x.shape()) + " does not have " + std::to_string(p.dim) + " channels");
  const std::int64_t half = p.branch();
  const auto branches = ops::split(p.in_proj(x), {half, half}, 2);  // [B, T, C/2] each
  const Tensor xs = ops::silu(depthwise_conv1d(ops::permute(branches[0], {0, 2, 1}), p.conv_x));  // [B, C/2, T]
  const Tensor zs = ops::silu(depthwise_conv1d(ops::permute(branches[1], {0, 2, 1}), p.conv_z));

  const auto dbl = ops::split(p.x_proj(ops::permute(xs, {0, 2, 1})), {p.dt_rank, p.state, p.state}, 2);
  const Tensor delta = ops::permute(ops::softplus(p.dt_proj(dbl[0])), {0, 2, 1});  // [B, C/2, T]
  const Tensor bmat = ops::permute(dbl[1], {0, 2, 1});                              // [B, M, T]
  const Tensor cmat = ops::permute(dbl[2], {0, 2, 1});
  const Tensor a = ops::scale(ops::exp(p.a_log), -1.0);

  const Tensor scanned = selective_scan(xs, delta, a, bmat, cmat, p.d_skip);
  const Tensor joined = ops::permute(ops::concat({scanned, zs}, 1), {0, 2, 1});  // [B, T, C]
  return p.out_proj(joined);
}

std::string hybrid_pattern(int layers) {
  require(layers >= 1, ErrorKind::config, "hybrid stage needs at least one layer");
  const int mixers = (layers + 1) / 2;
  return std::string(static_cast<std::size_t>(mixers), 'M') + std::string(static_cast<std::size_t>(layers - mixers), 'S');
}

HybridLayerParams HybridLayerParams::init(LayerKind kind, std::int64_t dim, std::int64_t heads, double mlp_ratio,
                                          std::int64_t state, DType dtype, Rng& rng) {
  HybridLayerParams p;
  p.kind = kind;
  p.norm1 = LayerNormParams::init(dim, dtype);
  if (kind == LayerKind::mamba) {
    p.mixer = MixerParams::init(dim, state, dtype, rng);
  } else {
    p.attn = AttentionParams::init(AttentionKind::plain, dim, heads, 1, 1, dtype, rng);
  }
  p.norm2 = LayerNormParams::init(dim, dtype);
  p.mlp = MlpParams::init(dim, static_cast<std::int64_t>(std::llround(mlp_ratio * static_cast<double>(dim))), dtype,
                          rng);
  return p;
}

void HybridLayerParams::visit(const std::string& prefix, const ParamFn& fn) {
  norm1.visit(join_name(prefix, "norm1"), fn);
  if (kind == LayerKind::mamba) {
    mixer.visit(join_name(prefix, "mixer"), fn);
  } else {
    attn.visit(join_name(prefix, "attn"), fn);
  }
  norm2.visit(join_name(prefix, "norm2"), fn);
  mlp.visit(join_name(prefix, "mlp"), fn);
}

Tensor hybrid_layer(const Tensor& x, const HybridLayerParams& p) {
  Tensor mixed;
  if (p.kind == LayerKind::mamba) {
    CostCategoryScope cat(CostCategory::mixer);
    mixed = mixer(p.norm1(x), p.mixer);
  } else {
    CostCategoryScope cat(CostCategory::attention);
    mixed = self_attention(p.norm1(x), p.attn);
  }
  const Tensor h = ops::add(x, mixed);
  CostCategoryScope cat(CostCategory::mlp);
  return ops::add(h, p.mlp(p.norm2(h)));
}

}  // namespace gcvk::mamba

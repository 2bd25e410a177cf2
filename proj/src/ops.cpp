#include "gcvk/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "gcvk/autograd.hpp"
#include "gcvk/flops.hpp"

namespace gcvk::ops {
namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

void same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  require(a.dtype() == b.dtype(), ErrorKind::usage,
          std::string(op) + ": mixed dtypes " + to_string(a.dtype()) + " and " + to_string(b.dtype()));
}

int normalize_axis(int axis, int rank, const char* op) {
  if (axis < 0) axis += rank;
  require(axis >= 0 && axis < rank, ErrorKind::shape,
          std::string(op) + ": axis out of range for rank " + std::to_string(rank));
  return axis;
}

std::vector<std::int64_t> strides_of(const Shape& shape) {
  std::vector<std::int64_t> s(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) s[i] = s[i + 1] * shape[i + 1];
  return s;
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const std::int64_t ea = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::int64_t eb = i < r - b.size() ? 1 : b[i - (r - b.size())];
    require(ea == eb || ea == 1 || eb == 1, ErrorKind::shape,
            std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) + " do not broadcast");
    out[i] = std::max(ea, eb);
  }
  return out;
}

// Strides of `in` viewed with the extents of `out` (0 on broadcast axes).
std::vector<std::int64_t> broadcast_strides(const Shape& in, const Shape& out) {
  const auto s = strides_of(in);
  std::vector<std::int64_t> r(out.size(), 0);
  const std::size_t off = out.size() - in.size();
  for (std::size_t i = 0; i < in.size(); ++i) r[off + i] = in[i] == 1 ? 0 : s[i];
  return r;
}

template <typename T, typename Op>
Tensor binary_kernel(const Tensor& a, const Tensor& b, const Shape& out, Op op) {
  auto da = a.data<T>();
  auto db = b.data<T>();
  const std::int64_t n = numel_of(out);
  std::vector<T> res(static_cast<std::size_t>(n));
  if (a.shape() == b.shape()) {
    for (std::int64_t i = 0; i < n; ++i) res[i] = op(da[i], db[i]);
  } else if (b.numel() == 1) {
    for (std::int64_t i = 0; i < n; ++i) res[i] = op(da[i], db[0]);
  } else {
    const auto sa = broadcast_strides(a.shape(), out);
    const auto sb = broadcast_strides(b.shape(), out);
    const int r = static_cast<int>(out.size());
    std::vector<std::int64_t> idx(out.size(), 0);
    std::int64_t ia = 0, ib = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      res[i] = op(da[ia], db[ib]);
      for (int d = r - 1; d >= 0; --d) {
        ++idx[d];
        ia += sa[d];
        ib += sb[d];
        if (idx[d] < out[d]) break;
        ia -= sa[d] * out[d];
        ib -= sb[d] * out[d];
        idx[d] = 0;
      }
    }
  }
  return Tensor::from<T>(out, std::move(res));
}

template <typename Op>
Tensor binary(const Tensor& a, const Tensor& b, const char* name, Op op) {
  same_dtype(a, b, name);
  const Shape out = broadcast_shape(a.shape(), b.shape(), name);
  return dispatch(a.dtype(), [&]<typename T>() { return binary_kernel<T>(a, b, out, op); });
}

// y = f(x) elementwise; df(x, y) is the local derivative.
template <typename F, typename DF>
Tensor unary(const Tensor& x, F f, DF df) {
  Tensor y = dispatch(x.dtype(), [&]<typename T>() {
    auto d = x.data<T>();
    std::vector<T> out(d.size());
    for (std::size_t i = 0; i < d.size(); ++i) out[i] = static_cast<T>(f(static_cast<double>(d[i])));
    return Tensor::from<T>(x.shape(), std::move(out));
  });
  record_op({x}, y, [x, y, df](const Tensor& g) -> std::vector<Tensor> {
    return {dispatch(x.dtype(), [&]<typename T>() {
      auto dx = x.data<T>();
      auto dy = y.data<T>();
      auto dg = g.data<T>();
      std::vector<T> out(dx.size());
      for (std::size_t i = 0; i < dx.size(); ++i) {
        out[i] = static_cast<T>(static_cast<double>(dg[i]) *
                                df(static_cast<double>(dx[i]), static_cast<double>(dy[i])));
      }
      return Tensor::from<T>(x.shape(), std::move(out));
    })};
  });
  return y;
}

double sigmoid_scalar(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

}  // namespace

Tensor sum_to(const Tensor& x, const Shape& shape) {
  if (x.shape() == shape) return x;
  require(shape.size() <= x.shape().size(), ErrorKind::shape,
          "sum_to: cannot reduce " + shape_str(x.shape()) + " to " + shape_str(shape));
  const auto ts = broadcast_strides(shape, x.shape());
  for (std::size_t i = 0; i < shape.size(); ++i) {
    const auto xi = x.shape()[x.shape().size() - shape.size() + i];
    require(shape[i] == xi || shape[i] == 1, ErrorKind::shape,
            "sum_to: cannot reduce " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  Tensor y = dispatch(x.dtype(), [&]<typename T>() {
    auto d = x.data<T>();
    std::vector<T> out(static_cast<std::size_t>(numel_of(shape)), T(0));
    const Shape& xs = x.shape();
    const int r = static_cast<int>(xs.size());
    std::vector<std::int64_t> idx(xs.size(), 0);
    std::int64_t it = 0;
    for (std::size_t i = 0; i < d.size(); ++i) {
      out[it] += d[i];
      for (int k = r - 1; k >= 0; --k) {
        ++idx[k];
        it += ts[k];
        if (idx[k] < xs[k]) break;
        it -= ts[k] * xs[k];
        idx[k] = 0;
      }
    }
    return Tensor::from<T>(shape, std::move(out));
  });
  const Shape xshape = x.shape();
  record_op({x}, y, [xshape](const Tensor& g) -> std::vector<Tensor> {
    Tensor full = Tensor::zeros(xshape, g.dtype());
    return {add(full, g)};
  });
  return y;
}

Tensor add(const Tensor& a, const Tensor& b) {
  Tensor y = binary(a, b, "add", [](auto u, auto v) { return u + v; });
  const Shape sa = a.shape(), sb = b.shape();
  record_op({a, b}, y, [sa, sb](const Tensor& g) -> std::vector<Tensor> {
    return {sum_to(g, sa), sum_to(g, sb)};
  });
  return y;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  Tensor y = binary(a, b, "sub", [](auto u, auto v) { return u - v; });
  const Shape sa = a.shape(), sb = b.shape();
  record_op({a, b}, y, [sa, sb](const Tensor& g) -> std::vector<Tensor> {
    return {sum_to(g, sa), scale(sum_to(g, sb), -1.0)};
  });
  return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  Tensor y = binary(a, b, "mul", [](auto u, auto v) { return u * v; });
  record_op({a, b}, y, [a, b](const Tensor& g) -> std::vector<Tensor> {
    return {sum_to(mul(g, b), a.shape()), sum_to(mul(g, a), b.shape())};
  });
  return y;
}

Tensor scale(const Tensor& x, double s) {
  Tensor y = dispatch(x.dtype(), [&]<typename T>() {
    auto d = x.data<T>();
    std::vector<T> out(d.size());
    const T st = static_cast<T>(s);
    for (std::size_t i = 0; i < d.size(); ++i) out[i] = d[i] * st;
    return Tensor::from<T>(x.shape(), std::move(out));
  });
  record_op({x}, y, [s](const Tensor& g) -> std::vector<Tensor> { return {scale(g, s)}; });
  return y;
}

Tensor add_scalar(const Tensor& x, double s) {
  Tensor y = dispatch(x.dtype(), [&]<typename T>() {
    auto d = x.data<T>();
    std::vector<T> out(d.size());
    const T st = static_cast<T>(s);
    for (std::size_t i = 0; i < d.size(); ++i) out[i] = d[i] + st;
    return Tensor::from<T>(x.shape(), std::move(out));
  });
  record_op({x}, y, [](const Tensor& g) -> std::vector<Tensor> { return {g}; });
  return y;
}

Tensor relu(const Tensor& x) {
  return unary(
      x, [](double v) { return v > 0 ? v : 0.0; }, [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  return unary(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [](double v, double) {
        return 0.5 * (1.0 + std::erf(v * kInvSqrt2)) + v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
      });
}

Tensor silu(const Tensor& x) {
  return unary(
      x, [](double v) { return v * sigmoid_scalar(v); },
      [](double v, double) {
        const double s = sigmoid_scalar(v);
        return s * (1.0 + v * (1.0 - s));
      });
}

Tensor sigmoid(const Tensor& x) {
  return unary(x, sigmoid_scalar, [](double, double s) { return s * (1.0 - s); });
}

Tensor softplus(const Tensor& x) {
  return unary(
      x, [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); },
      [](double v, double) { return sigmoid_scalar(v); });
}

Tensor exp(const Tensor& x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor sum(const Tensor& x) {
  Tensor y = dispatch(x.dtype(), [&]<typename T>() {
    T acc = 0;
    for (T v : x.data<T>()) acc += v;
    return Tensor::from<T>({}, {acc});
  });
  const Shape xs = x.shape();
  record_op({x}, y, [xs](const Tensor& g) -> std::vector<Tensor> {
    return {Tensor::full(xs, g.item(), g.dtype())};
  });
  return y;
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  same_dtype(a, b, "matmul");
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  auto mismatch = [&] {
    return "matmul: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb);
  };
  require(sa.size() >= 2 && sa.size() == sb.size(), ErrorKind::shape, mismatch());
  const std::size_t r = sa.size();
  require(std::equal(sa.begin(), sa.end() - 2, sb.begin()), ErrorKind::shape, mismatch());
  require(sa[r - 1] == sb[r - 2], ErrorKind::shape, mismatch());
  const std::int64_t m = sa[r - 2], k = sa[r - 1], n = sb[r - 1];
  const std::int64_t batch = a.numel() / (m * k);
  Shape out = sa;
  out[r - 1] = n;
  count_macs(static_cast<std::uint64_t>(batch * m * k * n));
  Tensor y = dispatch(a.dtype(), [&]<typename T>() {
    auto da = a.data<T>();
    auto db = b.data<T>();
    std::vector<T> c(static_cast<std::size_t>(batch * m * n), T(0));
    for (std::int64_t bi = 0; bi < batch; ++bi) {
      const T* A = da.data() + bi * m * k;
      const T* B = db.data() + bi * k * n;
      T* C = c.data() + bi * m * n;
      for (std::int64_t i = 0; i < m; ++i) {
        T* crow = C + i * n;
        for (std::int64_t p = 0; p < k; ++p) {
          const T aip = A[i * k + p];
          const T* brow = B + p * n;
          for (std::int64_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
      }
    }
    return Tensor::from<T>(out, std::move(c));
  });
  record_op({a, b}, y, [a, b](const Tensor& g) -> std::vector<Tensor> {
    return {matmul(g, transpose_last2(b)), matmul(transpose_last2(a), g)};
  });
  return y;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  same_dtype(x, weight, "linear");
  require(weight.rank() == 2, ErrorKind::shape, "linear: weight must be [out, in], got " + shape_str(weight.shape()));
  const std::int64_t in = weight.dim(1), outf = weight.dim(0);
  require(x.rank() >= 1 && x.dim(-1) == in, ErrorKind::shape,
          "linear: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(weight.shape()));
  if (bias.defined()) {
    same_dtype(x, bias, "linear");
    require(bias.rank() == 1 && bias.dim(0) == outf, ErrorKind::shape,
            "linear: bias " + shape_str(bias.shape()) + " does not match " + std::to_string(outf) + " outputs");
  }
  const std::int64_t rows = x.numel() / in;
  Shape out = x.shape();
  out.back() = outf;
  count_macs(static_cast<std::uint64_t>(rows * in * outf));
  Tensor y = dispatch(x.dtype(), [&]<typename T>() {
    auto dx = x.data<T>();
    auto dw = weight.data<T>();
    const T* db = bias.defined() ? bias.data<T>().data() : nullptr;
    std::vector<T> res(static_cast<std::size_t>(rows * outf));
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* xr = dx.data() + r * in;
      for (std::int64_t o = 0; o < outf; ++o) {
        const T* wr = dw.data() + o * in;
        T acc = 0;
        for (std::int64_t i = 0; i < in; ++i) acc += xr[i] * wr[i];
        res[r * outf + o] = db ? acc + db[o] : acc;
      }
    }
    return Tensor::from<T>(out, std::move(res));
  });
  record_op({x, weight, bias}, y, [x, weight, bias, rows, in, outf](const Tensor& g) -> std::vector<Tensor> {
    return dispatch(x.dtype(), [&]<typename T>() -> std::vector<Tensor> {
      auto dx = x.data<T>();
      auto dw = weight.data<T>();
      auto dg = g.data<T>();
      std::vector<T> gx(dx.size(), T(0)), gw(dw.size(), T(0)), gb(static_cast<std::size_t>(outf), T(0));
      for (std::int64_t r = 0; r < rows; ++r) {
        const T* gr = dg.data() + r * outf;
        const T* xr = dx.data() + r * in;
        T* gxr = gx.data() + r * in;
        for (std::int64_t o = 0; o < outf; ++o) {
          const T go = gr[o];
          const T* wr = dw.data() + o * in;
          T* gwr = gw.data() + o * in;
          for (std::int64_t i = 0; i < in; ++i) {
            gxr[i] += go * wr[i];
            gwr[i] += go * xr[i];
          }
          gb[o] += go;
        }
      }
      std::vector<Tensor> res{Tensor::from<T>(x.shape(), std::move(gx)),
                              Tensor::from<T>(weight.shape(), std::move(gw)), Tensor()};
      if (bias.defined()) res[2] = Tensor::from<T>(bias.shape(), std::move(gb));
      return res;
    });
  });
  return y;
}

Tensor softmax(const Tensor& x, int axis) {
  axis = normalize_axis(axis, x.rank(), "softmax");
  const Shape& s = x.shape();
  const std::int64_t n = s[axis];
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (int i = axis + 1; i < x.rank(); ++i) inner *= s[i];
  Tensor y = dispatch(x.dtype(), [&]<typename T>() {
    auto d = x.data<T>();
    std::vector<T> out(d.size());
    for (std::int64_t o = 0; o < outer; ++o) {
      for (std::int64_t in = 0; in < inner; ++in) {
        const std::int64_t base = o * n * inner + in;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::int64_t j = 0; j < n; ++j) {
          const T v = d[base + j * inner];
          require(!std::isnan(v), ErrorKind::numeric, "softmax: NaN input");
          mx = std::max(mx, v);
        }
        T total = 0;
        for (std::int64_t j = 0; j < n; ++j) {
          const T e = std::exp(d[base + j * inner] - mx);
          out[base + j * inner] = e;
          total += e;
        }
        for (std::int64_t j = 0; j < n; ++j) out[base + j * inner] /= total;
      }
    }
    return Tensor::from<T>(s, std::move(out));
  });
  record_op({x}, y, [y, outer, inner, n](const Tensor& g) -> std::vector<Tensor> {
    const double fault = testing::gradient_fault() ? 1.5 : 1.0;
    return {dispatch(y.dtype(), [&]<typename T>() {
      auto dy = y.data<T>();
      auto dg = g.data<T>();
      std::vector<T> out(dy.size());
      for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
          const std::int64_t base = o * n * inner + in;
          T dot = 0;
          for (std::int64_t j = 0; j < n; ++j) dot += dg[base + j * inner] * dy[base + j * inner];
          for (std::int64_t j = 0; j < n; ++j) {
            const std::int64_t idx = base + j * inner;
            out[idx] = static_cast<T>(fault) * dy[idx] * (dg[idx] - dot);
          }
        }
      }
      return Tensor::from<T>(y.shape(), std::move(out));
    })};
  });
  return y;
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  same_dtype(x, gamma, "layernorm");
  same_dtype(x, beta, "layernorm");
  require(eps > 0, ErrorKind::domain, "layernorm: eps must be positive");
  const std::int64_t c = x.dim(-1);
  require(gamma.rank() == 1 && gamma.dim(0) == c && beta.rank() == 1 && beta.dim(0) == c, ErrorKind::shape,
          "layernorm: gamma/beta must have length " + std::to_string(c));
  const std::int64_t rows = x.numel() / c;
  std::vector<double> xhat(static_cast<std::size_t>(x.numel()));
  std::vector<double> rstd(static_cast<std::size_t>(rows));
  Tensor y = dispatch(x.dtype(), [&]<typename T>() {
    auto d = x.data<T>();
    auto dgam = gamma.data<T>();
    auto dbet = beta.data<T>();
    std::vector<T> out(d.size());
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* xr = d.data() + r * c;
      double m = 0;
      for (std::int64_t i = 0; i < c; ++i) m += xr[i];
      m /= static_cast<double>(c);
      double v = 0;
      for (std::int64_t i = 0; i < c; ++i) v += (xr[i] - m) * (xr[i] - m);
      v /= static_cast<double>(c);
      const double rs = 1.0 / std::sqrt(v + eps);
      rstd[r] = rs;
      for (std::int64_t i = 0; i < c; ++i) {
        const double h = (xr[i] - m) * rs;
        xhat[r * c + i] = h;
        out[r * c + i] = static_cast<T>(h * dgam[i] + dbet[i]);
      }
    }
    return Tensor::from<T>(x.shape(), std::move(out));
  });
  record_op({x, gamma, beta}, y,
            [x, gamma, beta, xhat = std::move(xhat), rstd = std::move(rstd), rows, c](const Tensor& g) {
              return dispatch(x.dtype(), [&]<typename T>() -> std::vector<Tensor> {
                auto dg = g.data<T>();
                auto dgam = gamma.data<T>();
                std::vector<T> gx(static_cast<std::size_t>(rows * c));
                std::vector<double> ggam(static_cast<std::size_t>(c), 0.0), gbet(static_cast<std::size_t>(c), 0.0);
                for (std::int64_t r = 0; r < rows; ++r) {
                  double mean_gh = 0, mean_ghh = 0;
                  for (std::int64_t i = 0; i < c; ++i) {
                    const double gi = dg[r * c + i];
                    const double gh = gi * dgam[i];
                    mean_gh += gh;
                    mean_ghh += gh * xhat[r * c + i];
                    ggam[i] += gi * xhat[r * c + i];
                    gbet[i] += gi;
                  }
                  mean_gh /= static_cast<double>(c);
                  mean_ghh /= static_cast<double>(c);
                  for (std::int64_t i = 0; i < c; ++i) {
                    const double gh = dg[r * c + i] * static_cast<double>(dgam[i]);
                    gx[r * c + i] = static_cast<T>(rstd[r] * (gh - mean_gh - xhat[r * c + i] * mean_ghh));
                  }
                }
                return {Tensor::from<T>(x.shape(), std::move(gx)),
                        Tensor::from<T>(gamma.shape(), std::vector<T>(ggam.begin(), ggam.end())),
                        Tensor::from<T>(beta.shape(), std::vector<T>(gbet.begin(), gbet.end()))};
              });
            });
  return y;
}

namespace {

struct ConvGeom {
  std::int64_t n, cin, h, w, cout, kh, kw, hout, wout, groups, cin_g, cout_g;
  Conv2dOptions opt;
  std::int64_t kdim() const { return cin_g * kh * kw; }
  std::int64_t pix() const { return hout * wout; }
  bool pointwise() const {
    return kh == 1 && kw == 1 && opt.stride_h == 1 && opt.stride_w == 1 && opt.pad_h == 0 && opt.pad_w == 0;
  }
};

// Fills col[K, pix] for one (image, group); padding taps are zero.
template <typename T>
void im2col(const T* img, const ConvGeom& g, std::vector<T>& col) {
  const std::int64_t P = g.pix();
  col.assign(static_cast<std::size_t>(g.kdim() * P), T(0));
  for (std::int64_t c = 0; c < g.cin_g; ++c) {
    const T* plane = img + c * g.h * g.w;
    for (std::int64_t ky = 0; ky < g.kh; ++ky) {
      for (std::int64_t kx = 0; kx < g.kw; ++kx) {
        T* row = col.data() + ((c * g.kh + ky) * g.kw + kx) * P;
        for (std::int64_t oy = 0; oy < g.hout; ++oy) {
          const std::int64_t iy = oy * g.opt.stride_h - g.opt.pad_h + ky;
          if (iy < 0 || iy >= g.h) continue;
          for (std::int64_t ox = 0; ox < g.wout; ++ox) {
            const std::int64_t ix = ox * g.opt.stride_w - g.opt.pad_w + kx;
            if (ix >= 0 && ix < g.w) row[oy * g.wout + ox] = plane[iy * g.w + ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const std::vector<T>& col, const ConvGeom& g, T* img) {
  const std::int64_t P = g.pix();
  for (std::int64_t c = 0; c < g.cin_g; ++c) {
    T* plane = img + c * g.h * g.w;
    for (std::int64_t ky = 0; ky < g.kh; ++ky) {
      for (std::int64_t kx = 0; kx < g.kw; ++kx) {
        const T* row = col.data() + ((c * g.kh + ky) * g.kw + kx) * P;
        for (std::int64_t oy = 0; oy < g.hout; ++oy) {
          const std::int64_t iy = oy * g.opt.stride_h - g.opt.pad_h + ky;
          if (iy < 0 || iy >= g.h) continue;
          for (std::int64_t ox = 0; ox < g.wout; ++ox) {
            const std::int64_t ix = ox * g.opt.stride_w - g.opt.pad_w + kx;
            if (ix >= 0 && ix < g.w) plane[iy * g.w + ix] += row[oy * g.wout + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, const Conv2dOptions& opt) {
  same_dtype(x, w, "conv2d");
  require(x.rank() == 4 && w.rank() == 4, ErrorKind::shape,
          "conv2d: expected x [N,C,H,W] and w [Cout,Cin/g,kh,kw], got " + shape_str(x.shape()) + " and " +
              shape_str(w.shape()));
  require(opt.groups >= 1 && opt.stride_h >= 1 && opt.stride_w >= 1 && opt.pad_h >= 0 && opt.pad_w >= 0,
          ErrorKind::config, "conv2d: invalid stride/padding/groups");
  ConvGeom g{};
  g.opt = opt;
  g.n = x.dim(0);
  g.cin = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.cout = w.dim(0);
  g.kh = w.dim(2);
  g.kw = w.dim(3);
  g.groups = opt.groups;
  require(g.cin % g.groups == 0 && g.cout % g.groups == 0, ErrorKind::config,
          "conv2d: channels " + std::to_string(g.cin) + "->" + std::to_string(g.cout) +
              " not divisible by groups " + std::to_string(g.groups));
  g.cin_g = g.cin / g.groups;
  g.cout_g = g.cout / g.groups;
  require(w.dim(1) == g.cin_g, ErrorKind::shape,
          "conv2d: weight " + shape_str(w.shape()) + " incompatible with input " + shape_str(x.shape()));
  if (bias.defined()) {
    same_dtype(x, bias, "conv2d");
    require(bias.rank() == 1 && bias.dim(0) == g.cout, ErrorKind::shape, "conv2d: bias length mismatch");
  }
  g.hout = (g.h + 2 * opt.pad_h - g.kh) / opt.stride_h + 1;
  g.wout = (g.w + 2 * opt.pad_w - g.kw) / opt.stride_w + 1;
  require(g.h + 2 * opt.pad_h >= g.kh && g.w + 2 * opt.pad_w >= g.kw, ErrorKind::shape,
          "conv2d: kernel larger than padded input " + shape_str(x.shape()));
  count_macs(static_cast<std::uint64_t>(g.n * g.cout * g.pix() * g.kdim()));

  Tensor y = dispatch(x.dtype(), [&]<typename T>() {
    auto dx = x.data<T>();
    auto dw = w.data<T>();
    const T* db = bias.defined() ? bias.data<T>().data() : nullptr;
    const std::int64_t P = g.pix(), K = g.kdim();
    std::vector<T> out(static_cast<std::size_t>(g.n * g.cout * P), T(0));
    std::vector<T> col;
    for (std::int64_t ni = 0; ni < g.n; ++ni) {
      for (std::int64_t gi = 0; gi < g.groups; ++gi) {
        const T* img = dx.data() + (ni * g.cin + gi * g.cin_g) * g.h * g.w;
        const T* cols = img;
        if (!g.pointwise()) {
          im2col(img, g, col);
          cols = col.data();
        }
        for (std::int64_t oc = 0; oc < g.cout_g; ++oc) {
          const std::int64_t co = gi * g.cout_g + oc;
          T* orow = out.data() + (ni * g.cout + co) * P;
          const T* wr = dw.data() + co * K;
          for (std::int64_t k = 0; k < K; ++k) {
            const T wk = wr[k];
            const T* crow = cols + k * P;
            for (std::int64_t p = 0; p < P; ++p) orow[p] += wk * crow[p];
          }
          if (db) {
            for (std::int64_t p = 0; p < P; ++p) orow[p] += db[co];
          }
        }
      }
    }
    return Tensor::from<T>({g.n, g.cout, g.hout, g.wout}, std::move(out));
  });

  record_op({x, w, bias}, y, [x, w, bias, g](const Tensor& gout) {
    return dispatch(x.dtype(), [&]<typename T>() -> std::vector<Tensor> {
      auto dx = x.data<T>();
      auto dw = w.data<T>();
      auto dg = gout.data<T>();
      const std::int64_t P = g.pix(), K = g.kdim();
      std::vector<T> gx(dx.size(), T(0)), gw(dw.size(), T(0)), gb(static_cast<std::size_t>(g.cout), T(0));
      std::vector<T> col, gcol;
      for (std::int64_t ni = 0; ni < g.n; ++ni) {
        for (std::int64_t gi = 0; gi < g.groups; ++gi) {
          const T* img = dx.data() + (ni * g.cin + gi * g.cin_g) * g.h * g.w;
          const T* cols = img;
          if (!g.pointwise()) {
            im2col(img, g, col);
            cols = col.data();
          }
          gcol.assign(static_cast<std::size_t>(K * P), T(0));
          for (std::int64_t oc = 0; oc < g.cout_g; ++oc) {
            const std::int64_t co = gi * g.cout_g + oc;
            const T* grow = dg.data() + (ni * g.cout + co) * P;
            const T* wr = dw.data() + co * K;
            T* gwr = gw.data() + co * K;
            for (std::int64_t k = 0; k < K; ++k) {
              const T* crow = cols + k * P;
              T* gcrow = gcol.data() + k * P;
              const T wk = wr[k];
              T acc = 0;
              for (std::int64_t p = 0; p < P; ++p) {
                acc += grow[p] * crow[p];
                gcrow[p] += wk * grow[p];
              }
              gwr[k] += acc;
            }
            T bacc = 0;
            for (std::int64_t p = 0; p < P; ++p) bacc += grow[p];
            gb[co] += bacc;
          }
          T* gimg = gx.data() + (ni * g.cin + gi * g.cin_g) * g.h * g.w;
          if (g.pointwise()) {
            for (std::int64_t i = 0; i < K * P; ++i) gimg[i] += gcol[i];
          } else {
            col2im_add(gcol, g, gimg);
          }
        }
      }
      std::vector<Tensor> res{Tensor::from<T>(x.shape(), std::move(gx)), Tensor::from<T>(w.shape(), std::move(gw)),
                              Tensor()};
      if (bias.defined()) res[2] = Tensor::from<T>(bias.shape(), std::move(gb));
      return res;
    });
  });
  return y;
}

Tensor maxpool2d(const Tensor& x, int kernel, int stride, int padding) {
  require(x.rank() == 4, ErrorKind::shape, "maxpool2d: expected [N,C,H,W], got " + shape_str(x.shape()));
  require(kernel >= 1 && stride >= 1 && padding >= 0 && 2 * padding <= kernel, ErrorKind::config,
          "maxpool2d: invalid kernel/stride/padding");
  const std::int64_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t ho = (h + 2 * padding - kernel) / stride + 1;
  const std::int64_t wo = (w + 2 * padding - kernel) / stride + 1;
  std::vector<std::int64_t> argmax(static_cast<std::size_t>(nc * ho * wo));
  Tensor y = dispatch(x.dtype(), [&]<typename T>() {
    auto d = x.data<T>();
    std::vector<T> out(argmax.size());
    for (std::int64_t p = 0; p < nc; ++p) {
      for (std::int64_t oy = 0; oy < ho; ++oy) {
        for (std::int64_t ox = 0; ox < wo; ++ox) {
          T best = -std::numeric_limits<T>::infinity();
          std::int64_t where = -1;
          for (int ky = 0; ky < kernel; ++ky) {
            const std::int64_t iy = oy * stride - padding + ky;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < kernel; ++kx) {
              const std::int64_t ix = ox * stride - padding + kx;
              if (ix < 0 || ix >= w) continue;
              const std::int64_t idx = p * h * w + iy * w + ix;
              if (where < 0 || d[idx] > best) {
                best = d[idx];
                where = idx;
              }
            }
          }
          const std::int64_t o = (p * ho + oy) * wo + ox;
          out[o] = best;
          argmax[o] = where;
        }
      }
    }
    return Tensor::from<T>({x.dim(0), x.dim(1), ho, wo}, std::move(out));
  });
  record_op({x}, y, [xs = x.shape(), argmax = std::move(argmax)](const Tensor& g) -> std::vector<Tensor> {
    return {dispatch(g.dtype(), [&]<typename T>() {
      auto dg = g.data<T>();
      std::vector<T> gx(static_cast<std::size_t>(numel_of(xs)), T(0));
      for (std::size_t o = 0; o < argmax.size(); ++o) gx[argmax[o]] += dg[o];
      return Tensor::from<T>(xs, std::move(gx));
    })};
  });
  return y;
}

Tensor global_avg_pool(const Tensor& x) {
  require(x.rank() == 4, ErrorKind::shape, "global_avg_pool: expected [N,C,H,W], got " + shape_str(x.shape()));
  const std::int64_t nc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor y = dispatch(x.dtype(), [&]<typename T>() {
    auto d = x.data<T>();
    std::vector<T> out(static_cast<std::size_t>(nc));
    for (std::int64_t p = 0; p < nc; ++p) {
      T acc = 0;
      for (std::int64_t i = 0; i < hw; ++i) acc += d[p * hw + i];
      out[p] = acc / static_cast<T>(hw);
    }
    return Tensor::from<T>({x.dim(0), x.dim(1)}, std::move(out));
  });
  record_op({x}, y, [xs = x.shape(), nc, hw](const Tensor& g) -> std::vector<Tensor> {
    return {dispatch(g.dtype(), [&]<typename T>() {
      auto dg = g.data<T>();
      std::vector<T> gx(static_cast<std::size_t>(nc * hw));
      for (std::int64_t p = 0; p < nc; ++p) {
        const T v = dg[p] / static_cast<T>(hw);
        for (std::int64_t i = 0; i < hw; ++i) gx[p * hw + i] = v;
      }
      return Tensor::from<T>(xs, std::move(gx));
    })};
  });
  return y;
}

Tensor reshape(const Tensor& x, const Shape& shape) {
  require(numel_of(shape) == x.numel(), ErrorKind::shape,
          "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  if (shape == x.shape()) return x;
  Tensor y = dispatch(x.dtype(), [&]<typename T>() {
    auto d = x.data<T>();
    return Tensor::from<T>(shape, std::vector<T>(d.begin(), d.end()));
  });
  record_op({x}, y, [xs = x.shape()](const Tensor& g) -> std::vector<Tensor> { return {reshape(g, xs)}; });
  return y;
}

Tensor permute(const Tensor& x, const std::vector<int>& perm) {
  const int r = x.rank();
  require(static_cast<int>(perm.size()) == r, ErrorKind::shape, "permute: permutation rank mismatch");
  std::vector<int> inv(r, -1);
  for (int i = 0; i < r; ++i) {
    require(perm[i] >= 0 && perm[i] < r && inv[perm[i]] < 0, ErrorKind::usage, "permute: invalid permutation");
    inv[perm[i]] = i;
  }
  const auto in_strides = strides_of(x.shape());
  Shape out(r);
  std::vector<std::int64_t> st(r);
  for (int i = 0; i < r; ++i) {
    out[i] = x.shape()[perm[i]];
    st[i] = in_strides[perm[i]];
  }
  Tensor y = dispatch(x.dtype(), [&]<typename T>() {
    auto d = x.data<T>();
    std::vector<T> res(d.size());
    std::vector<std::int64_t> idx(r, 0);
    std::int64_t src = 0;
    for (std::size_t i = 0; i < res.size(); ++i) {
      res[i] = d[src];
      for (int k = r - 1; k >= 0; --k) {
        ++idx[k];
        src += st[k];
        if (idx[k] < out[k]) break;
        src -= st[k] * out[k];
        idx[k] = 0;
      }
    }
    return Tensor::from<T>(out, std::move(res));
  });
  record_op({x}, y, [inv](const Tensor& g) -> std::vector<Tensor> { return {permute(g, inv)}; });
  return y;
}

Tensor transpose_last2(const Tensor& x) {
  require(x.rank() >= 2, ErrorKind::shape, "transpose_last2: rank must be >= 2");
  std::vector<int> perm(x.rank());
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[x.rank() - 1], perm[x.rank() - 2]);
  return permute(x, perm);
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  require(!parts.empty(), ErrorKind::usage, "concat: no inputs");
  const Tensor& first = parts.front();
  axis = normalize_axis(axis, first.rank(), "concat");
  Shape out = first.shape();
  out[axis] = 0;
  for (const auto& p : parts) {
    same_dtype(first, p, "concat");
    require(p.rank() == first.rank(), ErrorKind::shape, "concat: rank mismatch");
    for (int i = 0; i < p.rank(); ++i) {
      require(i == axis || p.shape()[i] == first.shape()[i], ErrorKind::shape,
              "concat: shapes " + shape_str(first.shape()) + " and " + shape_str(p.shape()) + " differ off-axis");
    }
    out[axis] += p.shape()[axis];
  }
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= out[i];
  for (int i = axis + 1; i < first.rank(); ++i) inner *= out[i];
  Tensor y = dispatch(first.dtype(), [&]<typename T>() {
    std::vector<T> res;
    res.reserve(static_cast<std::size_t>(numel_of(out)));
    for (std::int64_t o = 0; o < outer; ++o) {
      for (const auto& p : parts) {
        const std::int64_t chunk = p.shape()[axis] * inner;
        auto d = p.data<T>();
        res.insert(res.end(), d.begin() + o * chunk, d.begin() + (o + 1) * chunk);
      }
    }
    return Tensor::from<T>(out, std::move(res));
  });
  std::vector<std::int64_t> sizes;
  for (const auto& p : parts) sizes.push_back(p.shape()[axis]);
  record_op(parts, y, [sizes, axis](const Tensor& g) { return split(g, sizes, axis); });
  return y;
}

Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t length) {
  axis = normalize_axis(axis, x.rank(), "slice");
  const Shape& s = x.shape();
  require(start >= 0 && length >= 1 && start + length <= s[axis], ErrorKind::shape,
          "slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
              ") out of bounds for axis extent " + std::to_string(s[axis]));
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (int i = axis + 1; i < x.rank(); ++i) inner *= s[i];
  Shape out = s;
  out[axis] = length;
  Tensor y = dispatch(x.dtype(), [&]<typename T>() {
    auto d = x.data<T>();
    std::vector<T> res;
    res.reserve(static_cast<std::size_t>(numel_of(out)));
    for (std::int64_t o = 0; o < outer; ++o) {
      auto b = d.begin() + (o * s[axis] + start) * inner;
      res.insert(res.end(), b, b + length * inner);
    }
    return Tensor::from<T>(out, std::move(res));
  });
  record_op({x}, y, [s, axis, start, length, outer, inner](const Tensor& g) -> std::vector<Tensor> {
    return {dispatch(g.dtype(), [&]<typename T>() {
      auto dg = g.data<T>();
      std::vector<T> gx(static_cast<std::size_t>(numel_of(s)), T(0));
      for (std::int64_t o = 0; o < outer; ++o) {
        std::copy(dg.begin() + o * length * inner, dg.begin() + (o + 1) * length * inner,
                  gx.begin() + (o * s[axis] + start) * inner);
      }
      return Tensor::from<T>(s, std::move(gx));
    })};
  });
  return y;
}

std::vector<Tensor> split(const Tensor& x, const std::vector<std::int64_t>& sizes, int axis) {
  axis = normalize_axis(axis, x.rank(), "split");
  const std::int64_t total = std::accumulate(sizes.begin(), sizes.end(), std::int64_t{0});
  require(total == x.shape()[axis], ErrorKind::shape,
          "split: sizes sum to " + std::to_string(total) + " but axis extent is " + std::to_string(x.shape()[axis]));
  std::vector<Tensor> parts;
  std::int64_t start = 0;
  for (auto len : sizes) {
    parts.push_back(slice(x, axis, start, len));
    start += len;
  }
  return parts;
}

Tensor repeat_batch(const Tensor& x, std::int64_t times) {
  require(times >= 1 && x.rank() >= 1, ErrorKind::shape, "repeat_batch: invalid repeat count or rank");
  const std::int64_t b = x.dim(0), row = x.numel() / b;
  Shape out = x.shape();
  out[0] = b * times;
  Tensor y = dispatch(x.dtype(), [&]<typename T>() {
    auto d = x.data<T>();
    std::vector<T> res;
    res.reserve(static_cast<std::size_t>(b * times * row));
    for (std::int64_t i = 0; i < b; ++i) {
      for (std::int64_t r = 0; r < times; ++r) res.insert(res.end(), d.begin() + i * row, d.begin() + (i + 1) * row);
    }
    return Tensor::from<T>(out, std::move(res));
  });
  record_op({x}, y, [xs = x.shape(), b, row, times](const Tensor& g) -> std::vector<Tensor> {
    return {dispatch(g.dtype(), [&]<typename T>() {
      auto dg = g.data<T>();
      std::vector<T> gx(static_cast<std::size_t>(b * row), T(0));
      for (std::int64_t i = 0; i < b; ++i) {
        for (std::int64_t r = 0; r < times; ++r) {
          const T* src = dg.data() + (i * times + r) * row;
          for (std::int64_t j = 0; j < row; ++j) gx[i * row + j] += src[j];
        }
      }
      return Tensor::from<T>(xs, std::move(gx));
    })};
  });
  return y;
}

Tensor take_columns(const Tensor& table, const std::vector<std::int32_t>& index, const Shape& out_tail) {
  require(table.rank() == 2, ErrorKind::shape, "take_columns: table must be rank 2");
  const std::int64_t rows = table.dim(0), k = table.dim(1);
  const auto len = static_cast<std::int64_t>(index.size());
  require(numel_of(out_tail) == len, ErrorKind::shape, "take_columns: output tail does not match index length");
  for (auto i : index) require(i >= 0 && i < k, ErrorKind::shape, "take_columns: index out of range");
  Shape out{rows};
  out.insert(out.end(), out_tail.begin(), out_tail.end());
  Tensor y = dispatch(table.dtype(), [&]<typename T>() {
    auto d = table.data<T>();
    std::vector<T> res(static_cast<std::size_t>(rows * len));
    for (std::int64_t r = 0; r < rows; ++r) {
      for (std::int64_t i = 0; i < len; ++i) res[r * len + i] = d[r * k + index[i]];
    }
    return Tensor::from<T>(out, std::move(res));
  });
  record_op({table}, y, [ts = table.shape(), index, rows, k, len](const Tensor& g) -> std::vector<Tensor> {
    return {dispatch(g.dtype(), [&]<typename T>() {
      auto dg = g.data<T>();
      std::vector<T> gt(static_cast<std::size_t>(rows * k), T(0));
      for (std::int64_t r = 0; r < rows; ++r) {
        for (std::int64_t i = 0; i < len; ++i) gt[r * k + index[i]] += dg[r * len + i];
      }
      return Tensor::from<T>(ts, std::move(gt));
    })};
  });
  return y;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  require(logits.rank() == 2 && logits.dim(0) == static_cast<std::int64_t>(labels.size()), ErrorKind::shape,
          "cross_entropy: logits " + shape_str(logits.shape()) + " vs " + std::to_string(labels.size()) + " labels");
  const std::int64_t b = logits.dim(0), k = logits.dim(1);
  for (int l : labels) require(l >= 0 && l < k, ErrorKind::usage, "cross_entropy: label out of range");
  std::vector<double> probs(static_cast<std::size_t>(b * k));
  double total = 0;
  for (std::int64_t i = 0; i < b; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::int64_t j = 0; j < k; ++j) mx = std::max(mx, logits.at(i * k + j));
    require(std::isfinite(mx), ErrorKind::numeric, "cross_entropy: non-finite logits");
    double z = 0;
    for (std::int64_t j = 0; j < k; ++j) {
      probs[i * k + j] = std::exp(logits.at(i * k + j) - mx);
      z += probs[i * k + j];
    }
    for (std::int64_t j = 0; j < k; ++j) probs[i * k + j] /= z;
    total += std::log(z) + mx - logits.at(i * k + labels[i]);
  }
  Tensor y = Tensor::scalar(total / static_cast<double>(b), logits.dtype());
  record_op({logits}, y, [probs = std::move(probs), labels, b, k, ls = logits.shape()](const Tensor& g) {
    const double gs = g.item() / static_cast<double>(b);
    std::vector<double> gx(probs.size());
    for (std::int64_t i = 0; i < b; ++i) {
      for (std::int64_t j = 0; j < k; ++j) {
        gx[i * k + j] = gs * (probs[i * k + j] - (j == labels[i] ? 1.0 : 0.0));
      }
    }
    return std::vector<Tensor>{Tensor::from_doubles(ls, gx, g.dtype())};
  });
  return y;
}

}  // namespace gcvk::ops

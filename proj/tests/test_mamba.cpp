#include <cmath>
#include <random>

#include "gcvk/gradcheck.hpp"
#include "gcvk/mamba.hpp"
#include "oracle.hpp"
#include "test_util.hpp"

using namespace gcvk;
using namespace gcvk::mamba;
using testutil::error_kind;
using testutil::randn;
using testutil::t64;

namespace {

struct ScanCase {
  Tensor x, delta, a, b, c, d;
};

ScanCase random_case(std::int64_t batch, std::int64_t chans, std::int64_t steps, std::int64_t state,
                     std::uint64_t seed) {
  Rng rng(seed);
  ScanCase s;
  s.x = rng.randn({batch, chans, steps}, DType::f64);
  s.delta = rng.uniform({batch, chans, steps}, DType::f64, 0.01, 1.0);
  s.a = rng.uniform({chans, state}, DType::f64, -3.0, -0.1);
  s.b = rng.randn({batch, state, steps}, DType::f64);
  s.c = rng.randn({batch, state, steps}, DType::f64);
  s.d = rng.randn({chans}, DType::f64);
  return s;
}

Tensor scan(const ScanCase& s) { return selective_scan(s.x, s.delta, s.a, s.b, s.c, s.d); }

oracle::Arr scan_oracle(const ScanCase& s) {
  return oracle::scan(oracle::Arr(s.x), oracle::Arr(s.delta), oracle::Arr(s.a), oracle::Arr(s.b), oracle::Arr(s.c),
                      s.d.to_doubles());
}

template <typename P>
void randomize_biases(P& p, std::uint64_t seed) {
  Rng rng(seed);
  p.visit("", [&](const std::string& name, Tensor& t) {
    if (name.size() >= 4 && name.compare(name.size() - 4, 4, "bias") == 0 && name.find("dt_proj") == std::string::npos) {
      t = rng.randn(t.shape(), t.dtype(), 0.1);
    }
  });
}

template <typename P>
void zero_weights(P& p, bool include_bias) {
  p.visit("", [&](const std::string& name, Tensor& t) {
    const bool is_bias = name.size() >= 4 && name.compare(name.size() - 4, 4, "bias") == 0;
    const bool is_weight = name.size() >= 6 && name.compare(name.size() - 6, 6, "weight") == 0;
    if (is_weight || (include_bias && is_bias)) t = Tensor::zeros(t.shape(), t.dtype());
  });
}

}  // namespace

TEST(Discretize, LnTwoStep) {
  const double a[] = {-1.0}, b[] = {1.0};
  const auto d = discretize(a, b, std::log(2.0));
  EXPECT_NEAR(d.a_bar[0], 0.5, 1e-15);
  EXPECT_NEAR(d.b_bar[0], 0.5, 1e-15);
}

TEST(Discretize, SmallStepFirstOrderLimit) {
  const double a[] = {-1.5, -0.2}, b[] = {2.0, -3.0};
  const double dt = 1e-8;
  const auto d = discretize(a, b, dt);
  for (int m = 0; m < 2; ++m) {
    EXPECT_NEAR(d.a_bar[m], 1.0 + dt * a[m], 1e-12);
    EXPECT_NEAR(d.b_bar[m], dt * b[m], 1e-12);
  }
}

TEST(Discretize, AlgebraicSimplification) {
  const double a[] = {-2.0}, b[] = {3.0};
  const auto d = discretize(a, b, 1.0);
  EXPECT_NEAR(d.a_bar[0], std::exp(-2.0), 1e-15);
  EXPECT_NEAR(d.b_bar[0], (1 - std::exp(-2.0)) / 2 * 3, 1e-15);
  // literal zero-order-hold form
  EXPECT_NEAR(d.b_bar[0], (1.0 / (1.0 * -2.0)) * (std::exp(-2.0) - 1.0) * (1.0 * 3.0), 1e-15);
}

TEST(Discretize, DomainErrors) {
  const double a[] = {-1.0}, b[] = {1.0}, pos[] = {0.5};
  EXPECT_EQ(error_kind([&] { discretize(a, b, 0.0); }), ErrorKind::domain);
  EXPECT_EQ(error_kind([&] { discretize(a, b, -1.0); }), ErrorKind::domain);
  EXPECT_EQ(error_kind([&] { discretize(pos, b, 1.0); }), ErrorKind::domain);
}

TEST(Discretize, StableDecay) {
  std::mt19937_64 gen(3);
  std::uniform_real_distribution<double> ua(-10.0, -1e-3), ud(1e-4, 5.0);
  for (int i = 0; i < 1000; ++i) {
    const double a[] = {ua(gen)}, b[] = {1.0};
    const auto d = discretize(a, b, ud(gen));
    EXPECT_GT(d.a_bar[0], 0.0);
    EXPECT_LT(d.a_bar[0], 1.0);
  }
}

TEST(SelectiveScan, ZeroInputGivesZero) {
  auto s = random_case(2, 3, 7, 4, 1);
  s.x = Tensor::zeros(s.x.shape(), DType::f64);
  for (double v : scan(s).to_doubles()) EXPECT_EQ(v, 0.0);
}

TEST(SelectiveScan, SingleStepUnrolling) {
  const auto s = random_case(1, 2, 1, 3, 2);
  const auto y = scan(s).to_doubles();
  const auto x = s.x.to_doubles(), dt = s.delta.to_doubles(), a = s.a.to_doubles(), b = s.b.to_doubles(),
             c = s.c.to_doubles(), d = s.d.to_doubles();
  for (int ch = 0; ch < 2; ++ch) {
    double want = d[ch] * x[ch];
    for (int m = 0; m < 3; ++m) want += c[m] * std::expm1(dt[ch] * a[ch * 3 + m]) / a[ch * 3 + m] * b[m] * x[ch];
    EXPECT_NEAR(y[ch], want, 1e-14);
  }
}

TEST(SelectiveScan, MatchesNaiveRecurrence) {
  const auto s = random_case(2, 3, 16, 4, 3);
  EXPECT_LT(oracle::max_abs_diff(scan_oracle(s), scan(s)), 1e-10);
  ScanCase no_skip = s;
  no_skip.d = Tensor();
  EXPECT_LT(oracle::max_abs_diff(oracle::scan(oracle::Arr(s.x), oracle::Arr(s.delta), oracle::Arr(s.a),
                                              oracle::Arr(s.b), oracle::Arr(s.c), {}),
                                 scan(no_skip)),
            1e-10);
}

TEST(SelectiveScan, Errors) {
  auto s = random_case(1, 2, 4, 3, 4);
  auto bad = s;
  auto dv = s.delta.to_doubles();
  dv[1] = NAN;
  bad.delta = t64(s.delta.shape(), dv);
  EXPECT_EQ(error_kind([&] { scan(bad); }), ErrorKind::numeric);
  bad = s;
  bad.a = ops::scale(s.a, -1.0);
  EXPECT_EQ(error_kind([&] { scan(bad); }), ErrorKind::domain);
  bad = s;
  bad.b = randn({1, 2, 4}, 1);
  EXPECT_EQ(error_kind([&] { scan(bad); }), ErrorKind::shape);
}

TEST(SelectiveScan, GradcheckAllInputs) {
  auto s = random_case(2, 3, 6, 4, 5);
  const Tensor w = randn({2, 3, 6}, 6);
  const auto r = gradcheck([&] { return ops::sum(ops::mul(scan(s), w)); }, {&s.x, &s.delta, &s.a, &s.b, &s.c, &s.d});
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(SsmConvKernel, MemorylessWhenDecayVanishes) {
  // a very negative A with a large step gives a_bar == 0 in double precision.
  const double a[] = {-1000.0}, delta[] = {1.0, 1.0, 1.0, 1.0}, b[] = {2.0, 2.0, 2.0, 2.0}, c[] = {3.0, 3.0, 3.0, 3.0};
  const auto k = ssm_conv_kernel(a, delta, b, c, 4);
  const double cb = 3.0 * (std::expm1(-1000.0) / -1000.0) * 2.0;
  EXPECT_NEAR(k[0], cb, 1e-18);
  for (int t = 1; t < 4; ++t) EXPECT_EQ(k[t], 0.0);
  const double x[] = {1.0, -2.0, 0.5, 4.0};
  const auto y = causal_conv(x, k);
  for (int t = 0; t < 4; ++t) EXPECT_NEAR(y[t], cb * x[t], 1e-15);
}

TEST(SsmConvKernel, GeometricSeries) {
  // a_bar = 0.5 and b_bar = 1 need A = -ln 2 / delta and B = A / (a_bar - 1).
  const double dt = 1.0, av = -std::log(2.0), bv = av / (0.5 - 1.0);
  const double a[] = {av}, delta[] = {dt, dt, dt}, b[] = {bv, bv, bv}, c[] = {1.0, 1.0, 1.0};
  const auto k = ssm_conv_kernel(a, delta, b, c, 3);
  ASSERT_EQ(k.size(), 3u);
  EXPECT_NEAR(k[0], 1.0, 1e-15);
  EXPECT_NEAR(k[1], 0.5, 1e-15);
  EXPECT_NEAR(k[2], 0.25, 1e-15);
}

TEST(SsmConvKernel, RejectsTimeVaryingParameters) {
  const double a[] = {-1.0}, delta[] = {0.5, 0.6}, b[] = {1.0, 1.0}, c[] = {1.0, 1.0};
  EXPECT_EQ(error_kind([&] { ssm_conv_kernel(a, delta, b, c, 2); }), ErrorKind::unsupported);
  const double d2[] = {0.5, 0.5}, b2[] = {1.0, 2.0};
  EXPECT_EQ(error_kind([&] { ssm_conv_kernel(a, d2, b2, c, 2); }), ErrorKind::unsupported);
}

TEST(SsmConvKernel, EqualsFrozenScan) {
  std::mt19937_64 gen(11);
  auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(gen); };
  for (int trial = 0; trial < 100; ++trial) {
    const std::int64_t steps = pick(1, 32), state = pick(1, 8);
    Rng rng(static_cast<std::uint64_t>(1000 + trial));
    const double dt = rng.uniform(0.01, 1.0);
    const auto av = rng.uniform({state}, DType::f64, -2.0, -0.05).to_doubles();
    const auto bm = rng.randn({state}, DType::f64).to_doubles(), cm = rng.randn({state}, DType::f64).to_doubles();
    std::vector<double> bt, ct;
    for (std::int64_t m = 0; m < state; ++m)
      for (std::int64_t t = 0; t < steps; ++t) {
        bt.push_back(bm[m]);
        ct.push_back(cm[m]);
      }
    const Tensor x = rng.randn({1, 1, steps}, DType::f64);
    const Tensor y = selective_scan(x, Tensor::full({1, 1, steps}, dt, DType::f64), t64({1, state}, av),
                                    t64({1, state, steps}, bt), t64({1, state, steps}, ct), Tensor());
    const std::vector<double> delta(static_cast<std::size_t>(steps), dt);
    const auto xv = x.to_doubles();
    const auto conv = causal_conv(xv, ssm_conv_kernel(av, delta, bt, ct, steps));
    const auto yv = y.to_doubles();
    for (std::int64_t t = 0; t < steps; ++t) ASSERT_NEAR(yv[t], conv[t], 1e-10) << "trial " << trial;
  }
}

TEST(Mixer, ShapeAndOddDimension) {
  Rng rng(1);
  for (auto [c, t] : std::vector<std::pair<int, int>>{{2, 1}, {8, 5}, {34, 3}}) {
    auto p = MixerParams::init(c, 4, DType::f32, rng);
    EXPECT_EQ(mixer(randn({2, t, c}, 2, 1.0, DType::f32), p).shape(), (Shape{2, t, c}));
    EXPECT_EQ(p.branch(), c / 2);
    EXPECT_EQ(p.dt_rank, (c + 15) / 16);
  }
  EXPECT_EQ(error_kind([&] { MixerParams::init(7, 4, DType::f32, rng); }), ErrorKind::config);
}

TEST(Mixer, ZeroWeightsGiveOutputBias) {
  Rng rng(2);
  auto p = MixerParams::init(8, 4, DType::f64, rng);
  zero_weights(p, false);
  p.out_proj.bias = randn({8}, 3);
  const auto y = mixer(randn({2, 5, 8}, 4), p).to_doubles();
  const auto bias = p.out_proj.bias.to_doubles();
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_EQ(y[i], bias[i % 8]);
}

TEST(Mixer, MatchesBranchCompositionOracle) {
  Rng rng(5);
  auto p = MixerParams::init(8, 4, DType::f64, rng);
  randomize_biases(p, 6);
  const Tensor x = randn({2, 8, 8}, 7);
  EXPECT_LT(oracle::max_abs_diff(oracle::mixer(oracle::Arr(x), p), mixer(x, p)), 1e-8);
  EXPECT_LT(oracle::max_abs_diff(oracle::mixer(oracle::Arr(x), p), mixer(x, p)), 1e-12);
}

TEST(Mixer, SymmetricBranchIsNonCausal) {
  Rng rng(8);
  auto p = MixerParams::init(8, 4, DType::f64, rng);
  const std::int64_t t = 4;
  const Tensor z = randn({1, 4, 8}, 9);
  std::vector<double> bumped = z.to_doubles();
  bumped[t] += 1.0;  // channel 0, position t
  const Tensor z2 = t64(z.shape(), bumped);
  const auto before = ops::silu(depthwise_conv1d(z, p.conv_z)).to_doubles();
  const auto after = ops::silu(depthwise_conv1d(z2, p.conv_z)).to_doubles();
  EXPECT_NE(before[t - 1], after[t - 1]);

  // Causal reference with the same taps shifted to the past: position t - 1 is untouched.
  Conv2dParams causal = p.conv_z;
  causal.opt.pad_w = 2;
  auto shifted = [&](const Tensor& v) {
    const Tensor y = causal(ops::reshape(v, {1, 4, 1, 8}));  // [1, 4, 1, 10]
    return ops::slice(ops::reshape(y, {1, 4, 10}), 2, 0, 8);
  };
  EXPECT_EQ(shifted(z).to_doubles()[t - 1], shifted(z2).to_doubles()[t - 1]);

  // And through the whole mixer.
  const Tensor x = randn({1, 6, 8}, 10);
  std::vector<double> xb = x.to_doubles();
  xb[3 * 8 + 2] += 0.5;
  const auto m0 = mixer(x, p).to_doubles(), m1 = mixer(t64(x.shape(), xb), p).to_doubles();
  bool changed = false;
  for (int c = 0; c < 8; ++c) changed |= m0[2 * 8 + c] != m1[2 * 8 + c];
  EXPECT_TRUE(changed);
}

TEST(Mixer, ParameterCountMatchesClosedForms) {
  for (std::int64_t c : {8, 64, 320}) {
    Rng rng(1);
    auto p = MixerParams::init(c, 16, DType::f32, rng);
    const std::int64_t d = c / 2, r = (c + 15) / 16, m = 16;
    const std::int64_t want = (c * c + c) + 2 * (d * 3 + d) + (d * (r + 2 * m) + (r + 2 * m)) + (r * d + d) +
                              d * m + d + (c * c + c);
    EXPECT_EQ(param_count(p), want) << c;
  }
}

TEST(Mixer, AIsStrictlyNegativeAtInit) {
  Rng rng(3);
  auto p = MixerParams::init(8, 16, DType::f64, rng);
  const auto a = p.a_log.to_doubles();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(-std::exp(a[i]), -static_cast<double>(i % 16 + 1), 1e-12);
}

TEST(Mixer, Gradcheck) {
  Rng rng(4);
  auto p = MixerParams::init(4, 3, DType::f64, rng);
  randomize_biases(p, 5);
  Tensor x = randn({1, 5, 4}, 6);
  std::vector<Tensor*> leaves{&x};
  p.visit("", [&](const std::string&, Tensor& t) { leaves.push_back(&t); });
  const Tensor w = randn({1, 5, 4}, 7);
  EXPECT_LT(gradcheck([&] { return ops::sum(ops::mul(mixer(x, p), w)); }, leaves).max_rel_error, 1e-6);
}

TEST(HybridPattern, HalvesWithMixerFirst) {
  EXPECT_EQ(hybrid_pattern(8), "MMMMSSSS");
  EXPECT_EQ(hybrid_pattern(2), "MS");
  EXPECT_EQ(hybrid_pattern(5), "MMMSS");
  EXPECT_EQ(hybrid_pattern(1), "M");
  EXPECT_EQ(error_kind([] { hybrid_pattern(0); }), ErrorKind::config);
}

TEST(HybridLayer, ZeroBranchesAreIdentity) {
  for (auto kind : {LayerKind::mamba, LayerKind::attention}) {
    Rng rng(1);
    auto p = HybridLayerParams::init(kind, 8, 2, 2.0, 4, DType::f64, rng);
    p.mixer.out_proj.weight = Tensor::zeros({8, 8}, DType::f64);
    p.mixer.out_proj.bias = Tensor::zeros({8}, DType::f64);
    if (kind == LayerKind::attention) zero_weights(p.attn, true);
    zero_weights(p.mlp, true);
    const Tensor x = randn({2, 5, 8}, 2);
    EXPECT_TRUE(bit_equal(hybrid_layer(x, p), x));
  }
}

TEST(HybridLayer, SingleTokenAttentionUsesValueOnly) {
  Rng rng(3);
  auto p = HybridLayerParams::init(LayerKind::attention, 8, 2, 2.0, 4, DType::f64, rng);
  const Tensor x = randn({3, 1, 8}, 4);
  const Tensor n1 = p.norm1(x);
  const Tensor v = ops::linear(n1, ops::slice(p.attn.qkv.weight, 0, 16, 8), ops::slice(p.attn.qkv.bias, 0, 16, 8));
  const Tensor h = ops::add(x, p.attn.proj(v));
  EXPECT_LT(max_abs_diff(hybrid_layer(x, p), ops::add(h, p.mlp(p.norm2(h)))), 1e-14);
}

TEST(HybridLayer, MatchesOracleForBothKinds) {
  for (auto kind : {LayerKind::mamba, LayerKind::attention}) {
    Rng rng(5);
    auto p = HybridLayerParams::init(kind, 8, 2, 2.0, 4, DType::f64, rng);
    randomize_biases(p, 6);
    const Tensor x = randn({2, 6, 8}, 7);
    EXPECT_LT(oracle::max_abs_diff(oracle::hybrid_layer(oracle::Arr(x), p), hybrid_layer(x, p)), 1e-10);
  }
}

#include <cmath>

#include "gcvk/blocks.hpp"
#include "gcvk/gradcheck.hpp"
#include "oracle.hpp"
#include "test_util.hpp"

using namespace gcvk;
using testutil::error_kind;
using testutil::randn;

namespace {

// Replaces every bias with small random values so oracles see them.
template <typename P>
void randomize_biases(P& p, std::uint64_t seed) {
  Rng rng(seed);
  p.visit("", [&](const std::string& name, Tensor& t) {
    if (name.size() >= 4 && name.compare(name.size() - 4, 4, "bias") == 0) t = rng.randn(t.shape(), t.dtype(), 0.1);
  });
}

template <typename P>
std::vector<Tensor*> leaves_of(P& p) {
  std::vector<Tensor*> out;
  p.visit("", [&](const std::string&, Tensor& t) { out.push_back(&t); });
  return out;
}

Tensor identity_linear(std::int64_t n) {
  std::vector<double> w(static_cast<std::size_t>(n * n), 0.0);
  for (std::int64_t i = 0; i < n; ++i) w[static_cast<std::size_t>(i * n + i)] = 1.0;
  return testutil::t64({n, n}, w);
}

}  // namespace

TEST(SeBlock, ZeroExpandGivesHalfGate) {
  Rng rng(1);
  auto p = SeParams::init(8, 4, DType::f64, rng);
  p.expand.weight = Tensor::zeros(p.expand.weight.shape(), DType::f64);
  p.expand.bias = Tensor::zeros(p.expand.bias.shape(), DType::f64);
  const Tensor x = randn({2, 8, 3, 3}, 2);
  EXPECT_TRUE(bit_equal(se_block(x, p), ops::scale(x, 0.5)));
}

TEST(SeBlock, IdentityChainOnConstantInput) {
  Rng rng(2);
  auto p = SeParams::init(3, 1, DType::f64, rng);
  p.reduce.weight = p.expand.weight = identity_linear(3);
  p.reduce.bias = p.expand.bias = Tensor::zeros({3}, DType::f64);
  for (double v : se_block(Tensor::full({1, 3, 2, 2}, 1.0, DType::f64), p).to_doubles()) {
    EXPECT_NEAR(v, 0.731059, 1e-6);
    EXPECT_NEAR(v, 1.0 / (1.0 + std::exp(-1.0)), 1e-15);
  }
}

TEST(SeBlock, ShapePreservedAndOracle) {
  Rng rng(3);
  auto p = SeParams::init(8, 4, DType::f64, rng);
  randomize_biases(p, 4);
  for (const Shape& s : {Shape{1, 8, 1, 1}, Shape{3, 8, 5, 2}}) {
    const Tensor x = randn(s, 5);
    const Tensor y = se_block(x, p);
    EXPECT_EQ(y.shape(), s);
    EXPECT_LT(oracle::max_abs_diff(oracle::se(oracle::Arr(x), p), y), 1e-13);
  }
  EXPECT_EQ(error_kind([&] { SeParams::init(6, 4, DType::f64, rng); }), ErrorKind::config);
}

TEST(FusedMBConv, ZeroPointwiseIsExactIdentity) {
  Rng rng(5);
  auto p = FusedMBConvParams::init(8, 4, DType::f32, rng);
  p.pw.weight = Tensor::zeros(p.pw.weight.shape(), DType::f32);
  const Tensor x = randn({2, 8, 5, 5}, 6, 1.0, DType::f32);
  EXPECT_TRUE(bit_equal(fused_mbconv(x, p), x));
}

TEST(FusedMBConv, ZeroInputZeroBiasGivesZero) {
  Rng rng(6);
  auto p = FusedMBConvParams::init(4, 4, DType::f64, rng);
  for (double v : fused_mbconv(Tensor::zeros({1, 4, 4, 4}, DType::f64), p).to_doubles()) EXPECT_EQ(v, 0.0);
}

TEST(FusedMBConv, MatchesScalarLoopOracle) {
  Rng rng(7);
  auto p = FusedMBConvParams::init(4, 4, DType::f64, rng);
  randomize_biases(p, 8);
  const Tensor x = randn({1, 4, 4, 4}, 9);
  EXPECT_LT(oracle::max_abs_diff(oracle::fused_mbconv(oracle::Arr(x), p), fused_mbconv(x, p)), 1e-6);
  EXPECT_LT(oracle::max_abs_diff(oracle::fused_mbconv(oracle::Arr(x), p), fused_mbconv(x, p)), 1e-12);
}

TEST(Downsample, ShapeContractAtStageOneGeometry) {
  Rng rng(8);
  auto p = DownsampleParams::init(64, 128, 4, DownsamplerKind::conv, DType::f32, rng);
  EXPECT_EQ(downsample(Tensor::zeros({1, 64, 56, 56}, DType::f32), p).shape(), (Shape{1, 128, 28, 28}));
  auto m = DownsampleParams::init(64, 128, 4, DownsamplerKind::maxpool, DType::f32, rng);
  EXPECT_EQ(downsample(Tensor::zeros({1, 64, 56, 56}, DType::f32), m).shape(), (Shape{1, 128, 28, 28}));
}

TEST(Downsample, ZeroInputGivesBeta) {
  Rng rng(9);
  auto p = DownsampleParams::init(4, 8, 4, DownsamplerKind::conv, DType::f64, rng);
  p.norm.beta = randn({8}, 10);
  const auto beta = p.norm.beta.to_doubles();
  const auto y = downsample(Tensor::zeros({2, 4, 6, 6}, DType::f64), p).to_doubles();
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_EQ(y[i], beta[(i / 9) % 8]);
}

TEST(Downsample, ConstructedBypassWeights) {
  const std::int64_t c = 3, h = 6;
  Rng rng(10);
  auto p = DownsampleParams::init(c, 2 * c, 1, DownsamplerKind::conv, DType::f64, rng);
  p.mbconv.pw.weight = Tensor::zeros(p.mbconv.pw.weight.shape(), DType::f64);
  std::vector<double> w(static_cast<std::size_t>(2 * c * c * 9), 0.0);
  for (std::int64_t o = 0; o < 2 * c; ++o) w[static_cast<std::size_t>((o * c + o % c) * 9 + 4)] = 1.0;
  p.reduce.weight = testutil::t64({2 * c, c, 3, 3}, w);
  p.norm.gamma = randn({2 * c}, 11);
  p.norm.beta = randn({2 * c}, 12);

  const Tensor x = randn({1, c, h, h}, 13);
  const auto xv = x.to_doubles(), g = p.norm.gamma.to_doubles(), b = p.norm.beta.to_doubles();
  const auto y = downsample(x, p).to_doubles();
  for (std::int64_t oy = 0; oy < h / 2; ++oy)
    for (std::int64_t ox = 0; ox < h / 2; ++ox) {
      std::vector<double> s(static_cast<std::size_t>(2 * c));
      double mean = 0, var = 0;
      for (std::int64_t o = 0; o < 2 * c; ++o) {
        s[o] = xv[static_cast<std::size_t>(((o % c) * h + 2 * oy) * h + 2 * ox)];
        mean += s[o];
      }
      mean /= 2.0 * c;
      for (double v : s) var += (v - mean) * (v - mean);
      var /= 2.0 * c;
      for (std::int64_t o = 0; o < 2 * c; ++o) {
        const double want = (s[o] - mean) / std::sqrt(var + p.norm.eps) * g[o] + b[o];
        EXPECT_NEAR(y[static_cast<std::size_t>((o * (h / 2) + oy) * (h / 2) + ox)], want, 1e-12);
      }
    }
}

TEST(Downsample, MatchesOracleForBothKinds) {
  for (auto kind : {DownsamplerKind::conv, DownsamplerKind::maxpool}) {
    Rng rng(14);
    auto p = DownsampleParams::init(4, 8, 2, kind, DType::f64, rng);
    randomize_biases(p, 15);
    const Tensor x = randn({2, 4, 8, 8}, 16);
    EXPECT_LT(oracle::max_abs_diff(oracle::downsample(oracle::Arr(x), p), downsample(x, p)), 1e-12)
        << to_string(kind);
  }
}

TEST(Downsample, OddExtentIsConfigError) {
  Rng rng(17);
  auto p = DownsampleParams::init(4, 8, 4, DownsamplerKind::conv, DType::f64, rng);
  EXPECT_EQ(error_kind([&] { downsample(randn({1, 4, 7, 8}, 1), p); }), ErrorKind::config);
}

TEST(GlobalTokenGen, EqualExtentIsIdentity) {
  Rng rng(18);
  auto p = GtgParams::init(4, 7, 7, 7, 7, 4, DType::f64, rng);
  EXPECT_TRUE(p.layers.empty());
  const Tensor x = randn({2, 4, 7, 7}, 19);
  EXPECT_TRUE(bit_equal(global_token_gen(x, p), x));
}

TEST(GlobalTokenGen, StageOneGeometry) {
  EXPECT_EQ(gtg_repetitions(56, 7), 3);
  Rng rng(20);
  auto p = GtgParams::init(64, 56, 56, 7, 7, 4, DType::f32, rng);
  EXPECT_EQ(p.layers.size(), 3u);
  EXPECT_EQ(global_token_gen(randn({1, 64, 56, 56}, 21, 1.0, DType::f32), p).shape(), (Shape{1, 64, 7, 7}));
}

TEST(GlobalTokenGen, RepetitionCountIsLog2Ratio) {
  for (int k = 0; k < 6; ++k) EXPECT_EQ(gtg_repetitions(3 << k, 3), k);
  EXPECT_EQ(error_kind([] { gtg_repetitions(24, 4); }), ErrorKind::config);
  EXPECT_EQ(error_kind([] { gtg_repetitions(10, 4); }), ErrorKind::config);
}

TEST(GlobalTokenGen, AllEqualInputStaysEqual) {
  Rng rng(22);
  auto p = GtgParams::init(4, 16, 16, 2, 2, 4, DType::f64, rng);
  for (auto& layer : p.layers) layer.pw.weight = Tensor::zeros(layer.pw.weight.shape(), DType::f64);
  for (double v : global_token_gen(Tensor::full({1, 4, 16, 16}, 2.5, DType::f64), p).to_doubles()) {
    EXPECT_EQ(v, 2.5);
  }
  for (double v : ops::maxpool2d(Tensor::full({1, 2, 6, 6}, -1.0, DType::f64)).to_doubles()) EXPECT_EQ(v, -1.0);
}

TEST(GlobalTokenGen, MatchesOracle) {
  Rng rng(23);
  auto p = GtgParams::init(4, 8, 8, 2, 2, 2, DType::f64, rng);
  randomize_biases(p, 24);
  const Tensor x = randn({2, 4, 8, 8}, 25);
  EXPECT_LT(oracle::max_abs_diff(oracle::gtg(oracle::Arr(x), p), global_token_gen(x, p)), 1e-12);
}

TEST(BlockGradcheck, EveryConvBlock) {
  Rng rng(26);
  auto se = SeParams::init(4, 2, DType::f64, rng);
  auto mb = FusedMBConvParams::init(4, 2, DType::f64, rng);
  auto down = DownsampleParams::init(4, 8, 2, DownsamplerKind::conv, DType::f64, rng);
  auto gtg = GtgParams::init(4, 4, 4, 1, 1, 2, DType::f64, rng);
  randomize_biases(se, 1);
  randomize_biases(mb, 2);
  randomize_biases(down, 3);
  randomize_biases(gtg, 4);
  Tensor x = randn({2, 4, 4, 4}, 27);

  auto check = [&](const char* name, auto& params, auto&& f) {
    auto leaves = leaves_of(params);
    leaves.push_back(&x);
    const Tensor probe = f();
    const Tensor weights = randn(probe.shape(), 28);
    const auto r = gradcheck([&] { return ops::sum(ops::mul(f(), weights)); }, leaves);
    EXPECT_LT(r.max_rel_error, 1e-6) << name;
  };
  check("se", se, [&] { return se_block(x, se); });
  check("fused_mbconv", mb, [&] { return fused_mbconv(x, mb); });
  check("downsample", down, [&] { return downsample(x, down); });
  check("gtg", gtg, [&] { return global_token_gen(x, gtg); });
}

#include "gcvk/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <map>
#include <numbers>
#include <thread>

#include "gcvk/gradcheck.hpp"

namespace gcvk {

// ---------------------------------------------------------------- gradients

namespace {

constexpr DType f64 = DType::f64;

template <typename P>
std::vector<Tensor*> slots(P& params) {
  std::vector<Tensor*> out;
  params.visit("", [&](const std::string&, Tensor& t) { out.push_back(&t); });
  return out;
}

// Projects an output onto fixed random weights so every element matters.
Tensor weighted_sum(const Tensor& out, std::uint64_t seed) {
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  return ops::sum(ops::mul(out, rng.randn(out.shape(), out.dtype())));
}

struct Check {
  std::string name;
  double tolerance;
  std::function<GradcheckResult(std::uint64_t)> run;
};

// State shared by one probe: inputs and parameter structs live here so the
// leaf pointers stay valid for the whole check.
template <typename P>
GradcheckResult check_block(std::uint64_t seed, const std::function<P(Rng&)>& make,
                            const std::vector<Shape>& input_shapes,
                            const std::function<Tensor(const std::vector<Tensor>&, const P&)>& apply,
                            std::int64_t max_elements = 0) {
  Rng rng(seed);
  P params = make(rng);
  std::vector<Tensor> inputs;
  for (const auto& s : input_shapes) inputs.push_back(rng.randn(s, f64));
  std::vector<Tensor*> leaves;
  for (auto& t : inputs) leaves.push_back(&t);
  for (Tensor* t : slots(params)) leaves.push_back(t);
  GradcheckOptions opt;
  opt.max_elements_per_leaf = max_elements;
  opt.seed = seed;
  return gradcheck([&] { return weighted_sum(apply(inputs, params), seed); }, leaves, opt);
}

// Small perturbation of the init so zero-initialized biases and unit LN
// gains do not hide errors in their gradients.
template <typename P>
void jitter(P& params, Rng& rng, double amount = 0.1) {
  params.visit("", [&](const std::string&, Tensor& t) {
    t = ops::add(t, rng.randn(t.shape(), t.dtype(), amount));
  });
}

GradcheckResult check_selective_scan(std::uint64_t seed) {
  Rng rng(seed);
  const std::int64_t b = 2, d = 4, t = 16, m = 4;
  Tensor x = rng.randn({b, d, t}, f64);
  Tensor delta = ops::softplus(rng.randn({b, d, t}, f64));
  Tensor a = ops::scale(ops::exp(rng.randn({d, m}, f64, 0.5)), -1.0);
  Tensor bm = rng.randn({b, m, t}, f64);
  Tensor cm = rng.randn({b, m, t}, f64);
  Tensor skip = rng.randn({d}, f64);
  GradcheckOptions opt;
  opt.seed = seed;
  return gradcheck(
      [&] { return weighted_sum(mamba::selective_scan(x, delta, a, bm, cm, skip), seed); },
      {&x, &delta, &a, &bm, &cm, &skip}, opt);
}

GradcheckResult check_model(std::uint64_t seed, const char* variant) {
  Model model = build_model(variant_config(variant), seed, f64);
  Rng rng(seed + 1);
  jitter(model, rng, 0.05);
  Tensor x = rng.randn({2, 3, 32, 32}, f64);
  const std::vector<int> labels{0, 1};
  std::vector<Tensor*> leaves{&x};
  for (Tensor* t : slots(model)) leaves.push_back(t);
  GradcheckOptions opt;
  opt.max_elements_per_leaf = 3;
  opt.seed = seed;
  return gradcheck([&] { return ops::cross_entropy(model.forward(x), labels); }, leaves, opt);
}

const std::vector<Check>& checks() {
  using Inputs = std::vector<Tensor>;
  static const std::vector<Check> all{
      {"se", 1e-6,
       [](std::uint64_t s) {
         return check_block<SeParams>(
             s, [](Rng& r) { auto p = SeParams::init(8, 4, f64, r); jitter(p, r); return p; }, {{2, 8, 4, 4}},
             [](const Inputs& in, const SeParams& p) { return se_block(in[0], p); });
       }},
      {"fused_mbconv", 1e-6,
       [](std::uint64_t s) {
         return check_block<FusedMBConvParams>(
             s, [](Rng& r) { auto p = FusedMBConvParams::init(8, 4, f64, r); jitter(p, r); return p; },
             {{1, 8, 4, 4}}, [](const Inputs& in, const FusedMBConvParams& p) { return fused_mbconv(in[0], p); });
       }},
      {"patch_stem", 1e-6,
       [](std::uint64_t s) {
         return check_block<PatchStemParams>(
             s, [](Rng& r) { auto p = PatchStemParams::init(3, 8, 4, f64, r); jitter(p, r); return p; },
             {{1, 3, 8, 8}}, [](const Inputs& in, const PatchStemParams& p) { return patch_stem(in[0], p); });
       }},
      {"downsample", 1e-6,
       [](std::uint64_t s) {
         return check_block<DownsampleParams>(
             s,
             [](Rng& r) {
               auto p = DownsampleParams::init(8, 16, 4, DownsamplerKind::conv, f64, r);
               jitter(p, r);
               return p;
             },
             {{1, 8, 4, 4}}, [](const Inputs& in, const DownsampleParams& p) { return downsample(in[0], p); });
       }},
      {"downsample_maxpool", 1e-6,
       [](std::uint64_t s) {
         return check_block<DownsampleParams>(
             s,
             [](Rng& r) {
               auto p = DownsampleParams::init(8, 16, 4, DownsamplerKind::maxpool, f64, r);
               jitter(p, r);
               return p;
             },
             {{1, 8, 4, 4}}, [](const Inputs& in, const DownsampleParams& p) { return downsample(in[0], p); });
       }},
      {"gtg", 1e-6,
       [](std::uint64_t s) {
         return check_block<GtgParams>(
             s, [](Rng& r) { auto p = GtgParams::init(8, 8, 8, 2, 2, 4, f64, r); jitter(p, r); return p; },
             {{1, 8, 8, 8}}, [](const Inputs& in, const GtgParams& p) { return global_token_gen(in[0], p); });
       }},
      {"local_attention", 1e-6,
       [](std::uint64_t s) {
         return check_block<AttentionParams>(
             s,
             [](Rng& r) {
               auto p = AttentionParams::init(AttentionKind::local, 8, 2, 4, 4, f64, r);
               jitter(p, r);
               return p;
             },
             {{2, 16, 8}}, [](const Inputs& in, const AttentionParams& p) { return local_attention(in[0], p); });
       }},
      {"global_attention", 1e-6,
       [](std::uint64_t s) {
         return check_block<AttentionParams>(
             s,
             [](Rng& r) {
               auto p = AttentionParams::init(AttentionKind::global, 8, 2, 2, 2, f64, r);
               jitter(p, r);
               return p;
             },
             {{2, 4, 8}, {1, 8, 2, 2}},
             [](const Inputs& in, const AttentionParams& p) { return global_attention(in[0], in[1], p); });
       }},
      {"selective_scan", 1e-6, check_selective_scan},
      {"mamba_mixer", 1e-6,
       [](std::uint64_t s) {
         return check_block<mamba::MixerParams>(
             s, [](Rng& r) { auto p = mamba::MixerParams::init(8, 4, f64, r); jitter(p, r, 0.05); return p; },
             {{1, 8, 8}}, [](const Inputs& in, const mamba::MixerParams& p) { return mamba::mixer(in[0], p); });
       }},
      {"hybrid_layer_m", 1e-6,
       [](std::uint64_t s) {
         return check_block<mamba::HybridLayerParams>(
             s,
             [](Rng& r) {
               auto p = mamba::HybridLayerParams::init(mamba::LayerKind::mamba, 8, 2, 2.0, 4, f64, r);
               jitter(p, r, 0.05);
               return p;
             },
             {{1, 8, 8}},
             [](const Inputs& in, const mamba::HybridLayerParams& p) { return mamba::hybrid_layer(in[0], p); });
       }},
      {"hybrid_layer_s", 1e-6,
       [](std::uint64_t s) {
         return check_block<mamba::HybridLayerParams>(
             s,
             [](Rng& r) {
               auto p = mamba::HybridLayerParams::init(mamba::LayerKind::attention, 8, 2, 2.0, 4, f64, r);
               jitter(p, r);
               return p;
             },
             {{1, 8, 8}},
             [](const Inputs& in, const mamba::HybridLayerParams& p) { return mamba::hybrid_layer(in[0], p); });
       }},
      {"toy_gcvit", 1e-5, [](std::uint64_t s) { return check_model(s, "toy"); }},
      {"toy_hybrid", 1e-5, [](std::uint64_t s) { return check_model(s, "toy-hybrid"); }},
  };
  return all;
}

struct FaultScope {
  explicit FaultScope(bool on) : on_(on) {
    if (on_) testing::set_gradient_fault(true);
  }
  ~FaultScope() {
    if (on_) testing::set_gradient_fault(false);
  }
  bool on_;
};

}  // namespace

std::vector<std::string> gradcheck_blocks() {
  std::vector<std::string> names;
  for (const auto& c : checks()) names.push_back(c.name);
  return names;
}

std::vector<GradcheckEntry> run_gradcheck(const std::string& block, std::uint64_t seed, bool inject_fault) {
  FaultScope fault(inject_fault);
  std::vector<GradcheckEntry> out;
  for (const auto& c : checks()) {
    if (!block.empty() && c.name != block) continue;
    const GradcheckResult r = c.run(seed);
    out.push_back({c.name, r.max_rel_error, r.elements_checked, c.tolerance});
  }
  if (out.empty()) {
    std::string known;
    for (const auto& n : gradcheck_blocks()) known += (known.empty() ? "" : ", ") + n;
    fail(ErrorKind::usage, "unknown block \"" + block + "\" (known: " + known + ")");
  }
  return out;
}

// ---------------------------------------------------------------- training

ToyDataset make_toy_dataset(std::int64_t count, std::int64_t size, std::uint64_t seed, DType dtype) {
  require(count >= 2 && size >= 4, ErrorKind::usage, "toy dataset needs at least 2 samples of size >= 4");
  Rng rng(seed);
  ToyDataset d;
  std::vector<double> pixels(static_cast<std::size_t>(count * 3 * size * size));
  for (std::int64_t i = 0; i < count; ++i) {
    const int label = static_cast<int>(i % 2);
    d.labels.push_back(label);
    const double cycles = label == 0 ? rng.uniform(1.0, 2.0) : rng.uniform(6.0, 8.0);
    const double angle = rng.uniform(0.0, std::numbers::pi);
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double fx = std::cos(angle) * cycles / static_cast<double>(size);
    const double fy = std::sin(angle) * cycles / static_cast<double>(size);
    for (std::int64_t c = 0; c < 3; ++c) {
      for (std::int64_t y = 0; y < size; ++y) {
        for (std::int64_t x = 0; x < size; ++x) {
          const double wave = std::sin(2.0 * std::numbers::pi * (fx * x + fy * y) + phase);
          pixels[static_cast<std::size_t>(((i * 3 + c) * size + y) * size + x)] = wave + rng.normal(0.0, 0.2);
        }
      }
    }
  }
  d.images = Tensor::from_doubles({count, 3, size, size}, pixels, dtype);
  return d;
}

Tensor take_rows(const Tensor& batch, const std::vector<std::int64_t>& rows) {
  std::vector<Tensor> parts;
  for (auto r : rows) parts.push_back(ops::slice(batch, 0, r, 1));
  return ops::concat(parts, 0);
}

double sgd_step(Model& model, const Tensor& images, const std::vector<int>& labels, double lr) {
  Tape tape;
  double loss_value = 0.0;
  {
    TapeScope scope(tape);
    model.visit([&](const std::string&, Tensor& t) { tape.watch(t); });
    const Tensor loss = ops::cross_entropy(model.forward(images), labels);
    loss_value = loss.item();
    require(std::isfinite(loss_value), ErrorKind::numeric, "training loss is not finite");
    tape.backward(loss);
  }
  NoGradScope no_grad;
  model.visit([&](const std::string&, Tensor& t) { t = ops::sub(t, ops::scale(tape.grad(t), lr)); });
  return loss_value;
}

Evaluation evaluate(const Model& model, const ToyDataset& data, std::int64_t chunk) {
  NoGradScope no_grad;
  const std::int64_t n = data.images.dim(0);
  double loss_sum = 0.0;
  std::int64_t correct = 0;
  for (std::int64_t start = 0; start < n; start += chunk) {
    const std::int64_t len = std::min(chunk, n - start);
    const Tensor logits = model.forward(ops::slice(data.images, 0, start, len));
    const std::vector<int> labels(data.labels.begin() + start, data.labels.begin() + start + len);
    loss_sum += ops::cross_entropy(logits, labels).item() * static_cast<double>(len);
    const std::int64_t k = logits.dim(1);
    const auto v = logits.to_doubles();
    for (std::int64_t r = 0; r < len; ++r) {
      const auto row = v.begin() + r * k;
      if (std::max_element(row, row + k) - row == labels[static_cast<std::size_t>(r)]) ++correct;
    }
  }
  const double loss = loss_sum / static_cast<double>(n);
  require(std::isfinite(loss), ErrorKind::numeric, "evaluation loss is not finite");
  return {loss, static_cast<double>(correct) / static_cast<double>(n)};
}

TrainResult train_toy(Model& model, const TrainOptions& opt) {
  require(opt.steps >= 0 && opt.batch >= 1 && opt.eval_every >= 1, ErrorKind::usage, "invalid training options");
  require(opt.lr >= 0.0 && std::isfinite(opt.lr), ErrorKind::usage, "learning rate must be finite and >= 0");
  const ToyDataset data = make_toy_dataset(opt.samples, model.config.img_size, opt.seed, model.dtype);
  const std::int64_t n = opt.samples, batch = std::min(opt.batch, n);
  Rng order_rng(opt.seed + 17);
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::size_t cursor = order.size();

  TrainResult result;
  auto record = [&](int step) {
    const Evaluation e = evaluate(model, data);
    result.curve.push_back({step, e.loss, e.accuracy});
    return e;
  };
  record(0);
  for (int step = 1; step <= opt.steps; ++step) {
    if (cursor + static_cast<std::size_t>(batch) > order.size()) {
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<std::int64_t>(i);
      for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[order_rng.next() % (i + 1)]);
      cursor = 0;
    }
    std::vector<std::int64_t> rows(order.begin() + static_cast<std::ptrdiff_t>(cursor),
                                   order.begin() + static_cast<std::ptrdiff_t>(cursor) + batch);
    cursor += static_cast<std::size_t>(batch);
    std::vector<int> labels;
    for (auto r : rows) labels.push_back(data.labels[static_cast<std::size_t>(r)]);
    sgd_step(model, take_rows(data.images, rows), labels, opt.lr);
    result.steps_run = step;
    if (step % opt.eval_every == 0 || step == opt.steps) {
      const Evaluation e = record(step);
      if (opt.stop_accuracy > 0.0 && e.accuracy >= opt.stop_accuracy) break;
    }
  }
  return result;
}

// ---------------------------------------------------------------- benchmark

int thread_cap_from_env() {
  const char* v = std::getenv("GCVK_THREADS");
  if (v == nullptr) return 1;
  const int n = std::atoi(v);
  return std::max(1, n);
}

BenchResult run_bench(const Model& model, const BenchOptions& opt) {
  require(opt.iters >= 10, ErrorKind::usage, "bench needs at least 10 timed iterations");
  require(opt.warmup >= 1, ErrorKind::usage, "bench needs at least 1 warmup iteration");
  require(opt.batch >= 1, ErrorKind::usage, "batch must be >= 1");
  NoGradScope no_grad;
  const std::int64_t s = model.config.img_size;
  const Tensor input = Rng(opt.seed).randn({opt.batch, 3, s, s}, model.dtype);
  const int shards = static_cast<int>(std::min<std::int64_t>(std::max(1, opt.threads), opt.batch));

  auto run_once = [&](FlopTally& tally) {
    std::vector<Tensor> outs(static_cast<std::size_t>(shards));
    std::vector<FlopTally> tallies(static_cast<std::size_t>(shards));
    std::vector<std::string> errors(static_cast<std::size_t>(shards));
    auto work = [&](int k) {
      try {
        FlopCounterScope count(tallies[k]);
        const std::int64_t start = opt.batch * k / shards, end = opt.batch * (k + 1) / shards;
        outs[k] = model.forward(ops::slice(input, 0, start, end - start));
      } catch (const std::exception& e) {
        errors[k] = e.what();
      }
    };
    std::vector<std::thread> pool;
    for (int k = 1; k < shards; ++k) pool.emplace_back(work, k);
    work(0);
    for (auto& t : pool) t.join();
    for (const auto& e : errors) require(e.empty(), ErrorKind::numeric, "bench worker failed: " + e);
    for (const auto& t : tallies) {
      for (std::size_t c = 0; c < t.macs.size(); ++c) tally.macs[c] += t.macs[c];
    }
    return shards == 1 ? outs[0] : ops::concat(outs, 0);
  };

  BenchResult r;
  r.iters = opt.iters;
  r.threads = shards;
  for (int i = 0; i < opt.warmup; ++i) {
    FlopTally t;
    run_once(t);
  }
  std::vector<double> ms;
  Tensor logits;
  for (int i = 0; i < opt.iters; ++i) {
    FlopTally t;
    const auto t0 = std::chrono::steady_clock::now();
    logits = run_once(t);
    const auto t1 = std::chrono::steady_clock::now();
    ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    r.measured_flops = t.total();
  }
  std::sort(ms.begin(), ms.end());
  const std::size_t n = ms.size();
  r.median_ms = n % 2 ? ms[n / 2] : 0.5 * (ms[n / 2 - 1] + ms[n / 2]);
  r.p95_ms = ms[std::min(n - 1, static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(n))) - 1)];
  r.analytic_flops = cost_report(model, opt.batch).total_flops.total();
  r.flops_per_second = static_cast<double>(r.analytic_flops) / (r.median_ms / 1e3);
  for (double v : logits.to_doubles()) r.checksum += v;
  return r;
}

}  // namespace gcvk

// gcvk command-line front end. Talks to the library through the C API only.

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include "gcvk/gcvk.h"

namespace {

enum Exit { kOk = 0, kUsage = 1, kInvalid = 2, kNumeric = 3 };

struct Failure {
  int code;
};

int exit_code(gcvk_status s) {
  switch (s) {
    case GCVK_OK: return kOk;
    case GCVK_ERR_USAGE: return kUsage;
    case GCVK_ERR_NUMERIC: return kNumeric;
    default: return kInvalid;
  }
}

void check(gcvk_status s) {
  if (s == GCVK_OK) return;
  std::cerr << "error (" << gcvk_status_name(s) << "): " << gcvk_last_error() << "\n";
  throw Failure{exit_code(s)};
}

std::string take(char* s) {
  std::string out = s ? s : "";
  gcvk_string_free(s);
  return out;
}

struct ConfigHandle {
  gcvk_config* p = nullptr;
  ~ConfigHandle() { gcvk_config_free(p); }
};

struct ModelHandle {
  gcvk_model* p = nullptr;
  ~ModelHandle() { gcvk_model_free(p); }
};

struct Common {
  std::string variant;
  std::string config;
  std::int64_t size = 0;
  std::int64_t batch = 1;
  std::uint64_t seed = 0;
  std::string dtype = "f32";
  bool json = false;
};

void add_model_flags(CLI::App* cmd, Common& c, const std::string& default_variant) {
  c.variant = default_variant;
  auto* v = cmd->add_option("--variant", c.variant, "Built-in variant (xxt, xt, tiny, small, base, toy, toy-hybrid)");
  auto* f = cmd->add_option("--config", c.config, "JSON config file")->check(CLI::ExistingFile);
  v->excludes(f);
  cmd->add_option("--size", c.size, "Input resolution (multiple of 32)");
}

void load_config(const Common& c, ConfigHandle& cfg) {
  if (!c.config.empty()) {
    check(gcvk_config_from_file(c.config.c_str(), &cfg.p));
  } else {
    check(gcvk_config_from_variant(c.variant.c_str(), &cfg.p));
  }
  if (c.size > 0) check(gcvk_config_set_img_size(cfg.p, c.size));
}

gcvk_dtype parse_dtype(const std::string& s) { return s == "f64" ? GCVK_F64 : GCVK_F32; }

// Deterministic N(0, 1) images for checksums.
std::vector<double> sample_images(std::int64_t count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  std::vector<double> v(static_cast<std::size_t>(count));
  for (auto& x : v) x = n(rng);
  return v;
}

double forward_checksum(const gcvk_model* m, std::int64_t batch, std::uint64_t seed) {
  const std::int64_t s = gcvk_model_img_size(m), k = gcvk_model_num_classes(m);
  const auto images = sample_images(batch * 3 * s * s, seed);
  double sum = 0.0;
  if (gcvk_model_dtype(m) == GCVK_F64) {
    std::vector<double> logits(static_cast<std::size_t>(batch * k));
    check(gcvk_model_forward_f64(m, images.data(), batch, logits.data()));
    for (double v : logits) sum += v;
  } else {
    std::vector<float> in(images.begin(), images.end()), logits(static_cast<std::size_t>(batch * k));
    check(gcvk_model_forward_f32(m, in.data(), batch, logits.data()));
    for (float v : logits) sum += v;
  }
  return sum;
}

int thread_cap() {
  const char* v = std::getenv("GCVK_THREADS");
  const int n = v ? std::atoi(v) : 1;
  return n < 1 ? 1 : n;
}

int run_summary(const Common& c) {
  ConfigHandle cfg;
  load_config(c, cfg);
  std::cout << take([&] {
    char* out = nullptr;
    check(gcvk_summary(cfg.p, c.batch, c.json ? 1 : 0, &out));
    return out;
  }());
  if (c.json) std::cout << "\n";
  return kOk;
}

int run_gradcheck(const std::string& block, std::uint64_t seed, bool fault, bool json) {
  char* report = nullptr;
  int passed = 0;
  check(gcvk_gradcheck(block.empty() ? nullptr : block.c_str(), seed, fault ? 1 : 0, json ? 1 : 0, &report,
                       &passed));
  std::cout << take(report);
  if (json) std::cout << "\n";
  if (!passed) {
    std::cerr << "gradcheck failed: relative error >= 1e-5 in the block(s) marked FAIL\n";
    return kNumeric;
  }
  return kOk;
}

int run_bench(const Common& c, int iters, int warmup, const std::string& weights) {
  ConfigHandle cfg;
  load_config(c, cfg);
  ModelHandle model;
  if (weights.empty()) {
    check(gcvk_model_build(cfg.p, c.seed, parse_dtype(c.dtype), &model.p));
  } else {
    check(gcvk_model_load(cfg.p, weights.c_str(), &model.p));
  }
  gcvk_bench_result r{};
  check(gcvk_bench(model.p, c.batch, iters, warmup, thread_cap(), c.seed, &r));
  if (c.json) {
    std::printf(
        "{\"median_ms\": %.4f, \"p95_ms\": %.4f, \"analytic_flops\": %llu, \"measured_flops\": %llu, "
        "\"flops_per_second\": %.6e, \"checksum\": %.17g, \"iters\": %d, \"threads\": %d}\n",
        r.median_ms, r.p95_ms, static_cast<unsigned long long>(r.analytic_flops),
        static_cast<unsigned long long>(r.measured_flops), r.flops_per_second, r.checksum, r.iters, r.threads);
  } else {
    std::printf("median_ms        %.4f\n", r.median_ms);
    std::printf("p95_ms           %.4f\n", r.p95_ms);
    std::printf("analytic_flops   %llu\n", static_cast<unsigned long long>(r.analytic_flops));
    std::printf("measured_flops   %llu\n", static_cast<unsigned long long>(r.measured_flops));
    std::printf("flops_per_second %.4e\n", r.flops_per_second);
    std::printf("checksum         %.17g\n", r.checksum);
    std::printf("(%d iterations, %d worker%s; 1 FLOP = 1 multiply-accumulate)\n", r.iters, r.threads,
                r.threads == 1 ? "" : "s");
  }
  return kOk;
}

int run_train(const Common& c, gcvk_train_options opt, const std::string& out) {
  ConfigHandle cfg;
  load_config(c, cfg);
  ModelHandle model;
  check(gcvk_model_build(cfg.p, c.seed, parse_dtype(c.dtype), &model.p));
  opt.seed = c.seed;
  char* report = nullptr;
  double initial = 0.0, final_loss = 0.0, accuracy = 0.0;
  check(gcvk_train_toy(model.p, &opt, c.json ? 1 : 0, &report, &initial, &final_loss, &accuracy));
  std::cout << take(report);
  if (c.json) std::cout << "\n";
  if (!out.empty()) check(gcvk_model_save(model.p, out.c_str()));
  if (!c.json) std::printf("initial loss %.6f  final loss %.6f  accuracy %.4f\n", initial, final_loss, accuracy);
  if (!(final_loss < initial) && opt.lr > 0.0) {
    std::cerr << "training did not reduce the loss\n";
    return kNumeric;
  }
  return kOk;
}

int run_export(const Common& c, const std::string& out) {
  ConfigHandle cfg;
  load_config(c, cfg);
  ModelHandle model;
  check(gcvk_model_build(cfg.p, c.seed, parse_dtype(c.dtype), &model.p));
  check(gcvk_model_save(model.p, out.c_str()));
  std::int64_t params = 0;
  check(gcvk_model_param_count(model.p, &params));
  std::printf("wrote %s (%lld parameters)\n", out.c_str(), static_cast<long long>(params));
  std::printf("forward checksum %.17g\n", forward_checksum(model.p, c.batch, c.seed));
  return kOk;
}

int run_import(const Common& c, const std::string& weights, const std::string& out) {
  ConfigHandle cfg;
  load_config(c, cfg);
  ModelHandle model;
  check(gcvk_model_load(cfg.p, weights.c_str(), &model.p));
  std::int64_t params = 0;
  check(gcvk_model_param_count(model.p, &params));
  std::printf("loaded %s (%lld parameters)\n", weights.c_str(), static_cast<long long>(params));
  std::printf("forward checksum %.17g\n", forward_checksum(model.p, c.batch, c.seed));
  if (!out.empty()) check(gcvk_model_save(model.p, out.c_str()));
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GC ViT / MambaVision numerical toolkit"};
  app.require_subcommand(1);

  Common summary_opts;
  auto* summary = app.add_subcommand("summary", "Per-stage parameter and FLOP report");
  add_model_flags(summary, summary_opts, "tiny");
  summary->add_option("--batch", summary_opts.batch, "Batch size for FLOP totals");
  summary->add_flag("--json", summary_opts.json, "Emit JSON");

  std::string block;
  std::uint64_t grad_seed = 0;
  bool grad_json = false, grad_fault = false;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient checks (f64)");
  gradcheck->add_option("--block", block, "Check a single block");
  gradcheck->add_option("--seed", grad_seed, "Seed");
  gradcheck->add_flag("--json", grad_json, "Emit JSON");
  gradcheck->add_flag("--inject-grad-fault", grad_fault, "Corrupt the softmax gradient (negative control)")
      ->group("");

  Common bench_opts;
  int iters = 10, warmup = 1;
  std::string bench_weights;
  auto* bench = app.add_subcommand("bench", "Time forward passes");
  add_model_flags(bench, bench_opts, "xxt");
  bench->add_option("--batch", bench_opts.batch, "Batch size");
  bench->add_option("--seed", bench_opts.seed, "Seed for weights and input");
  bench->add_option("--dtype", bench_opts.dtype, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
  bench->add_option("--iters", iters, "Timed iterations (>= 10)");
  bench->add_option("--warmup", warmup, "Warmup iterations (>= 1)");
  bench->add_option("--weights", bench_weights, "Load weights instead of seeded init");
  bench->add_flag("--json", bench_opts.json, "Emit JSON");

  Common train_opts;
  train_opts.batch = 32;
  gcvk_train_options topt;
  gcvk_train_options_default(&topt);
  std::string train_out;
  auto* train = app.add_subcommand("train-toy", "SGD on the synthetic two-class set");
  add_model_flags(train, train_opts, "toy");
  train->add_option("--steps", topt.steps, "SGD steps");
  train->add_option("--lr", topt.lr, "Learning rate");
  train->add_option("--batch", topt.batch, "Minibatch size");
  train->add_option("--eval-every", topt.eval_every, "Steps between full-set evaluations");
  train->add_option("--target-accuracy", topt.stop_accuracy, "Stop once train accuracy reaches this");
  train->add_option("--seed", train_opts.seed, "Seed for weights, data and shuffling");
  train->add_option("--dtype", train_opts.dtype, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
  train->add_option("--out", train_out, "Write trained weights here");
  train->add_flag("--json", train_opts.json, "Emit JSON");

  Common export_opts;
  std::string export_out;
  auto* exp = app.add_subcommand("export-weights", "Write seeded weights to a file");
  add_model_flags(exp, export_opts, "toy");
  exp->add_option("--seed", export_opts.seed, "Seed");
  exp->add_option("--dtype", export_opts.dtype, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
  exp->add_option("--batch", export_opts.batch, "Batch for the checksum forward");
  exp->add_option("--out", export_out, "Output path")->required();

  Common import_opts;
  std::string import_in, import_out;
  auto* imp = app.add_subcommand("import-weights", "Load a weights file into a matching model");
  add_model_flags(imp, import_opts, "toy");
  imp->add_option("--weights", import_in, "Weights file")->required();
  imp->add_option("--seed", import_opts.seed, "Seed for the checksum input");
  imp->add_option("--batch", import_opts.batch, "Batch for the checksum forward");
  imp->add_option("--out", import_out, "Re-export the loaded weights here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*summary) return run_summary(summary_opts);
    if (*gradcheck) return run_gradcheck(block, grad_seed, grad_fault, grad_json);
    if (*bench) return run_bench(bench_opts, iters, warmup, bench_weights);
    if (*train) return run_train(train_opts, topt, train_out);
    if (*exp) return run_export(export_opts, export_out);
    if (*imp) return run_import(import_opts, import_in, import_out);
  } catch (const Failure& f) {
    return f.code;
  }
  return kUsage;
}

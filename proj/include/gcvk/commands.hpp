#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gcvk/autograd.hpp"
#include "gcvk/model.hpp"

namespace gcvk {

// ---- gradient suite ----

struct GradcheckEntry {
  std::string block;
  double max_rel_error = 0.0;
  std::int64_t elements = 0;
  double tolerance = 1e-6;  // 1e-5 for the end-to-end toy models
  bool passed() const { return max_rel_error < tolerance; }
};

std::vector<std::string> gradcheck_blocks();
// Runs every block (block empty) or one named block in f64. With
// inject_fault the softmax backward is deliberately wrong for the duration.
std::vector<GradcheckEntry> run_gradcheck(const std::string& block, std::uint64_t seed, bool inject_fault = false);

// ---- toy data and training ----

struct ToyDataset {
  Tensor images;  // [N, 3, S, S]
  std::vector<int> labels;
};

// Two classes of oriented sinusoids with random phase plus noise: class 0 has
// 1-2 cycles per image, class 1 has 6-8. Labels alternate 0, 1, 0, ...
ToyDataset make_toy_dataset(std::int64_t count, std::int64_t size, std::uint64_t seed, DType dtype);

Tensor take_rows(const Tensor& batch, const std::vector<std::int64_t>& rows);

// One plain SGD step p <- p - lr * dL/dp on every parameter; returns the
// minibatch loss before the step.
double sgd_step(Model& model, const Tensor& images, const std::vector<int>& labels, double lr);

struct Evaluation {
  double loss = 0.0;
  double accuracy = 0.0;
};
Evaluation evaluate(const Model& model, const ToyDataset& data, std::int64_t chunk = 64);

struct TrainOptions {
  int steps = 50;
  double lr = 0.02;
  std::int64_t batch = 32;
  std::int64_t samples = 256;
  int eval_every = 10;
  // Stop early once full-set accuracy reaches this (0 disables).
  double stop_accuracy = 0.0;
  std::uint64_t seed = 0;
};

struct TrainPoint {
  int step = 0;  // SGD steps taken before this evaluation
  double loss = 0.0;
  double accuracy = 0.0;
};

struct TrainResult {
  std::vector<TrainPoint> curve;  // full-set evaluations, first at step 0
  int steps_run = 0;
  double initial_loss() const { return curve.front().loss; }
  double final_loss() const { return curve.back().loss; }
  double final_accuracy() const { return curve.back().accuracy; }
};

// Throws ErrorKind::numeric if the loss becomes non-finite.
TrainResult train_toy(Model& model, const TrainOptions& opt);

// ---- benchmark ----

struct BenchOptions {
  std::int64_t batch = 1;
  int iters = 10;
  int warmup = 1;
  int threads = 1;
  std::uint64_t seed = 0;
};

struct BenchResult {
  double median_ms = 0.0;
  double p95_ms = 0.0;
  std::uint64_t analytic_flops = 0;
  std::uint64_t measured_flops = 0;
  double flops_per_second = 0.0;
  double checksum = 0.0;
  int iters = 0;
  int threads = 1;
};

BenchResult run_bench(const Model& model, const BenchOptions& opt);

// Worker cap from GCVK_THREADS (default 1, clamped to >= 1).
int thread_cap_from_env();

}  // namespace gcvk

#include "gcvk/autograd.hpp"

#include <atomic>

#include "gcvk/flops.hpp"
#include "gcvk/ops.hpp"

namespace gcvk {
namespace {
thread_local Tape* g_tape = nullptr;
std::atomic<bool> g_gradient_fault{false};
}  // namespace

Tape* active_tape() noexcept { return g_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_tape) { g_tape = &tape; }
TapeScope::~TapeScope() { g_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_tape) { g_tape = nullptr; }
NoGradScope::~NoGradScope() { g_tape = previous_; }

void Tape::watch(const Tensor& t) {
  require(t.defined(), ErrorKind::usage, "cannot watch an undefined tensor");
  tracked_.insert(t.id());
}

void Tape::record(std::vector<Tensor> inputs, const Tensor& output, BackwardFn fn) {
  tracked_.insert(output.id());
  nodes_.push_back(Node{std::move(inputs), output, std::move(fn)});
}

void Tape::accumulate(const Tensor& target, const Tensor& g) {
  require(g.shape() == target.shape(), ErrorKind::shape,
          "gradient shape " + shape_str(g.shape()) + " does not match value shape " +
              shape_str(target.shape()));
  auto it = grads_.find(target.id());
  if (it == grads_.end()) {
    grads_.emplace(target.id(), g);
  } else {
    it->second = ops::add(it->second, g);
  }
}

void Tape::backward(const Tensor& out) {
  require(out.numel() == 1, ErrorKind::usage,
          "backward needs a scalar output, got shape " + shape_str(out.shape()));
  NoGradScope no_grad;
  FlopPauseScope no_count;
  accumulate(out, Tensor::full(out.shape(), 1.0, out.dtype()));
  for (auto node = nodes_.rbegin(); node != nodes_.rend(); ++node) {
    auto it = grads_.find(node->output.id());
    if (it == grads_.end()) continue;
    const Tensor grad_out = it->second;
    std::vector<Tensor> grads = node->fn(grad_out);
    for (std::size_t i = 0; i < node->inputs.size() && i < grads.size(); ++i) {
      if (grads[i].defined() && tracked(node->inputs[i])) accumulate(node->inputs[i], grads[i]);
    }
  }
}

Tensor Tape::grad(const Tensor& t) const {
  auto it = grads_.find(t.id());
  if (it != grads_.end()) return it->second;
  return Tensor::zeros(t.shape(), t.dtype());
}

void Tape::clear() {
  nodes_.clear();
  tracked_.clear();
  grads_.clear();
}

bool any_tracked(std::initializer_list<Tensor> inputs) {
  if (g_tape == nullptr) return false;
  for (const auto& t : inputs) {
    if (t.defined() && g_tape->tracked(t)) return true;
  }
  return false;
}

void record_op(const std::vector<Tensor>& inputs, const Tensor& output, BackwardFn fn) {
  if (g_tape == nullptr) return;
  bool any = false;
  for (const auto& t : inputs) any = any || (t.defined() && g_tape->tracked(t));
  if (any) g_tape->record(inputs, output, std::move(fn));
}

void record_op(std::initializer_list<Tensor> inputs, const Tensor& output, BackwardFn fn) {
  record_op(std::vector<Tensor>(inputs), output, std::move(fn));
}

namespace testing {
void set_gradient_fault(bool enabled) noexcept { g_gradient_fault = enabled; }
bool gradient_fault() noexcept { return g_gradient_fault; }
}  // namespace testing

}  // namespace gcvk

#pragma once

#include <functional>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "gcvk/tensor.hpp"

namespace gcvk {

// Maps the gradient of an op's output to gradients of its inputs. An
// undefined Tensor in the result means "no contribution" for that input.
using BackwardFn = std::function<std::vector<Tensor>(const Tensor& grad_out)>;

// Reverse-mode tape. Nodes are stored in creation order, which is a valid
// topological order, and backward() walks them strictly in reverse.
class Tape {
 public:
  void watch(const Tensor& t);
  bool tracked(const Tensor& t) const { return tracked_.count(t.id()) != 0; }

  void record(std::vector<Tensor> inputs, const Tensor& output, BackwardFn fn);

  // Seeds d(out)/d(out) = 1; out must hold exactly one element.
  void backward(const Tensor& out);

  // Accumulated gradient for t, zeros of t's shape if nothing reached it.
  Tensor grad(const Tensor& t) const;
  bool has_grad(const Tensor& t) const { return grads_.count(t.id()) != 0; }

  std::size_t size() const { return nodes_.size(); }
  void clear();

 private:
  struct Node {
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn fn;
  };
  void accumulate(const Tensor& target, const Tensor& g);

  std::vector<Node> nodes_;
  std::unordered_set<const TensorImpl*> tracked_;
  std::unordered_map<const TensorImpl*, Tensor> grads_;
};

// Installs a tape as the thread's recording target for its lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Suspends recording (used while running backward closures).
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape() noexcept;

// Records fn on the active tape when any input is tracked.
void record_op(std::initializer_list<Tensor> inputs, const Tensor& output, BackwardFn fn);
void record_op(const std::vector<Tensor>& inputs, const Tensor& output, BackwardFn fn);
bool any_tracked(std::initializer_list<Tensor> inputs);

namespace testing {
// Negative-control hook: when enabled, softmax backward is deliberately
// scaled so gradient checks of attention blocks must fail.
void set_gradient_fault(bool enabled) noexcept;
bool gradient_fault() noexcept;
}  // namespace testing

}  // namespace gcvk

#include "gcvk/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gcvk/autograd.hpp"
#include "gcvk/init.hpp"

namespace gcvk {
namespace {

Tensor with_offset(const Tensor& t, std::int64_t i, double delta) {
  std::vector<double> v = t.to_doubles();
  v[static_cast<std::size_t>(i)] += delta;
  return Tensor::from_doubles(t.shape(), v, t.dtype());
}

double evaluate(const std::function<Tensor()>& f) {
  const Tensor out = f();
  require(out.numel() == 1, ErrorKind::usage, "gradcheck: function must be scalar-valued, got shape " +
                                                  shape_str(out.shape()));
  return out.item();
}

}  // namespace

GradcheckResult gradcheck(const std::function<Tensor()>& f, const std::vector<Tensor*>& leaves,
                          const GradcheckOptions& opt) {
  require(opt.step >= 1e-6 && opt.step <= 1e-4, ErrorKind::usage, "gradcheck: step must lie in [1e-6, 1e-4]");
  for (const Tensor* leaf : leaves) {
    require(leaf->dtype() == DType::f64, ErrorKind::usage, "gradcheck requires f64 tensors");
  }

  std::vector<Tensor> analytic;
  {
    Tape tape;
    TapeScope scope(tape);
    for (Tensor* leaf : leaves) tape.watch(*leaf);
    const Tensor out = f();
    require(out.numel() == 1, ErrorKind::usage,
            "gradcheck: function must be scalar-valued, got shape " + shape_str(out.shape()));
    tape.backward(out);
    for (Tensor* leaf : leaves) analytic.push_back(tape.grad(*leaf));
  }

  Rng rng(opt.seed);
  GradcheckResult result;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    Tensor& leaf = *leaves[li];
    const Tensor original = leaf;
    struct Restore {
      Tensor& slot;
      Tensor value;
      ~Restore() { slot = value; }
    } restore{leaf, original};
    std::vector<std::int64_t> picks(static_cast<std::size_t>(original.numel()));
    std::iota(picks.begin(), picks.end(), std::int64_t{0});
    if (opt.max_elements_per_leaf > 0 && static_cast<std::int64_t>(picks.size()) > opt.max_elements_per_leaf) {
      for (std::size_t i = 0; i < static_cast<std::size_t>(opt.max_elements_per_leaf); ++i) {
        const auto j = i + rng.next() % (picks.size() - i);
        std::swap(picks[i], picks[j]);
      }
      picks.resize(static_cast<std::size_t>(opt.max_elements_per_leaf));
    }
    for (auto i : picks) {
      leaf = with_offset(original, i, opt.step);
      const double up = evaluate(f);
      leaf = with_offset(original, i, -opt.step);
      const double down = evaluate(f);
      leaf = original;
      const double numeric = (up - down) / (2.0 * opt.step);
      const double a = analytic[li].at(i);
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
      result.max_rel_error = std::max(result.max_rel_error, err);
      ++result.elements_checked;
    }
  }
  return result;
}

}  // namespace gcvk

#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "gcvk/tensor.hpp"

namespace gcvk {

struct GradcheckOptions {
  double step = 1e-5;
  // Per leaf, check at most this many elements (0 = all). Sampled elements
  // are chosen deterministically from `seed`.
  std::int64_t max_elements_per_leaf = 0;
  std::uint64_t seed = 0;
};

struct GradcheckResult {
  double max_rel_error = 0.0;
  std::int64_t elements_checked = 0;
};

// Compares reverse-mode gradients of the scalar f() with respect to every
// *leaf against central differences. Leaves are replaced in place by
// perturbed copies while probing and restored afterwards. Returns
// max |analytic - numeric| / max(1, |analytic|).
GradcheckResult gradcheck(const std::function<Tensor()>& f, const std::vector<Tensor*>& leaves,
                          const GradcheckOptions& opt = {});

}  // namespace gcvk

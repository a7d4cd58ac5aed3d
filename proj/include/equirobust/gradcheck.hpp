#pragma once

#include <functional>
#include <vector>

#include "equirobust/tensor.hpp"

namespace equirobust {

struct GradCheckResult {
  double max_rel_error = 0.0;  // worst over all inputs
  std::size_t worst_input = 0;
};

/// Compares the tape gradient of a scalar function against central
/// differences with step h. The error for one input is
/// max|analytic - numeric| / max(max|numeric|, floor), i.e. relative to the
/// gradient's scale. `inputs` are perturbed in place and restored.
GradCheckResult gradcheck(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                          std::vector<Tensor> inputs, double h = 1e-5, double floor = 1e-8);

}  // namespace equirobust

#pragma once

#include <functional>

#include "equirobust/tensor.hpp"

namespace equirobust {

/// Input Jacobian of f at x as a (k, d) tensor, d = x.numel(), where f(x)
/// holds k logits (any shape with k entries). Row j is the gradient of logit
/// j, obtained from its own forward and backward pass. Throws NumericError
/// on non-finite entries.
Tensor input_jacobian(const std::function<Tensor(const Tensor&)>& f, const Tensor& x);

}  // namespace equirobust

#include "equirobust/jacobian.hpp"

#include "equirobust/ops.hpp"

namespace equirobust {

Tensor input_jacobian(const std::function<Tensor(const Tensor&)>& f, const Tensor& x) {
  const std::size_t d = x.numel();
  std::size_t k = 0;
  std::vector<double> rows;
  for (std::size_t j = 0; k == 0 || j < k; ++j) {
    Tensor xin = x.detach().set_requires_grad(true);
    Tensor out = f(xin);
    if (k == 0) {
      k = out.numel();
      if (k == 0) throw ShapeError("input_jacobian: function produced no outputs");
      rows.reserve(k * d);
    }
    std::vector<double> pick(k, 0.0);
    pick[j] = 1.0;
    backward(ops::weighted_reduce(out, pick));
    if (xin.has_grad()) {
      auto g = xin.grad();
      rows.insert(rows.end(), g.begin(), g.end());
    } else {
      rows.insert(rows.end(), d, 0.0);
    }
  }
  Tensor jac(Shape{k, d}, std::move(rows));
  if (!jac.all_finite()) throw NumericError("input_jacobian: non-finite entry");
  return jac;
}

}  // namespace equirobust

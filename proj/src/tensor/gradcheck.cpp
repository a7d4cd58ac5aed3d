#include "equirobust/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace equirobust {

GradCheckResult gradcheck(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                          std::vector<Tensor> inputs, double h, double floor) {
  for (Tensor& t : inputs) {
    t.zero_grad();
    t.set_requires_grad(true);
  }
  backward(f(inputs));

  GradCheckResult res;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor& t = inputs[k];
    const std::vector<double> analytic = t.has_grad()
                                             ? std::vector<double>(t.grad().begin(), t.grad().end())
                                             : std::vector<double>(t.numel(), 0.0);
    auto data = t.mutable_data();
    double diff = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double keep = data[i];
      data[i] = keep + h;
      const double up = f(inputs).item();
      data[i] = keep - h;
      const double down = f(inputs).item();
      data[i] = keep;
      const double numeric = (up - down) / (2.0 * h);
      diff = std::max(diff, std::abs(numeric - analytic[i]));
      scale = std::max(scale, std::abs(numeric));
    }
    const double err = diff / std::max(scale, floor);
    if (err > res.max_rel_error) {
      res.max_rel_error = err;
      res.worst_input = k;
    }
  }
  return res;
}

}  // namespace equirobust

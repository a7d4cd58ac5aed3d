#pragma once

#include <random>

#include "equirobust/attacks.hpp"
#include "equirobust/ops.hpp"
#include "equirobust/tensor.hpp"

namespace testing_support {

inline equirobust::Tensor randn(equirobust::Shape shape, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> dist(0.0, sd);
  std::vector<double> v(equirobust::shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return equirobust::Tensor(std::move(shape), std::move(v));
}

inline equirobust::Tensor uniform(equirobust::Shape shape, std::mt19937_64& rng, double lo = 0.0,
                                  double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(equirobust::shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return equirobust::Tensor(std::move(shape), std::move(v));
}

inline std::vector<double> random_weights(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = dist(rng);
  return v;
}

inline double max_abs_diff(const equirobust::Tensor& a, const equirobust::Tensor& b) {
  double m = 0.0;
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < ad.size(); ++i) m = std::max(m, std::abs(ad[i] - bd[i]));
  return m;
}

/// Logits x_flat * W^T + b for W (k, d).
inline equirobust::attacks::Classifier linear_classifier(const equirobust::Tensor& w, const equirobust::Tensor& b) {
  return [w, b](const equirobust::Tensor& x) {
    const std::size_t n = x.size(0);
    return equirobust::ops::linear(equirobust::ops::reshape(x, {n, x.numel() / n}), w, b);
  };
}

}  // namespace testing_support

#include "equirobust/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>
#include <stdexcept>

#include "equirobust/model.hpp"
#include "equirobust/ops.hpp"
#include "equirobust/parallel.hpp"

namespace equirobust::attacks {

namespace {

double sign(double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); }

// Clamps v into the ball around x0. The bounds x0 +- epsilon are rounded, so
// v then steps toward x0 until the measured distance fits.
double into_ball(double v, double x0, double epsilon) {
  v = std::clamp(v, x0 - epsilon, x0 + epsilon);
  while (std::abs(v - x0) > epsilon) v = std::nextafter(v, x0);
  return v;
}

// One projected sign step. FGSM is this step from x0 with alpha = epsilon,
// which is what makes the one-step PGD collapse bit-exact.
void project_step(std::span<double> cur, std::span<const double> x0, std::span<const double> g, double alpha,
                  double epsilon) {
  for (std::size_t i = 0; i < cur.size(); ++i) {
    double v = cur[i] + alpha * sign(g[i]);
    cur[i] = std::clamp(into_ball(v, x0[i], epsilon), 0.0, 1.0);
  }
}

void check_batch(const Tensor& x, const std::vector<int>& y) {
  if (x.dim() == 0 || x.size(0) != y.size()) {
    throw ShapeError("attack: batch of " + shape_str(x.shape()) + " with " + std::to_string(y.size()) + " labels");
  }
}

}  // namespace

Classifier classifier(Model& model) {
  return [&model](const Tensor& x) { return model.forward(x, nn::Mode::eval); };
}

std::string to_string(AttackKind k) { return k == AttackKind::fgsm ? "fgsm" : "pgd"; }

AttackKind attack_from_string(const std::string& s) {
  if (s == "fgsm" || s == "FGSM") return AttackKind::fgsm;
  if (s == "pgd" || s == "PGD") return AttackKind::pgd;
  throw std::invalid_argument("unknown attack '" + s + "' (known: fgsm, pgd)");
}

void AttackConfig::validate() const {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw std::invalid_argument("attack: epsilon must be in [0, 1]");
  if (kind == AttackKind::pgd) {
    if (steps < 1) throw std::invalid_argument("attack: steps must be at least 1");
    if (step_size && !(*step_size > 0.0)) throw std::invalid_argument("attack: step_size must be positive");
    if (!step_size && !(step_ratio > 0.0)) throw std::invalid_argument("attack: step_ratio must be positive");
  }
}

std::vector<std::string> AttackConfig::warnings() const {
  std::vector<std::string> w;
  if (kind == AttackKind::pgd && alpha() > epsilon) {
    w.push_back("attack: step size " + std::to_string(alpha()) + " exceeds epsilon " + std::to_string(epsilon));
  }
  if (kind == AttackKind::pgd && alpha() * steps < epsilon) {
    w.push_back("attack: steps * step size does not reach the ball boundary");
  }
  return w;
}

double AttackConfig::alpha() const {
  if (kind == AttackKind::fgsm) return epsilon;
  return step_size ? *step_size : step_ratio * epsilon;
}

AttackConfig AttackConfig::with_epsilon(double eps) const {
  AttackConfig c = *this;
  c.epsilon = eps;
  return c;
}

std::string AttackConfig::describe() const {
  std::ostringstream os;
  os << to_string(kind) << " eps=" << epsilon;
  if (kind == AttackKind::pgd) {
    os << " steps=" << steps << " alpha=";
    if (step_size) os << *step_size;
    else os << step_ratio << "*eps";
    os << " random_start=" << (random_start ? "true" : "false") << " seed=" << seed;
  }
  return os.str();
}

std::vector<double> cross_entropy(const Classifier& f, const Tensor& x, const std::vector<int>& y) {
  check_batch(x, y);
  FreezeParameters frozen;
  Tensor logits = f(x.detach());
  const std::size_t n = y.size(), k = logits.numel() / n;
  auto z = logits.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = z.data() + i * k;
    const double m = *std::max_element(row, row + k);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(row[j] - m);
    out[i] = m + std::log(s) - row[static_cast<std::size_t>(y[i])];
  }
  return out;
}

Tensor input_gradient(const Classifier& f, const Tensor& x, const std::vector<int>& y) {
  check_batch(x, y);
  FreezeParameters frozen;
  Tensor xin = x.detach().set_requires_grad(true);
  backward(ops::softmax_cross_entropy(f(xin), y, ops::Reduction::sum));
  Tensor g = xin.has_grad() ? xin.grad_tensor() : Tensor(x.shape(), 0.0);
  if (!g.all_finite()) throw NumericError("attack: non-finite input gradient");
  return g;
}

Tensor fgsm(const Classifier& f, const Tensor& x, const std::vector<int>& y, double epsilon) {
  AttackConfig cfg;
  cfg.kind = AttackKind::fgsm;
  cfg.epsilon = epsilon;
  cfg.validate();
  Tensor out = x.detach();
  if (epsilon == 0.0) return out;
  Tensor g = input_gradient(f, x, y);
  project_step(out.mutable_data(), x.data(), g.data(), epsilon, epsilon);
  return out;
}

Tensor pgd(const Classifier& f, const Tensor& x, const std::vector<int>& y, const AttackConfig& cfg,
           std::size_t first_index, const IterateObserver& observer) {
  cfg.validate();
  check_batch(x, y);
  Tensor cur = x.detach();
  if (cfg.epsilon == 0.0) {
    if (observer) observer(0, cur);
    return cur;
  }
  const double eps = cfg.epsilon, alpha = cfg.alpha();
  auto x0 = x.data();
  if (cfg.random_start) {
    const std::size_t n = y.size(), per = x.numel() / n;
    auto c = cur.mutable_data();
    for (std::size_t s = 0; s < n; ++s) {
      std::mt19937_64 rng(cfg.seed + first_index + s);
      std::uniform_real_distribution<double> u(-eps, eps);
      for (std::size_t i = s * per; i < (s + 1) * per; ++i) {
        c[i] = std::clamp(into_ball(x0[i] + u(rng), x0[i], eps), 0.0, 1.0);
      }
    }
  }
  if (observer) observer(0, cur);
  for (int t = 1; t <= cfg.steps; ++t) {
    Tensor g = input_gradient(f, cur, y);
    project_step(cur.mutable_data(), x0, g.data(), alpha, eps);
    if (observer) observer(t, cur);
  }
  return cur;
}

Tensor run_attack(const Classifier& f, const Tensor& x, const std::vector<int>& y, const AttackConfig& cfg,
                  std::size_t first_index) {
  return cfg.kind == AttackKind::fgsm ? fgsm(f, x, y, cfg.epsilon) : pgd(f, x, y, cfg, first_index);
}

std::vector<int> predict(const Classifier& f, const Tensor& x) {
  Tensor logits;
  {
    FreezeParameters frozen;
    logits = f(x.detach());
  }
  const std::size_t n = x.size(0), k = logits.numel() / n;
  auto z = logits.data();
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i)
    out[i] = static_cast<int>(std::max_element(z.begin() + i * k, z.begin() + (i + 1) * k) - (z.begin() + i * k));
  return out;
}

std::vector<double> default_epsilon_grid() { return {0.0, 0.01, 0.02, 0.03, 0.04, 0.05, 0.10}; }

Tensor attack_dataset(const Classifier& f, const Dataset& ds, const AttackConfig& cfg, std::size_t chunk) {
  if (ds.size() == 0) throw std::invalid_argument("attack: empty dataset");
  cfg.validate();
  chunk = std::max<std::size_t>(chunk, 1);
  const std::size_t chunks = (ds.size() + chunk - 1) / chunk, per = ds.images.numel() / ds.size();
  std::vector<double> out(ds.images.numel());
  parallel_for(chunks, [&](std::size_t c) {
    const std::size_t b = c * chunk, e = std::min(ds.size(), b + chunk);
    Tensor adv = run_attack(f, ds.batch(b, e), ds.batch_labels(b, e), cfg, b);
    std::copy(adv.data().begin(), adv.data().end(), out.begin() + static_cast<long>(b * per));
  });
  return Tensor(ds.images.shape(), std::move(out));
}

std::vector<AccuracyPoint> adversarial_accuracy(const Classifier& f, const Dataset& ds, const AttackConfig& cfg,
                                                const std::vector<double>& epsilon_grid, std::size_t chunk) {
  if (ds.size() == 0) throw std::invalid_argument("adversarial_accuracy: empty dataset");
  if (epsilon_grid.empty()) throw std::invalid_argument("adversarial_accuracy: empty epsilon grid");
  for (std::size_t i = 1; i < epsilon_grid.size(); ++i)
    if (!(epsilon_grid[i] > epsilon_grid[i - 1])) {
      throw std::invalid_argument("adversarial_accuracy: epsilon grid must be strictly ascending");
    }
  chunk = std::max<std::size_t>(chunk, 1);
  const std::size_t chunks = (ds.size() + chunk - 1) / chunk;
  std::vector<AccuracyPoint> points;
  for (double eps : epsilon_grid) {
    const AttackConfig c = cfg.with_epsilon(eps);
    c.validate();
    std::vector<std::size_t> correct(chunks, 0);
    parallel_for(chunks, [&](std::size_t k) {
      const std::size_t b = k * chunk, e = std::min(ds.size(), b + chunk);
      const auto y = ds.batch_labels(b, e);
      const Tensor x = ds.batch(b, e);
      const auto pred = predict(f, eps == 0.0 ? x : run_attack(f, x, y, c, b));
      for (std::size_t i = 0; i < y.size(); ++i) correct[k] += pred[i] == y[i] ? 1 : 0;
    });
    AccuracyPoint p;
    p.epsilon = eps;
    p.total = ds.size();
    for (auto v : correct) p.correct += v;
    points.push_back(p);
  }
  return points;
}

}  // namespace equirobust::attacks

#include "equirobust/certify.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <stdexcept>

#include "equirobust/model.hpp"
#include "equirobust/ops.hpp"

namespace equirobust::certify {

namespace {

void require_single(const Tensor& x, const char* who) {
  if (x.dim() != 4 || x.size(0) != 1) {
    throw ShapeError(std::string(who) + ": expected a single input (1, C, H, W), got " + shape_str(x.shape()));
  }
}

void require_square(const Tensor& x, const char* who) {
  if (x.size(2) != x.size(3)) throw ShapeError(std::string(who) + ": rotations need square images");
}

// d f_target / d x for every row of x, as (N, d).
Tensor class_gradient(const Classifier& f, const Tensor& x, std::size_t target) {
  FreezeParameters frozen;
  Tensor xin = x.detach().set_requires_grad(true);
  Tensor out = f(xin);
  const std::size_t n = x.size(0), k = out.numel() / n;
  if (target >= k) throw std::out_of_range("class index " + std::to_string(target) + " >= " + std::to_string(k));
  std::vector<double> pick(out.numel(), 0.0);
  for (std::size_t i = 0; i < n; ++i) pick[i * k + target] = 1.0;
  backward(ops::weighted_reduce(out, pick));
  Tensor g = xin.has_grad() ? xin.grad_tensor() : Tensor(x.shape(), 0.0);
  if (!g.all_finite()) throw NumericError("non-finite input gradient");
  return ops::reshape(g, {n, x.numel() / n});
}

std::size_t num_outputs(const Classifier& f, const Tensor& x) {
  FreezeParameters frozen;
  return f(x.detach()).numel() / x.size(0);
}

Tensor stack_rotations(const Tensor& x, int order) {
  std::vector<Tensor> parts;
  for (int r = 0; r < order; ++r) parts.push_back(ops::rot90(x, r));
  return ops::concat(parts, 0);
}

double row_l1_diff(const Tensor& a, const Tensor& b, std::size_t row) {
  const std::size_t d = a.size(1);
  auto ad = a.data().subspan(row * d, d), bd = b.data().subspan(row * d, d);
  double s = 0.0;
  for (std::size_t i = 0; i < d; ++i) s += std::abs(ad[i] - bd[i]);
  return s;
}

double l2(std::span<const double> v) {
  double s = 0.0;
  for (double a : v) s += a * a;
  return std::sqrt(s);
}

// Profile log-likelihood of z > 0 at the Weibull MLE, shape kept in [1, 200].
double weibull_profile(const std::vector<double>& z) {
  const double n = static_cast<double>(z.size());
  const double zmax = *std::max_element(z.begin(), z.end());
  std::vector<double> zn(z.size()), lz(z.size());
  double mean_log = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    zn[i] = z[i] / zmax;
    lz[i] = std::log(zn[i]);
    mean_log += lz[i] / n;
  }
  auto mean_pow = [&](double beta) {
    double s = 0.0;
    for (double v : zn) s += std::pow(v, beta);
    return s / n;
  };
  auto h = [&](double beta) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < zn.size(); ++i) {
      const double p = std::pow(zn[i], beta);
      num += p * lz[i];
      den += p;
    }
    return num / den - 1.0 / beta - mean_log;
  };
  double lo = 1.0, hi = 200.0, beta;
  if (h(lo) >= 0) beta = lo;
  else if (h(hi) <= 0) beta = hi;
  else {
    for (int it = 0; it < 100; ++it) {
      const double mid = 0.5 * (lo + hi);
      (h(mid) < 0 ? lo : hi) = mid;
    }
    beta = 0.5 * (lo + hi);
  }
  const double log_sigma = std::log(zmax) + std::log(mean_pow(beta)) / beta;
  double sum_log = 0.0;
  for (double v : z) sum_log += std::log(v);
  return n * std::log(beta) - n * beta * log_sigma + (beta - 1.0) * sum_log - n;
}

}  // namespace

double MarginValue::min_margin() const {
  return values.empty() ? 0.0 : *std::min_element(values.begin(), values.end());
}

MarginValue margins_from_logits(const std::vector<double>& logits, std::size_t sample) {
  if (logits.size() < 2) throw std::invalid_argument("margins: need at least two logits");
  for (double v : logits)
    if (!std::isfinite(v)) throw NumericError("margins: non-finite logit");
  MarginValue m;
  m.sample = sample;
  m.logits = logits;
  m.predicted = static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  for (std::size_t j = 0; j < logits.size(); ++j) {
    if (j == m.predicted) continue;
    m.competitors.push_back(j);
    m.values.push_back(logits[m.predicted] - logits[j]);
  }
  return m;
}

MarginValue margins(const Classifier& f, const Tensor& x, std::size_t sample) {
  require_single(x, "margins");
  Tensor z;
  {
    FreezeParameters frozen;
    z = f(x.detach());
  }
  return margins_from_logits({z.data().begin(), z.data().end()}, sample);
}

std::vector<Tensor> logit_gradients(const Classifier& f, const Tensor& x) {
  const std::size_t k = num_outputs(f, x);
  std::vector<Tensor> out;
  for (std::size_t j = 0; j < k; ++j) out.push_back(class_gradient(f, x, j));
  return out;
}

std::string to_string(Estimator e) { return e == Estimator::max_sample ? "max_sample" : "weibull_mle"; }

Estimator estimator_from_string(const std::string& s) {
  if (s == "max_sample") return Estimator::max_sample;
  if (s == "weibull_mle") return Estimator::weibull_mle;
  throw std::invalid_argument("unknown estimator '" + s + "' (known: max_sample, weibull_mle)");
}

void CertifyConfig::validate() const {
  if (!(radius > 0.0)) throw std::invalid_argument("certify: radius must be positive");
  if (batches == 0 || samples_per_batch == 0) throw std::invalid_argument("certify: batches and samples must be positive");
  if (q != 1) throw std::invalid_argument("certify: only q = 1 (l-infinity budgets) is supported");
}

double reverse_weibull_location(const std::vector<double>& maxima) {
  if (maxima.empty()) throw std::invalid_argument("reverse_weibull_location: no samples");
  const double ymax = *std::max_element(maxima.begin(), maxima.end());
  const double ymin = *std::min_element(maxima.begin(), maxima.end());
  std::vector<double> distinct = maxima;
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  if (distinct.size() < 3 || !(ymax > ymin)) return ymax;
  const double spread = ymax - ymin;
  auto loglik = [&](double t) {
    const double mu = ymax + spread * std::exp(t);
    std::vector<double> z(maxima.size());
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = mu - maxima[i];
    return weibull_profile(z);
  };
  // Coarse scan then golden-section refinement over log(mu - ymax).
  double best_t = -12.0, best = -std::numeric_limits<double>::infinity();
  for (int i = 0; i <= 56; ++i) {
    const double t = -12.0 + 0.25 * i;
    const double v = loglik(t);
    if (v > best) best = v, best_t = t;
  }
  double a = best_t - 0.25, b = best_t + 0.25;
  const double g = (std::sqrt(5.0) - 1.0) / 2.0;
  double c = b - g * (b - a), d = a + g * (b - a), fc = loglik(c), fd = loglik(d);
  for (int it = 0; it < 60; ++it) {
    if (fc > fd) {
      b = d, d = c, fd = fc;
      c = b - g * (b - a), fc = loglik(c);
    } else {
      a = c, c = d, fc = fd;
      d = a + g * (b - a), fd = loglik(d);
    }
  }
  return std::max(ymax, ymax + spread * std::exp(0.5 * (a + b)));
}

CleverScore clever_score(const Classifier& f, const Tensor& x, const CertifyConfig& cfg, std::size_t sample) {
  cfg.validate();
  require_single(x, "clever_score");
  const MarginValue m = margins(f, x, sample);
  const std::size_t nc = m.competitors.size(), d = x.numel(), ns = cfg.samples_per_batch;
  std::vector<double> global_max(nc, 0.0);
  std::vector<std::vector<double>> batch_max(nc, std::vector<double>(cfg.batches, 0.0));
  auto x0 = x.data();
  for (std::size_t b = 0; b < cfg.batches; ++b) {
    std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                      static_cast<std::uint32_t>(sample), static_cast<std::uint32_t>(b)};
    std::mt19937_64 rng(seq);
    std::uniform_real_distribution<double> u(-cfg.radius, cfg.radius);
    std::vector<double> pts(ns * d);
    for (std::size_t s = 0; s < ns; ++s)
      for (std::size_t i = 0; i < d; ++i) pts[s * d + i] = x0[i] + u(rng);
    Shape shape = x.shape();
    shape[0] = ns;
    const auto grads = logit_gradients(f, Tensor(shape, std::move(pts)));
    const Tensor& gc = grads[m.predicted];
    for (std::size_t i = 0; i < nc; ++i)
      for (std::size_t s = 0; s < ns; ++s) {
        const double norm = row_l1_diff(gc, grads[m.competitors[i]], s);
        batch_max[i][b] = std::max(batch_max[i][b], norm);
        global_max[i] = std::max(global_max[i], norm);
      }
  }

  CleverScore out;
  out.sample = sample;
  out.predicted = m.predicted;
  out.points = cfg.batches * ns;
  out.score = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < nc; ++i) {
    LipschitzEstimate e;
    e.competitor = m.competitors[i];
    e.margin = m.values[i];
    e.max_observed = global_max[i];
    e.lipschitz = cfg.estimator == Estimator::max_sample ? global_max[i] : reverse_weibull_location(batch_max[i]);
    if (e.margin <= 0.0) e.radius_bound = 0.0;
    else if (e.lipschitz == 0.0) e.radius_bound = std::numeric_limits<double>::infinity();
    else e.radius_bound = e.margin / e.lipschitz;
    out.score = std::min(out.score, e.radius_bound);
    out.per_class.push_back(e);
  }
  out.unbounded = std::isinf(out.score);
  return out;
}

OrbitNormTable orbit_gradient_norms(const Classifier& f, const Tensor& x) {
  require_single(x, "orbit_gradient_norms");
  require_square(x, "orbit_gradient_norms");
  const MarginValue m = margins(f, x);
  const auto grads = logit_gradients(f, stack_rotations(x, 4));
  OrbitNormTable t;
  t.predicted = m.predicted;
  t.competitors = m.competitors;
  for (std::size_t r = 0; r < 4; ++r) {
    std::vector<double> row;
    for (std::size_t j : m.competitors) row.push_back(row_l1_diff(grads[m.predicted], grads[j], r));
    t.norms.push_back(std::move(row));
  }
  for (std::size_t r = 1; r < 4; ++r)
    for (std::size_t i = 0; i < t.competitors.size(); ++i)
      t.max_deviation = std::max(t.max_deviation, std::abs(t.norms[r][i] - t.norms[0][i]));
  return t;
}

Theorem1Result theorem1_check(Model& model, const Tensor& x, double tolerance) {
  if (!model.is_rotation_invariant()) {
    throw std::invalid_argument("theorem1_check: model '" + to_string(model.spec().arch) +
                                "' is not fully rotation-equivariant with an invariant head; use the diagnostics "
                                "report instead");
  }
  Theorem1Result r;
  r.table = orbit_gradient_norms(attacks::classifier(model), x);
  r.tolerance = tolerance;
  r.passed = r.table.max_deviation <= tolerance;
  return r;
}

Tensor orbit_averaged_gradient(const Classifier& f, const Tensor& x, std::size_t j, int group_order) {
  require_single(x, "orbit_averaged_gradient");
  if (group_order != 1 && group_order != 4) throw std::invalid_argument("orbit_averaged_gradient: group order 1 or 4");
  if (group_order == 4) require_square(x, "orbit_averaged_gradient");
  const Tensor g = class_gradient(f, stack_rotations(x, group_order), j);
  const std::size_t d = x.numel();
  std::vector<double> acc(d, 0.0);
  for (int r = 0; r < group_order; ++r) {
    Tensor row(x.shape(), std::vector<double>(g.data().begin() + r * d, g.data().begin() + (r + 1) * d));
    Tensor aligned = ops::rot90(row, -r);
    for (std::size_t i = 0; i < d; ++i) acc[i] += aligned.at(i);
  }
  for (double& v : acc) v /= group_order;
  return Tensor(x.shape(), std::move(acc));
}

Tensor rotate_bilinear(const Tensor& x, double degrees) {
  if (x.dim() != 4) throw ShapeError("rotate_bilinear: expected (N, C, H, W), got " + shape_str(x.shape()));
  const std::size_t planes = x.size(0) * x.size(1), H = x.size(2), W = x.size(3);
  const double t = degrees * std::numbers::pi / 180.0, c = std::cos(t), s = std::sin(t);
  const double ci = (static_cast<double>(H) - 1) / 2, cj = (static_cast<double>(W) - 1) / 2;
  auto in = x.data();
  std::vector<double> out(x.numel(), 0.0);
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      // Inverse-rotate the output position (y up) to find its source.
      const double u = static_cast<double>(j) - cj, v = ci - static_cast<double>(i);
      const double us = c * u + s * v, vs = -s * u + c * v;
      const double si = ci - vs, sj = cj + us;
      const double fi = std::floor(si), fj = std::floor(sj);
      const double ai = si - fi, aj = sj - fj;
      for (int di = 0; di < 2; ++di)
        for (int dj = 0; dj < 2; ++dj) {
          const double w = (di ? ai : 1 - ai) * (dj ? aj : 1 - aj);
          const long ii = static_cast<long>(fi) + di, jj = static_cast<long>(fj) + dj;
          if (w == 0.0 || ii < 0 || jj < 0 || ii >= static_cast<long>(H) || jj >= static_cast<long>(W)) continue;
          for (std::size_t p = 0; p < planes; ++p)
            out[(p * H + i) * W + j] += w * in[(p * H + static_cast<std::size_t>(ii)) * W + static_cast<std::size_t>(jj)];
        }
    }
  return Tensor(x.shape(), std::move(out));
}

void SuppressionConfig::validate() const {
  if (trials < 10) throw std::invalid_argument("suppression_diagnostic: trials must be at least 10");
  if (!(angle_degrees > 0.0)) throw std::invalid_argument("suppression_diagnostic: angle must be positive");
  if (!(step >= 0.0)) throw std::invalid_argument("suppression_diagnostic: step must be non-negative");
}

SuppressionResult suppression_diagnostic(const Classifier& f, const Tensor& x, const SuppressionConfig& cfg,
                                         std::size_t target) {
  cfg.validate();
  require_single(x, "suppression_diagnostic");
  SuppressionResult res;
  res.target = target == static_cast<std::size_t>(-1) ? margins(f, x).predicted : target;
  const std::size_t d = x.numel();
  auto x0 = x.data();
  const Tensor rotated = rotate_bilinear(x, cfg.angle_degrees);
  std::vector<double> tangent(d);
  for (std::size_t i = 0; i < d; ++i) tangent[i] = rotated.at(i) - x0[i];
  res.tangent_norm = l2(tangent);
  if (res.tangent_norm < 1e-9) {
    throw std::invalid_argument("suppression_diagnostic: degenerate orbit tangent (|rot(x) - x| = " +
                                std::to_string(res.tangent_norm) + "); the input is rotationally symmetric");
  }
  for (double& v : tangent) v /= res.tangent_norm;
  if (cfg.step == 0.0) return res;

  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> pts(x0.begin(), x0.end());
  for (std::size_t i = 0; i < d; ++i) pts.push_back(x0[i] + cfg.step * tangent[i]);
  for (std::size_t t = 0; t < cfg.trials; ++t) {
    std::vector<double> v(d);
    for (double& a : v) a = gauss(rng);
    double dot = 0.0;
    for (std::size_t i = 0; i < d; ++i) dot += v[i] * tangent[i];
    for (std::size_t i = 0; i < d; ++i) v[i] -= dot * tangent[i];
    const double n = l2(v);
    for (std::size_t i = 0; i < d; ++i) pts.push_back(x0[i] + cfg.step * v[i] / n);
  }
  Shape shape = x.shape();
  shape[0] = 2 + cfg.trials;
  const Tensor g = class_gradient(f, Tensor(shape, std::move(pts)), res.target);
  auto gd = g.data();
  auto change = [&](std::size_t row) {
    double s = 0.0;
    for (std::size_t i = 0; i < d; ++i) s += (gd[row * d + i] - gd[i]) * (gd[row * d + i] - gd[i]);
    return std::sqrt(s);
  };
  res.on_orbit = change(1);
  for (std::size_t t = 0; t < cfg.trials; ++t) res.off_orbit += change(2 + t);
  res.off_orbit /= static_cast<double>(cfg.trials);
  if (res.on_orbit == 0.0) {
    res.ratio = res.off_orbit == 0.0 ? 1.0 : std::numeric_limits<double>::infinity();
  } else {
    res.ratio = res.off_orbit / res.on_orbit;
  }
  return res;
}

BisectionResult bisect_invariant(const std::function<bool(double)>& kept, double eps_hi, double tol) {
  if (!(eps_hi > 0.0 && eps_hi <= 1.0)) throw std::invalid_argument("bisection: eps_hi must be in (0, 1]");
  if (!(tol > 0.0)) throw std::invalid_argument("bisection: tol must be positive");
  BisectionResult r;
  auto probe = [&](double e) {
    const bool k = kept(e);
    r.trace.emplace_back(e, k);
    return k;
  };
  if (probe(eps_hi)) {
    r.epsilon = r.first_flip = eps_hi;
    return r;
  }
  double lo = 0.0, hi = eps_hi;
  while (hi - lo > tol) {
    const double mid = 0.5 * (lo + hi);
    (probe(mid) ? lo : hi) = mid;
  }
  r.epsilon = lo;
  r.first_flip = hi;
  r.flipped = true;
  // Spot checks below the bracket expose non-monotone attack success.
  for (double frac : {0.25, 0.5, 0.75}) {
    if (lo > 0.0 && !probe(lo * frac)) r.non_monotone = true;
  }
  return r;
}

BisectionResult max_invariant_perturbation(const Classifier& f, const Tensor& x, int y,
                                           const attacks::AttackConfig& attack, double eps_hi, double tol,
                                           std::size_t sample) {
  require_single(x, "max_invariant_perturbation");
  const std::vector<int> label{y};
  if (attacks::predict(f, x)[0] != y) {
    throw std::invalid_argument("max_invariant_perturbation: undefined for misclassified sample " +
                                std::to_string(sample));
  }
  auto kept = [&](double eps) {
    const Tensor adv = attacks::run_attack(f, x, label, attack.with_epsilon(eps), sample);
    return attacks::predict(f, adv)[0] == y;
  };
  return bisect_invariant(kept, eps_hi, tol);
}

double scale_gradient_variance(const Classifier& f, const Tensor& x, const std::vector<double>& factors) {
  require_single(x, "scale_gradient_variance");
  if (factors.empty()) throw std::invalid_argument("scale_gradient_variance: no factors");
  const std::size_t c = margins(f, x).predicted, H = x.size(2), W = x.size(3);
  std::vector<Tensor> parts;
  for (double a : factors) {
    const auto h = static_cast<std::size_t>(std::max(1L, std::lround(a * static_cast<double>(H))));
    const auto w = static_cast<std::size_t>(std::max(1L, std::lround(a * static_cast<double>(W))));
    parts.push_back(ops::resize(ops::resize(x, h, w, ops::Interp::bilinear), H, W, ops::Interp::bilinear));
  }
  const Tensor g = class_gradient(f, ops::concat(parts, 0), c);
  const std::size_t d = x.numel();
  std::vector<double> norms;
  for (std::size_t i = 0; i < factors.size(); ++i) norms.push_back(l2(g.data().subspan(i * d, d)));
  double mean = 0.0, var = 0.0;
  for (double v : norms) mean += v / static_cast<double>(norms.size());
  for (double v : norms) var += (v - mean) * (v - mean) / static_cast<double>(norms.size());
  return var;
}

}  // namespace equirobust::certify

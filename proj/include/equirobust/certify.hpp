#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "equirobust/attacks.hpp"
#include "equirobust/tensor.hpp"

namespace equirobust {

class Model;

namespace certify {

using attacks::Classifier;

struct MarginValue {
  std::size_t sample = 0;
  std::size_t predicted = 0;
  std::vector<double> logits;
  /// competitors[i] is the class j of values[i] = f_c - f_j; c itself is left out.
  std::vector<std::size_t> competitors;
  std::vector<double> values;
  double min_margin() const;
};

/// Margins of a single logit row. Ties at the top go to the lowest index.
MarginValue margins_from_logits(const std::vector<double>& logits, std::size_t sample = 0);
/// Margins of f at a single input (1, C, H, W).
MarginValue margins(const Classifier& f, const Tensor& x, std::size_t sample = 0);

/// Gradients of every logit of f at each row of x: result[j] is (N, d) with
/// row n = d f_j(x_n) / d x_n. Parameters are frozen.
std::vector<Tensor> logit_gradients(const Classifier& f, const Tensor& x);

enum class Estimator { max_sample, weibull_mle };
std::string to_string(Estimator e);
Estimator estimator_from_string(const std::string& s);

struct CertifyConfig {
  double radius = 0.3;
  std::size_t batches = 50;
  std::size_t samples_per_batch = 128;
  int q = 1;  // dual of the l-infinity budget; the only supported value
  Estimator estimator = Estimator::max_sample;
  std::uint64_t seed = 0;
  void validate() const;
};

struct LipschitzEstimate {
  std::size_t competitor = 0;
  double margin = 0.0;
  double lipschitz = 0.0;      // L-hat; 0 means the margin is locally constant
  double max_observed = 0.0;   // largest sampled gradient norm
  double radius_bound = 0.0;   // margin / L-hat, +inf when L-hat is 0
};

struct CleverScore {
  std::size_t sample = 0;
  std::size_t predicted = 0;
  double score = 0.0;     // min over competitors; +inf when unbounded
  bool unbounded = false; // every competitor had L-hat = 0
  std::vector<LipschitzEstimate> per_class;
  std::size_t points = 0;
};

/// Reverse-Weibull location fitted by maximum likelihood to per-batch
/// maxima, never below the largest observation. Degenerate inputs (fewer
/// than three distinct values) return the maximum.
double reverse_weibull_location(const std::vector<double>& maxima);

/// CLEVER-style radius at a single input (1, C, H, W). Points are drawn
/// uniformly from the l-infinity ball of the configured radius (no box
/// clipping); batch b of sample s uses seed (cfg.seed, s, b).
CleverScore clever_score(const Classifier& f, const Tensor& x, const CertifyConfig& cfg, std::size_t sample = 0);

/// l1 norms of grad g_{c,j} at r.x for r = 0..3; rows are rotations,
/// columns follow `competitors`. c is the prediction at x.
struct OrbitNormTable {
  std::size_t predicted = 0;
  std::vector<std::size_t> competitors;
  std::vector<std::vector<double>> norms;  // [rotation][competitor]
  double max_deviation = 0.0;             // max over r, j of |norm(r) - norm(0)|
};
OrbitNormTable orbit_gradient_norms(const Classifier& f, const Tensor& x);

struct Theorem1Result {
  OrbitNormTable table;
  double tolerance = 0.0;
  bool passed = false;
};

/// Orbit-invariance of margin-gradient norms. Refuses (std::invalid_argument)
/// models that are not fully rotation-equivariant with an invariant head.
Theorem1Result theorem1_check(Model& model, const Tensor& x, double tolerance = 1e-8);

/// (1/|G|) sum_r rot90(grad f_j(rot90(x, r)), -r) for the P4 group
/// (group_order 4) or the trivial group (group_order 1).
Tensor orbit_averaged_gradient(const Classifier& f, const Tensor& x, std::size_t j, int group_order = 4);

/// Rotates the spatial axes of (N, C, H, W) counter-clockwise by an
/// arbitrary angle about the centre, bilinear, zero outside the image.
Tensor rotate_bilinear(const Tensor& x, double degrees);

struct SuppressionConfig {
  double angle_degrees = 2.0;
  std::size_t trials = 10;
  double step = 0.1;  // h, along unit directions
  std::uint64_t seed = 0;
  void validate() const;
};

struct SuppressionResult {
  std::size_t target = 0;
  double on_orbit = 0.0;   // |grad f(x + h d_G) - grad f(x)|_2
  double off_orbit = 0.0;  // mean over trials of the same with d_perp
  double ratio = 1.0;      // off_orbit / on_orbit
  double tangent_norm = 0.0;
};

/// Compares gradient change along the approximate orbit tangent (small
/// bilinear rotation) with random orthogonal directions, for logit `target`
/// (the prediction at x when target is npos).
SuppressionResult suppression_diagnostic(const Classifier& f, const Tensor& x, const SuppressionConfig& cfg,
                                         std::size_t target = static_cast<std::size_t>(-1));

struct BisectionResult {
  double epsilon = 0.0;    // largest tested budget with the prediction kept
  double first_flip = 0.0; // smallest tested budget that flipped, or eps_hi if none
  bool flipped = false;    // some tested budget flipped
  bool non_monotone = false;
  std::vector<std::pair<double, bool>> trace;  // (budget, prediction kept)
};

/// Bisection over [0, eps_hi] on a "prediction kept" oracle, assumed
/// monotone. Stops when the bracket is narrower than tol.
BisectionResult bisect_invariant(const std::function<bool(double)>& kept, double eps_hi, double tol = 1.0 / 512);

/// Largest attack budget under which the prediction on x (1, C, H, W) stays
/// at label y. Throws std::invalid_argument for a misclassified sample.
BisectionResult max_invariant_perturbation(const Classifier& f, const Tensor& x, int y,
                                           const attacks::AttackConfig& attack, double eps_hi,
                                           double tol = 1.0 / 512, std::size_t sample = 0);

/// Variance across the scale factors of the gradient norm of the predicted
/// logit at x rescaled by each factor and resampled back to its size.
double scale_gradient_variance(const Classifier& f, const Tensor& x, const std::vector<double>& factors);

}  // namespace certify
}  // namespace equirobust

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "equirobust/data.hpp"
#include "equirobust/tensor.hpp"

namespace equirobust {

class Model;

namespace attacks {

/// Maps a (N, C, H, W) batch to (N, k) logits.
using Classifier = std::function<Tensor(const Tensor&)>;

/// Eval-mode forward of a model. The model must outlive the classifier;
/// eval forwards only read the model, so workers may share it.
Classifier classifier(Model& model);

enum class AttackKind { fgsm, pgd };
std::string to_string(AttackKind k);
AttackKind attack_from_string(const std::string& s);

struct AttackConfig {
  AttackKind kind = AttackKind::pgd;
  double epsilon = 0.03;  // l-infinity budget in pixel units
  int steps = 20;
  /// Absolute PGD step. When unset the step is step_ratio * epsilon.
  std::optional<double> step_size;
  double step_ratio = 0.125;
  bool random_start = true;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument on an out-of-range field.
  void validate() const;
  /// Non-fatal remarks, e.g. a step larger than the budget.
  std::vector<std::string> warnings() const;
  double alpha() const;
  int effective_steps() const { return kind == AttackKind::fgsm ? 1 : steps; }
  /// Copy with a different budget.
  AttackConfig with_epsilon(double eps) const;
  std::string describe() const;
};

/// Per-sample softmax cross-entropy of f(x) against y.
std::vector<double> cross_entropy(const Classifier& f, const Tensor& x, const std::vector<int>& y);

/// Gradient of the summed cross-entropy with respect to x. Parameters are
/// frozen for the duration. Throws NumericError on a non-finite gradient.
Tensor input_gradient(const Classifier& f, const Tensor& x, const std::vector<int>& y);

/// clip01(x + eps * sign(grad CE)), sign(0) = 0.
Tensor fgsm(const Classifier& f, const Tensor& x, const std::vector<int>& y, double epsilon);

/// Called with the iterate after the random start (step 0) and after every
/// update (steps 1..n).
using IterateObserver = std::function<void(int step, const Tensor& iterate)>;

/// Projected sign-gradient ascent inside the epsilon ball and the [0, 1]
/// box. Sample n of the batch draws its random start from seed
/// cfg.seed + first_index + n.
Tensor pgd(const Classifier& f, const Tensor& x, const std::vector<int>& y, const AttackConfig& cfg,
           std::size_t first_index = 0, const IterateObserver& observer = nullptr);

/// Dispatches on cfg.kind.
Tensor run_attack(const Classifier& f, const Tensor& x, const std::vector<int>& y, const AttackConfig& cfg,
                  std::size_t first_index = 0);

std::vector<int> predict(const Classifier& f, const Tensor& x);

struct AccuracyPoint {
  double epsilon = 0.0;
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

/// Accuracy under the attack for every budget in the grid (non-empty,
/// strictly ascending, within [0, 1]). A zero budget is clean accuracy.
/// Samples are processed in fixed chunks of `chunk` rows, spread over the
/// parallel_for workers.
std::vector<AccuracyPoint> adversarial_accuracy(const Classifier& f, const Dataset& ds, const AttackConfig& cfg,
                                                const std::vector<double>& epsilon_grid, std::size_t chunk = 50);

/// Attacks every row of the dataset in chunks and returns the perturbed images.
Tensor attack_dataset(const Classifier& f, const Dataset& ds, const AttackConfig& cfg, std::size_t chunk = 50);

/// Default budget sweep.
std::vector<double> default_epsilon_grid();

}  // namespace attacks
}  // namespace equirobust

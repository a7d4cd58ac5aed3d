#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "equirobust/attacks.hpp"
#include "equirobust/data.hpp"
#include "equirobust/model.hpp"

namespace equirobust::train {

enum class Optimizer { sgd_momentum, adam };
std::string to_string(Optimizer o);
Optimizer optimizer_from_string(const std::string& s);

enum class Schedule { constant, cosine };
std::string to_string(Schedule s);
Schedule schedule_from_string(const std::string& s);

/// PGD settings used for adversarial training by default.
attacks::AttackConfig default_adversarial_attack();

struct TrainConfig {
  Optimizer optimizer = Optimizer::sgd_momentum;
  double learning_rate = 0.05;
  Schedule schedule = Schedule::cosine;
  double momentum = 0.9;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch_size = 128;
  std::size_t epochs = 30;
  double weight_decay = 5e-4;  // applied to convolution and dense weights only
  std::vector<std::uint64_t> seeds{0};
  /// When set, every batch is replaced by its attacked copy before the update.
  std::optional<attacks::AttackConfig> adversarial;
  /// Checkpoint every n epochs into checkpoint_dir (0: final only). No files
  /// are written when checkpoint_dir is empty.
  std::size_t checkpoint_every = 0;
  std::filesystem::path checkpoint_dir;

  void validate() const;
  double learning_rate_at(std::size_t step, std::size_t total_steps) const;
  std::string describe() const;
};

struct EpochLog {
  std::size_t epoch = 0;
  double loss = 0.0;      // mean training loss over the epoch's batches
  double accuracy = 0.0;  // training accuracy over the epoch's batches
  double learning_rate = 0.0;
};

struct TrainResult {
  Model model;
  std::vector<EpochLog> log;
  double initial_loss = 0.0;  // eval-mode loss on the training set before the first update
  double final_loss = 0.0;    // same after training
  bool diverged = false;
  std::string message;
  std::filesystem::path checkpoint;  // last written checkpoint, if any
};

using EpochSink = std::function<void(const EpochLog&)>;

/// Trains a fresh model. `seed` replaces spec.seed for initialisation and
/// also drives the batch order. On a non-finite loss, training stops, the
/// model is restored to the end of the last finished epoch and the result is
/// marked diverged.
TrainResult train(ModelSpec spec, const Dataset& ds, const TrainConfig& cfg, std::uint64_t seed,
                  const EpochSink& sink = nullptr);

struct EvalResult {
  double accuracy = 0.0;
  double loss = 0.0;
  std::size_t count = 0;
};

/// Eval-mode accuracy and mean cross-entropy. Throws on an empty dataset.
EvalResult evaluate(const attacks::Classifier& f, const Dataset& ds, std::size_t batch = 256);
EvalResult evaluate(Model& model, const Dataset& ds, std::size_t batch = 256);

}  // namespace equirobust::train

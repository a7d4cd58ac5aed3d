#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "equirobust/attacks.hpp"
#include "equirobust/certify.hpp"
#include "equirobust/data.hpp"
#include "equirobust/model.hpp"
#include "equirobust/report.hpp"
#include "equirobust/train.hpp"

namespace equirobust::train {

struct NamedSpec {
  std::string label;
  ModelSpec spec;
};

/// Provenance shared by every row of one trained model.
struct Member {
  std::string label;
  std::string spec_digest;
  std::uint64_t seed = 0;
  std::string dataset_digest;  // evaluation data
};

/// Clean and attacked accuracy over the grid for every attack; one row per
/// (attack, epsilon). Attack seeds are offset by the member seed. When both
/// FGSM and PGD are present, budgets where PGD accuracy exceeds FGSM
/// accuracy are written as "flag" records.
std::vector<report::Row> attack_rows(Model& model, const Member& m, const Dataset& test,
                                     const std::vector<attacks::AttackConfig>& kinds,
                                     const std::vector<double>& epsilons, report::Writer* out);

/// Corrupt-then-attack accuracy; one row per (corruption, epsilon).
std::vector<report::Row> corruption_rows(Model& model, const Member& m, const Dataset& test,
                                         const std::vector<CorruptionSpec>& corruptions,
                                         const attacks::AttackConfig& attack, const std::vector<double>& epsilons,
                                         report::Writer* out);

/// CLEVER score of the first n test images, one "clever" record each, plus
/// a clever_median row.
std::vector<certify::CleverScore> clever_records(Model& model, const Member& m, const Dataset& test, std::size_t n,
                                                 const certify::CertifyConfig& cfg, report::Writer* out,
                                                 std::vector<report::Row>* rows = nullptr);

struct MatrixConfig {
  std::vector<NamedSpec> specs;
  TrainConfig train;
  std::vector<attacks::AttackConfig> attacks;  // budgets come from epsilons
  std::vector<double> epsilons;
  std::vector<CorruptionSpec> corruptions;
  attacks::AttackConfig corruption_attack;
  std::vector<double> corruption_epsilons;
  std::size_t clever_samples = 0;
  certify::CertifyConfig certify;
  /// Member checkpoints go to <root>/<label>/seed_<seed>/ when set.
  std::filesystem::path checkpoint_root;

  void validate() const;
};

struct MatrixResult {
  std::vector<report::Row> rows;
  std::vector<Member> members;  // completed members
  bool partial = false;
  std::string error;
};

/// Trains every (spec, seed) pair in order, then evaluates each model. The
/// first failing member (exception or diverged training) stops the matrix;
/// everything written so far stays in the report, followed by a status
/// record marked partial.
MatrixResult run_matrix(const MatrixConfig& cfg, const Dataset& train_set, const Dataset& test_set,
                        report::Writer* out = nullptr);

}  // namespace equirobust::train

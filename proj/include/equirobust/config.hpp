#pragma once

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "equirobust/attacks.hpp"
#include "equirobust/certify.hpp"
#include "equirobust/data.hpp"
#include "equirobust/matrix.hpp"
#include "equirobust/train.hpp"

namespace equirobust::config {

inline constexpr const char* kConfigSchema = "equirobust.config.v1";

/// A config problem at a 1-based line and column.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& source, std::size_t line, std::size_t column, const std::string& message);
  std::size_t line() const { return line_; }
  std::size_t column() const { return column_; }

 private:
  std::size_t line_, column_;
};

/// Grammar:
///
///   # comment                     (also after a value)
///   [section]  or  [section.name]
///   key = value
///   key = item, item, item       (lists)
///
/// Values are bare words, numbers, true/false, or "double quoted" strings.
/// Keys outside a section, unknown sections and unknown keys are errors.
struct Entry {
  std::string key;
  std::string value;  // trimmed, quotes removed
  bool quoted = false;
  std::size_t line = 0, key_column = 0, value_column = 0;
};

struct Section {
  std::string name;  // "model.wide" for [model.wide]
  std::size_t line = 0, column = 0;
  std::vector<Entry> entries;
};

std::vector<Section> parse_document(const std::string& text, const std::string& source = "<config>");

struct DataConfig {
  std::string source = "synthetic";  // synthetic | cifar
  SyntheticKind kind = SyntheticKind::oriented_bars;
  std::size_t n_train = 512;
  std::size_t n_test = 256;
  std::size_t image_size = 16;
  std::size_t num_classes = 4;
  std::size_t channels = 3;
  std::uint64_t seed = 0;
  std::size_t n_per_class = 500;    // cifar training subset per class
  std::size_t test_per_class = 100; // cifar test subset per class
};

struct DiagnoseConfig {
  std::size_t n_probe = 20;
  certify::SuppressionConfig suppression;
  double tolerance = 1e-8;
  std::vector<double> scale_factors{0.75, 1.0, 1.25};
};

struct RunConfig {
  std::string name = "run";
  std::filesystem::path out = "runs/run";
  std::size_t threads = 1;
  DataConfig data;
  std::vector<train::NamedSpec> models;
  train::TrainConfig train;

  std::vector<attacks::AttackConfig> attacks;  // one per kind
  std::vector<double> epsilons;
  std::size_t n_eval = 0;  // evaluation rows; 0 means the whole test split

  certify::CertifyConfig certify;
  std::size_t certify_samples = 10;
  attacks::AttackConfig invariant_attack;  // budget search of max-invariant perturbation
  double eps_hi = 0.25;
  double eps_tol = 1.0 / 512;

  DiagnoseConfig diagnose;

  std::vector<CorruptionSpec> corruptions;
  attacks::AttackConfig corruption_attack;
  std::vector<double> corruption_epsilons;

  std::optional<std::filesystem::path> checkpoint;

  /// Resolved form in the same grammar; parse(snapshot()) reproduces it.
  /// Without `with_out` the output directory is left out, so two runs that
  /// differ only in where they write have the same snapshot.
  std::string snapshot(bool with_out = true) const;
  train::MatrixConfig matrix() const;
};

/// Parses and validates a document. Throws ConfigError.
RunConfig parse(const std::string& text, const std::string& source = "<config>");
RunConfig load(const std::filesystem::path& path);

}  // namespace equirobust::config

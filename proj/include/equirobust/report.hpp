#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace equirobust::report {

using Json = nlohmann::json;

inline constexpr const char* kReportSchema = "equirobust.report.v1";
inline constexpr const char* kSummarySchema = "equirobust.summary.v1";
inline constexpr const char* kReportFile = "report.jsonl";
inline constexpr const char* kSummaryFile = "summary.csv";

/// One result row. Every row carries its full provenance.
struct Row {
  std::string model;        // label of the model spec
  std::string spec_digest;
  std::uint64_t seed = 0;
  std::string attack;       // "fgsm", "pgd" or "none"
  double epsilon = 0.0;
  std::string corruption = "none";
  int severity = 0;
  std::string metric = "accuracy";
  double value = 0.0;
  std::size_t count = 0;    // samples behind the value
  std::string dataset_digest;
  std::string attack_config;  // AttackConfig::describe() of the attack used

  bool operator==(const Row&) const = default;
};

Json to_json(const Row& r);
Row row_from_json(const Json& j);

/// Current UTC time as ISO-8601.
std::string utc_timestamp();

/// Appends records to a line-delimited report, flushing after every line.
/// Each record gets the schema string and a `kind`.
class Writer {
 public:
  explicit Writer(const std::filesystem::path& path);

  void write(const std::string& kind, Json record);
  void row(const Row& r);
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

/// Every record of a report file. Throws std::runtime_error naming the line
/// of a malformed record.
std::vector<Json> read_records(const std::filesystem::path& path);
std::vector<Row> rows(const std::vector<Json>& records);

/// Keys that vary between identical runs and are left out of digests.
bool is_volatile_key(const std::string& key);

/// SHA-256 over the records with volatile keys removed.
std::string report_digest(const std::filesystem::path& path);

struct SummaryEntry {
  std::string model, attack;
  double epsilon = 0.0;
  std::string corruption;
  int severity = 0;
  std::string metric;
  std::size_t seeds = 0;
  double mean = 0.0;
  std::optional<double> stddev;  // sample standard deviation; absent for one seed
};

/// Mean and standard deviation across seeds, grouped by
/// (model, attack, epsilon, corruption, severity, metric).
std::vector<SummaryEntry> summarize(const std::vector<Row>& rows);

/// Renders summary.csv and per-attack curve files into the run directory.
/// Throws std::runtime_error when there is no report or it has no rows.
/// Returns the written files.
std::vector<std::filesystem::path> render(const std::filesystem::path& run_dir);

/// RFC 4180 quoting when needed.
std::string csv_field(const std::string& s);
/// Shortest round-trip decimal form.
std::string format_double(double v);

}  // namespace equirobust::report

#include "equirobust/report.hpp"

#include <charconv>
#include <chrono>
#include <cmath>
#include <ctime>
#include <map>
#include <set>
#include <stdexcept>
#include <tuple>

#include "equirobust/digest.hpp"

namespace equirobust::report {

namespace fs = std::filesystem;

Json to_json(const Row& r) {
  return Json{{"model", r.model},
              {"spec_digest", r.spec_digest},
              {"seed", r.seed},
              {"attack", r.attack},
              {"epsilon", r.epsilon},
              {"corruption", r.corruption},
              {"severity", r.severity},
              {"metric", r.metric},
              {"value", r.value},
              {"count", r.count},
              {"dataset_digest", r.dataset_digest},
              {"attack_config", r.attack_config}};
}

Row row_from_json(const Json& j) {
  Row r;
  r.model = j.at("model").get<std::string>();
  r.spec_digest = j.value("spec_digest", "");
  r.seed = j.at("seed").get<std::uint64_t>();
  r.attack = j.at("attack").get<std::string>();
  r.epsilon = j.at("epsilon").get<double>();
  r.corruption = j.value("corruption", "none");
  r.severity = j.value("severity", 0);
  r.metric = j.at("metric").get<std::string>();
  r.value = j.at("value").get<double>();
  r.count = j.value("count", std::size_t{0});
  r.dataset_digest = j.value("dataset_digest", "");
  r.attack_config = j.value("attack_config", "");
  return r;
}

std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

Writer::Writer(const fs::path& path) : path_(path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  out_.open(path, std::ios::app);
  if (!out_) throw std::runtime_error("cannot open report " + path.string() + " for appending");
}

void Writer::write(const std::string& kind, Json record) {
  record["schema"] = kReportSchema;
  record["kind"] = kind;
  out_ << record.dump() << '\n';
  out_.flush();
  if (!out_) throw std::runtime_error("write to " + path_.string() + " failed");
}

void Writer::row(const Row& r) { write("row", to_json(r)); }

std::vector<Json> read_records(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read report " + path.string());
  std::vector<Json> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(Json::parse(line));
    } catch (const Json::parse_error& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(n) + ": malformed record: " + e.what());
    }
  }
  return out;
}

std::vector<Row> rows(const std::vector<Json>& records) {
  std::vector<Row> out;
  for (const auto& r : records) {
    if (r.value("kind", "") == "row") out.push_back(row_from_json(r));
  }
  return out;
}

bool is_volatile_key(const std::string& key) { return key == "timestamp" || key == "run_dir"; }

namespace {

void strip_volatile(Json& j) {
  if (j.is_object()) {
    for (auto it = j.begin(); it != j.end();) {
      if (is_volatile_key(it.key())) {
        it = j.erase(it);
      } else {
        strip_volatile(*it);
        ++it;
      }
    }
  } else if (j.is_array()) {
    for (auto& v : j) strip_volatile(v);
  }
}

}  // namespace

std::string report_digest(const fs::path& path) {
  Sha256 h;
  for (auto r : read_records(path)) {
    strip_volatile(r);
    h.update(r.dump());
    h.update(std::string_view("\n"));
  }
  return h.finish_hex();
}

std::vector<SummaryEntry> summarize(const std::vector<Row>& rows) {
  using Key = std::tuple<std::string, std::string, double, std::string, int, std::string>;
  std::map<Key, std::vector<double>> groups;
  for (const auto& r : rows) groups[{r.model, r.attack, r.epsilon, r.corruption, r.severity, r.metric}].push_back(r.value);
  std::vector<SummaryEntry> out;
  for (const auto& [k, v] : groups) {
    SummaryEntry e;
    std::tie(e.model, e.attack, e.epsilon, e.corruption, e.severity, e.metric) = k;
    e.seeds = v.size();
    double s = 0.0;
    for (double x : v) s += x;
    e.mean = s / static_cast<double>(v.size());
    if (v.size() > 1) {
      double ss = 0.0;
      for (double x : v) ss += (x - e.mean) * (x - e.mean);
      e.stddev = std::sqrt(ss / static_cast<double>(v.size() - 1));
    }
    out.push_back(e);
  }
  return out;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c;
  }
  return q + "\"";
}

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

namespace {

std::string opt(const std::optional<double>& v) { return v ? format_double(*v) : ""; }

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

}  // namespace

std::vector<fs::path> render(const fs::path& run_dir) {
  const fs::path report = run_dir / kReportFile;
  if (!fs::exists(report)) throw std::runtime_error("no " + std::string(kReportFile) + " in " + run_dir.string());
  const auto all = rows(read_records(report));
  if (all.empty()) throw std::runtime_error(report.string() + " has no result rows");
  const auto summary = summarize(all);
  std::vector<fs::path> written;

  std::string s = "# " + std::string(kSummarySchema) + "\nmodel,attack,epsilon,corruption,severity,metric,seeds,mean,std\n";
  for (const auto& e : summary) {
    s += csv_field(e.model) + "," + e.attack + "," + format_double(e.epsilon) + "," + e.corruption + "," +
         std::to_string(e.severity) + "," + e.metric + "," + std::to_string(e.seeds) + "," + format_double(e.mean) +
         "," + opt(e.stddev) + "\n";
  }
  written.push_back(run_dir / kSummaryFile);
  write_file(written.back(), s);

  // Accuracy-versus-budget curves on clean data, one file per attack.
  std::map<std::string, std::string> curves;
  // Corrupted accuracy: one line per (model, corruption, severity), budgets as columns.
  std::set<double> corr_eps;
  std::map<std::tuple<std::string, std::string, int, std::string>, std::map<double, double>> table;
  for (const auto& e : summary) {
    if (e.metric != "accuracy") continue;
    if (e.corruption == "none") {
      auto& c = curves[e.attack];
      if (c.empty()) c = "model,epsilon,seeds,mean,std\n";
      c += csv_field(e.model) + "," + format_double(e.epsilon) + "," + std::to_string(e.seeds) + "," +
           format_double(e.mean) + "," + opt(e.stddev) + "\n";
    } else {
      corr_eps.insert(e.epsilon);
      table[{e.model, e.corruption, e.severity, e.attack}][e.epsilon] = e.mean;
    }
  }
  for (const auto& [attack, text] : curves) {
    written.push_back(run_dir / ("curve_" + attack + ".csv"));
    write_file(written.back(), text);
  }
  if (!table.empty()) {
    std::string t = "model,corruption,severity,attack";
    for (double eps : corr_eps) t += ",eps=" + format_double(eps);
    t += "\n";
    for (const auto& [k, by_eps] : table) {
      t += csv_field(std::get<0>(k)) + "," + std::get<1>(k) + "," + std::to_string(std::get<2>(k)) + "," +
           std::get<3>(k);
      for (double eps : corr_eps) {
        auto it = by_eps.find(eps);
        t += "," + (it == by_eps.end() ? std::string() : format_double(it->second));
      }
      t += "\n";
    }
    written.push_back(run_dir / "corruption_table.csv");
    write_file(written.back(), t);
  }
  return written;
}

}  // namespace equirobust::report

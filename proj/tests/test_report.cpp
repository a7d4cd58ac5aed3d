#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "equirobust/report.hpp"

namespace fs = std::filesystem;
using namespace equirobust::report;

namespace {

Row make_row(const std::string& model, std::uint64_t seed, double eps, double value) {
  Row r;
  r.model = model;
  r.seed = seed;
  r.attack = "fgsm";
  r.epsilon = eps;
  r.value = value;
  r.count = 100;
  return r;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("equirobust_report_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST_CASE("rows survive a json round trip") {
  Row r = make_row("m", 3, 0.25, 0.5);
  r.corruption = "pixelate";
  r.severity = 2;
  r.attack_config = "fgsm eps=0.25";
  CHECK(row_from_json(Json::parse(to_json(r).dump())) == r);
}

TEST_CASE("summary statistics match a direct recomputation") {
  const std::vector<double> a{0.5, 0.75, 0.6}, b{0.1};
  std::vector<Row> rows;
  for (std::size_t s = 0; s < a.size(); ++s) rows.push_back(make_row("a", s, 0.03, a[s]));
  rows.push_back(make_row("b", 0, 0.03, b[0]));
  const auto sum = summarize(rows);
  REQUIRE(sum.size() == 2);
  const double mean = (0.5 + 0.75 + 0.6) / 3;
  const double var = ((0.5 - mean) * (0.5 - mean) + (0.75 - mean) * (0.75 - mean) + (0.6 - mean) * (0.6 - mean)) / 2;
  CHECK(sum[0].model == "a");
  CHECK(sum[0].seeds == 3);
  CHECK(sum[0].mean == doctest::Approx(mean).epsilon(1e-15));
  REQUIRE(sum[0].stddev);
  CHECK(*sum[0].stddev == doctest::Approx(std::sqrt(var)).epsilon(1e-15));
  // One seed: no standard deviation at all, not zero.
  CHECK_FALSE(sum[1].stddev.has_value());
}

TEST_CASE("digests ignore timestamps and run directories") {
  const fs::path d1 = fresh_dir("d1"), d2 = fresh_dir("d2");
  {
    Writer w1(d1 / kReportFile), w2(d2 / kReportFile);
    w1.write("metadata", {{"timestamp", "2020"}, {"run_dir", "/a"}, {"seeds", {1}}});
    w2.write("metadata", {{"timestamp", "2021"}, {"run_dir", "/b"}, {"seeds", {1}}});
    w1.row(make_row("m", 0, 0, 1));
    w2.row(make_row("m", 0, 0, 1));
  }
  CHECK(report_digest(d1 / kReportFile) == report_digest(d2 / kReportFile));
  {
    Writer w2(d2 / kReportFile);
    w2.row(make_row("m", 0, 0.1, 0.5));
  }
  CHECK(report_digest(d1 / kReportFile) != report_digest(d2 / kReportFile));
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST_CASE("malformed records name their line") {
  const fs::path d = fresh_dir("bad");
  std::ofstream(d / kReportFile) << "{\"kind\":\"row\"}\n{oops\n";
  try {
    read_records(d / kReportFile);
    FAIL("no error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find(":2:") != std::string::npos);
  }
  fs::remove_all(d);
}

TEST_CASE("render writes summary and curves and is idempotent") {
  const fs::path d = fresh_dir("render");
  CHECK_THROWS_AS(render(d), std::runtime_error);
  {
    Writer w(d / kReportFile);
    w.write("metadata", {{"timestamp", utc_timestamp()}});
    CHECK_THROWS_AS(render(d), std::runtime_error);
    for (std::uint64_t s = 0; s < 2; ++s) {
      w.row(make_row("m", s, 0.0, 0.9));
      w.row(make_row("m", s, 0.01, 0.5 + 0.1 * static_cast<double>(s)));
      Row c = make_row("m", s, 0.01, 0.25);
      c.corruption = "contrast";
      c.severity = 3;
      w.row(c);
    }
  }
  const auto files = render(d);
  CHECK(files.size() == 3);
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  std::vector<std::string> first;
  for (const auto& f : files) first.push_back(slurp(f));
  render(d);
  for (std::size_t i = 0; i < files.size(); ++i) CHECK(slurp(files[i]) == first[i]);
  CHECK(first[0].find("m,fgsm,0.01,none,0,accuracy,2,0.55,0.0707106781186547") != std::string::npos);
  CHECK(first[1].rfind("model,epsilon,seeds,mean,std\nm,0,2,0.9,0\nm,0.01,2,0.55,0.070710678118654", 0) == 0);
  CHECK(first[2] == "model,corruption,severity,attack,eps=0.01\nm,contrast,3,fgsm,0.25\n");
  fs::remove_all(d);
}

TEST_CASE("csv and number formatting") {
  CHECK(csv_field("plain") == "plain");
  CHECK(csv_field("a,b") == "\"a,b\"");
  CHECK(csv_field("say \"hi\"") == "\"say \"\"hi\"\"\"");
  CHECK(format_double(0.1) == "0.1");
  CHECK(format_double(1e-300) == "1e-300");
  CHECK(format_double(INFINITY) == "inf");
}

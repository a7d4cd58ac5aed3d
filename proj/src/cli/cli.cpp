#include "equirobust/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "equirobust/matrix.hpp"
#include "equirobust/parallel.hpp"
#include "equirobust/report.hpp"

namespace equirobust::cli {

namespace fs = std::filesystem;
using report::Json;

namespace {

constexpr std::uint64_t kTestSeedOffset = 0x5851F42D4C957F2Dull;

struct Options {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::string checkpoint;
  std::string run_dir;  // report only
};

// A trained model with the provenance its rows carry.
struct Loaded {
  std::string label;
  std::uint64_t seed = 0;
  Model model;
};

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  if (v.empty()) return std::nan("");
  return v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
}

class Run {
 public:
  Run(std::string command, const Options& opt, std::ostream& out, std::ostream& err)
      : command_(std::move(command)), out_(out), err_(err) {
    if (opt.config.empty()) throw UsageError("--config is required");
    cfg_ = config::load(opt.config);
    if (!opt.out.empty()) cfg_.out = opt.out;
    if (opt.seed) cfg_.train.seeds = {*opt.seed};
    if (opt.threads) {
      if (*opt.threads < 1) throw UsageError("--threads must be at least 1");
      cfg_.threads = *opt.threads;
    }
    if (!opt.checkpoint.empty()) cfg_.checkpoint = opt.checkpoint;
    set_num_threads(static_cast<int>(cfg_.threads));
  }

  config::RunConfig& cfg() { return cfg_; }
  fs::path report_path() const { return cfg_.out / report::kReportFile; }
  fs::path manifest_path() const { return cfg_.out / "checkpoints" / "manifest.json"; }

  // Creates the output directory, the resolved snapshot and the metadata record.
  report::Writer& start() {
    fs::create_directories(cfg_.out);
    {
      std::ofstream snap(cfg_.out / "config.resolved.ini");
      snap << cfg_.snapshot();
    }
    data_ = load_data(cfg_);
    if (!data_.warning.empty()) err_ << "warning: " << data_.warning << "\n";
    writer_.emplace(report_path());
    Json meta{{"command", command_},
              {"version", kVersion},
              {"config_schema", config::kConfigSchema},
              {"config", cfg_.snapshot(false)},
              {"seeds", cfg_.train.seeds},
              {"timestamp", report::utc_timestamp()},
              {"run_dir", fs::absolute(cfg_.out).string()},
              {"train_data", {{"digest", data_.train.digest()}, {"provenance", data_.train.provenance},
                              {"size", data_.train.size()}}},
              {"test_data", {{"digest", data_.test.digest()}, {"provenance", data_.test.provenance},
                             {"size", data_.test.size()}}},
              {"data_fallback", !data_.warning.empty()},
              {"notes",
               {"input resizing uses bilinear interpolation",
                "corrupted evaluation corrupts first, then attacks",
                "suppression tangent is a 2-degree bilinear rotation surrogate, an approximation for the discrete group",
                "attack configs (including PGD step count and step size) are recorded on every row"}}};
    writer_->write("metadata", meta);
    return *writer_;
  }

  const Splits& data() const { return data_; }

  Dataset eval_set() const {
    const std::size_t n = cfg_.n_eval ? std::min(cfg_.n_eval, data_.test.size()) : data_.test.size();
    return data_.test.slice(0, n);
  }

  // Models named by --checkpoint / [checkpoint] path, else the train manifest.
  std::vector<Loaded> models() const {
    std::vector<Loaded> out;
    if (cfg_.checkpoint) {
      Model m = Model::load(*cfg_.checkpoint);
      std::string label = to_string(m.spec().arch);
      for (const auto& named : cfg_.models) {
        ModelSpec s = named.spec;
        s.seed = m.spec().seed;
        if (s == m.spec()) label = named.label;
      }
      const auto seed = m.spec().seed;
      out.push_back({label, seed, std::move(m)});
      return out;
    }
    if (!fs::exists(manifest_path())) {
      throw UsageError("no checkpoints: pass --checkpoint, set [checkpoint] path, or run 'train' first (" +
                       manifest_path().string() + " not found)");
    }
    std::ifstream in(manifest_path());
    const Json j = Json::parse(in);
    for (const auto& m : j.at("members")) {
      const fs::path p = cfg_.out / "checkpoints" / m.at("path").get<std::string>();
      Model model = Model::load(p);
      if (model.digest() != m.at("checkpoint_digest").get<std::string>()) {
        throw std::runtime_error("checkpoint " + p.string() + " does not match its manifest digest");
      }
      out.push_back({m.at("model").get<std::string>(), m.at("seed").get<std::uint64_t>(), std::move(model)});
    }
    return out;
  }

  train::Member member(const Loaded& l, const Dataset& eval) const {
    return {l.label, l.model.spec().digest(), l.seed, eval.digest()};
  }

  std::ostream& log() { return err_; }
  std::ostream& out() { return out_; }

 private:
  std::string command_;
  std::ostream& out_;
  std::ostream& err_;
  config::RunConfig cfg_;
  Splits data_;
  std::optional<report::Writer> writer_;
};

void write_manifest(const fs::path& path, const Json& members) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << Json{{"schema", kManifestSchema}, {"members", members}}.dump(2) << "\n";
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

int cmd_train(Run& run) {
  auto& cfg = run.cfg();
  auto& w = run.start();
  Json members = Json::array();
  for (const auto& named : cfg.models) {
    for (std::uint64_t seed : cfg.train.seeds) {
      train::TrainConfig tc = cfg.train;
      const fs::path rel = fs::path(named.label) / ("seed_" + std::to_string(seed));
      tc.checkpoint_dir = cfg.out / "checkpoints" / rel;
      const auto t0 = std::chrono::steady_clock::now();
      auto tr = train::train(named.spec, run.data().train, tc, seed, [&](const train::EpochLog& e) {
        run.log() << named.label << " seed " << seed << " epoch " << e.epoch << " loss " << e.loss << " acc "
                  << e.accuracy << "\n";
      });
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      Json j{{"model", named.label},
             {"seed", seed},
             {"spec_digest", tr.model.spec().digest()},
             {"train_digest", run.data().train.digest()},
             {"config", tc.describe()},
             {"initial_loss", tr.initial_loss},
             {"final_loss", tr.final_loss},
             {"diverged", tr.diverged},
             {"checkpoint_digest", tr.model.digest()}};
      Json epochs = Json::array();
      for (const auto& e : tr.log) {
        epochs.push_back({{"epoch", e.epoch}, {"loss", e.loss}, {"accuracy", e.accuracy}, {"lr", e.learning_rate}});
      }
      j["epochs"] = epochs;
      w.write("train", j);
      if (tr.diverged) {
        run.log() << "error: " << named.label << " seed " << seed << ": " << tr.message << "; last good state in "
                  << tr.checkpoint.string() << "\n";
        return runtime_error;
      }
      members.push_back({{"model", named.label},
                         {"seed", seed},
                         {"path", (rel / tr.checkpoint.filename()).string()},
                         {"spec_digest", tr.model.spec().digest()},
                         {"checkpoint_digest", tr.model.digest()}});
      write_manifest(run.manifest_path(), members);
      run.out() << named.label << " seed " << seed << ": loss " << tr.initial_loss << " -> " << tr.final_loss
                << " (" << secs << " s), checkpoint " << tr.model.digest() << "\n";
    }
  }
  return ok;
}

int cmd_attack(Run& run) {
  auto& cfg = run.cfg();
  auto models = run.models();
  auto& w = run.start();
  const Dataset eval = run.eval_set();
  for (auto& m : models) {
    const auto rows = train::attack_rows(m.model, run.member(m, eval), eval, cfg.attacks, cfg.epsilons, &w);
    for (const auto& r : rows) {
      run.out() << r.model << " seed " << r.seed << " " << r.attack << " eps " << r.epsilon << ": " << r.value << "\n";
    }
  }
  return ok;
}

int cmd_corrupt_eval(Run& run) {
  auto& cfg = run.cfg();
  if (cfg.corruptions.empty()) throw UsageError("[corruption] lists no corruptions");
  if (cfg.corruption_epsilons.empty()) throw UsageError("[corruption] epsilons is empty");
  auto models = run.models();
  auto& w = run.start();
  const Dataset eval = run.eval_set();
  for (auto& m : models) {
    const auto rows = train::corruption_rows(m.model, run.member(m, eval), eval, cfg.corruptions,
                                             cfg.corruption_attack, cfg.corruption_epsilons, &w);
    for (const auto& r : rows) {
      run.out() << r.model << " seed " << r.seed << " " << r.corruption << "/" << r.severity << " eps " << r.epsilon
                << ": " << r.value << "\n";
    }
  }
  return ok;
}

int cmd_certify(Run& run) {
  auto& cfg = run.cfg();
  if (cfg.certify_samples == 0) throw UsageError("[certify] n_samples must be at least 1");
  auto models = run.models();
  auto& w = run.start();
  const Dataset& test = run.data().test;
  const std::size_t n = std::min(cfg.certify_samples, test.size());
  for (auto& m : models) {
    const auto member = run.member(m, test.slice(0, n));
    const auto f = attacks::classifier(m.model);
    std::vector<report::Row> rows;
    const auto scores = train::clever_records(m.model, member, test, n, cfg.certify, &w, &rows);

    attacks::AttackConfig atk = cfg.invariant_attack;
    atk.seed += m.seed;
    std::vector<std::optional<certify::BisectionResult>> found(n);
    parallel_for(n, [&](std::size_t i) {
      if (static_cast<int>(scores[i].predicted) != test.labels[i]) return;
      found[i] = certify::max_invariant_perturbation(f, test.batch(i, i + 1), test.labels[i], atk, cfg.eps_hi,
                                                     cfg.eps_tol, i);
    });
    std::vector<double> eps;
    std::size_t overshoot = 0, probed = 0, non_monotone = 0;
    for (std::size_t i = 0; i < n; ++i) {
      Json j{{"model", m.label}, {"seed", m.seed}, {"spec_digest", member.spec_digest}, {"sample", i},
             {"label", test.labels[i]}, {"attack", atk.describe()}, {"eps_hi", cfg.eps_hi}, {"tol", cfg.eps_tol}};
      if (!found[i]) {
        j["skipped"] = "misclassified";
        w.write("max_invariant", j);
        continue;
      }
      const auto& b = *found[i];
      const bool over = b.flipped && !scores[i].unbounded && b.first_flip < scores[i].score;
      ++probed;
      overshoot += over ? 1 : 0;
      non_monotone += b.non_monotone ? 1 : 0;
      eps.push_back(b.epsilon);
      j["epsilon"] = b.epsilon;
      j["first_flip"] = b.first_flip;
      j["flipped"] = b.flipped;
      j["non_monotone"] = b.non_monotone;
      j["clever_score"] = scores[i].unbounded ? Json(nullptr) : Json(scores[i].score);
      j["flip_below_clever"] = over;
      w.write("max_invariant", j);
    }
    if (probed > 0) {
      constexpr std::size_t kBins = 10;
      std::vector<std::size_t> hist(kBins, 0);
      for (double e : eps) hist[std::min(kBins - 1, static_cast<std::size_t>(e / cfg.eps_hi * kBins))]++;
      w.write("max_invariant_histogram", {{"model", m.label}, {"seed", m.seed}, {"bin_width", cfg.eps_hi / kBins},
                                          {"counts", hist}, {"non_monotone", non_monotone}});
      report::Row r;
      r.model = m.label;
      r.spec_digest = member.spec_digest;
      r.seed = m.seed;
      r.attack = attacks::to_string(atk.kind);
      r.metric = "max_invariant_median";
      r.value = median(eps);
      r.count = probed;
      r.dataset_digest = member.dataset_digest;
      r.attack_config = atk.describe();
      w.row(r);
      rows.push_back(r);
      r.metric = "flip_below_clever_rate";
      r.value = static_cast<double>(overshoot) / static_cast<double>(probed);
      w.row(r);
      rows.push_back(r);
    }
    for (const auto& r : rows) run.out() << r.model << " seed " << r.seed << " " << r.metric << ": " << r.value << "\n";
  }
  return ok;
}

int cmd_diagnose(Run& run) {
  auto& cfg = run.cfg();
  if (cfg.diagnose.n_probe == 0) throw UsageError("[diagnose] n_probe must be at least 1 (empty probe set)");
  auto models = run.models();
  auto& w = run.start();
  const std::size_t n = std::min(cfg.diagnose.n_probe, run.data().test.size());
  const Dataset probe = run.data().test.slice(0, n);
  for (auto& m : models) {
    const auto member = run.member(m, probe);
    const auto f = attacks::classifier(m.model);
    const bool equivariant = m.model.is_rotation_invariant();
    std::vector<certify::OrbitNormTable> tables(n);
    std::vector<certify::SuppressionResult> supp(n);
    std::vector<double> scale_var(n);
    parallel_for(n, [&](std::size_t i) {
      const Tensor x = probe.batch(i, i + 1);
      tables[i] = certify::orbit_gradient_norms(f, x);
      certify::SuppressionConfig sc = cfg.diagnose.suppression;
      sc.seed += i;
      supp[i] = certify::suppression_diagnostic(f, x, sc);
      scale_var[i] = certify::scale_gradient_variance(f, x, cfg.diagnose.scale_factors);
    });
    double worst = 0.0;
    std::size_t passed = 0;
    std::vector<double> ratios;
    for (std::size_t i = 0; i < n; ++i) {
      worst = std::max(worst, tables[i].max_deviation);
      const bool ok_row = tables[i].max_deviation <= cfg.diagnose.tolerance;
      passed += ok_row ? 1 : 0;
      Json j{{"model", m.label}, {"seed", m.seed}, {"spec_digest", member.spec_digest}, {"sample", i},
             {"predicted", tables[i].predicted}, {"max_deviation", tables[i].max_deviation},
             {"norms", tables[i].norms}};
      if (equivariant) {
        j["tolerance"] = cfg.diagnose.tolerance;
        j["passed"] = ok_row;
        w.write("theorem1", j);
      } else {
        j["asserted"] = false;
        w.write("orbit_norms", j);
      }
      ratios.push_back(supp[i].ratio);
      w.write("suppression", {{"model", m.label}, {"seed", m.seed}, {"sample", i}, {"target", supp[i].target},
                              {"on_orbit", supp[i].on_orbit}, {"off_orbit", supp[i].off_orbit},
                              {"ratio", std::isfinite(supp[i].ratio) ? Json(supp[i].ratio) : Json(nullptr)},
                              {"angle_degrees", cfg.diagnose.suppression.angle_degrees},
                              {"approximation", "bilinear rotation tangent"}});
      w.write("scale_gradient_variance",
              {{"model", m.label}, {"seed", m.seed}, {"sample", i}, {"variance", scale_var[i]},
               {"factors", cfg.diagnose.scale_factors}});
    }
    auto row = [&](const std::string& metric, double value) {
      report::Row r;
      r.model = m.label;
      r.spec_digest = member.spec_digest;
      r.seed = m.seed;
      r.attack = "none";
      r.metric = metric;
      r.value = value;
      r.count = n;
      r.dataset_digest = member.dataset_digest;
      w.row(r);
      run.out() << m.label << " seed " << m.seed << " " << metric << ": " << value << "\n";
    };
    row("orbit_norm_max_deviation", worst);
    const double med = median(ratios);
    if (std::isfinite(med)) row("suppression_ratio_median", med);
    double mean_var = 0.0;
    for (double v : scale_var) mean_var += v / static_cast<double>(n);
    row("scale_gradient_variance_mean", mean_var);
    if (equivariant) {
      run.out() << m.label << " seed " << m.seed << " theorem1: " << passed << "/" << n << " within "
                << cfg.diagnose.tolerance << "\n";
    }
  }
  return ok;
}

int cmd_run(Run& run) {
  auto& cfg = run.cfg();
  auto& w = run.start();
  auto mc = cfg.matrix();
  const auto res = train::run_matrix(mc, run.data().train, run.eval_set(), &w);
  report::render(cfg.out);
  run.out() << res.rows.size() << " rows from " << res.members.size() << " models\n";
  if (res.partial) {
    run.log() << "error: matrix stopped early (partial results kept): " << res.error << "\n";
    return runtime_error;
  }
  return ok;
}

int cmd_report(const Options& opt, std::ostream& out) {
  fs::path dir = opt.run_dir;
  if (dir.empty() && !opt.out.empty()) dir = opt.out;
  if (dir.empty() && !opt.config.empty()) dir = config::load(opt.config).out;
  if (dir.empty()) throw UsageError("report needs a run directory (positional, --out or --config)");
  if (!fs::is_directory(dir)) throw std::runtime_error("run directory " + dir.string() + " does not exist");
  for (const auto& p : report::render(dir)) out << p.string() << "\n";
  out << "report digest " << report::report_digest(dir / report::kReportFile) << "\n";
  return ok;
}

}  // namespace

Splits load_data(const config::RunConfig& cfg) {
  const auto& d = cfg.data;
  Splits s;
  if (d.source == "cifar") {
    const char* env = std::getenv("EQUIROBUST_DATA");
    if (env && *env) {
      const fs::path dir(env);
      std::vector<fs::path> train_files;
      for (int i = 1; i <= 5; ++i) train_files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
      for (const auto& p : train_files) {
        if (!fs::exists(p)) throw std::runtime_error("EQUIROBUST_DATA: missing " + p.string());
      }
      Dataset train = load_cifar_binary(train_files);
      Dataset test = load_cifar_binary({dir / "test_batch.bin"});
      s.train = subsample(train, d.n_per_class, d.seed);
      s.test = subsample(test, d.test_per_class, d.seed + 1);
      s.train.split = "train";
      s.test.split = "test";
      return s;
    }
    s.warning = "EQUIROBUST_DATA is not set; using synthetic " + to_string(d.kind) + " data instead of CIFAR-10";
  }
  s.train = make_synthetic(d.kind, d.n_train, d.image_size, d.num_classes, d.seed, d.channels);
  s.test = make_synthetic(d.kind, d.n_test, d.image_size, d.num_classes, d.seed + kTestSeedOffset, d.channels);
  s.train.split = "train";
  s.test.split = "test";
  return s;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Rotation- and scale-equivariant CNN robustness toolkit", "equirobust"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);
  Options opt;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config, "Run config file")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", opt.out, "Output directory (overrides [run] out)");
    sub->add_option("--seed", opt.seed, "Single seed (overrides [run] seeds)");
    sub->add_option("--threads", opt.threads, "Worker thread cap");
    sub->add_option("--checkpoint", opt.checkpoint, "Checkpoint to evaluate instead of the train manifest");
  };
  auto* train_cmd = app.add_subcommand("train", "Train every model and seed; write checkpoints and logs");
  auto* attack_cmd = app.add_subcommand("attack", "Clean and adversarial accuracy over the epsilon grid");
  auto* certify_cmd = app.add_subcommand("certify", "CLEVER scores and maximum invariant perturbations");
  auto* diagnose_cmd = app.add_subcommand("diagnose", "Orbit gradient norms, suppression ratios, scale variance");
  auto* corrupt_cmd = app.add_subcommand("corrupt-eval", "Accuracy on corrupted inputs under attack");
  auto* run_cmd = app.add_subcommand("run", "Full matrix: train, attack, corruptions, CLEVER, summary");
  for (auto* s : {train_cmd, attack_cmd, certify_cmd, diagnose_cmd, corrupt_cmd, run_cmd}) common(s);
  auto* report_cmd = app.add_subcommand("report", "Render summary tables from a run directory");
  report_cmd->add_option("run_dir", opt.run_dir, "Run directory");
  report_cmd->add_option("--config", opt.config, "Run config; its [run] out is the run directory")
      ->check(CLI::ExistingFile);
  report_cmd->add_option("--out", opt.out, "Run directory");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? ok : usage_error;
  }

  try {
    if (report_cmd->parsed()) return cmd_report(opt, out);
    CLI::App* sub = app.get_subcommands().front();
    Run r(sub->get_name(), opt, out, err);
    if (sub == train_cmd) return cmd_train(r);
    if (sub == attack_cmd) return cmd_attack(r);
    if (sub == certify_cmd) return cmd_certify(r);
    if (sub == diagnose_cmd) return cmd_diagnose(r);
    if (sub == corrupt_cmd) return cmd_corrupt_eval(r);
    return cmd_run(r);
  } catch (const config::ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return usage_error;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return usage_error;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return runtime_error;
  }
}

int main(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args, std::cout, std::cerr);
}

}  // namespace equirobust::cli

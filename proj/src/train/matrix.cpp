#include "equirobust/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

#include "equirobust/parallel.hpp"

namespace equirobust::train {

namespace {

report::Row base_row(const Member& m) {
  report::Row r;
  r.model = m.label;
  r.spec_digest = m.spec_digest;
  r.seed = m.seed;
  r.dataset_digest = m.dataset_digest;
  return r;
}

report::Json member_json(const Member& m) {
  return {{"model", m.label}, {"spec_digest", m.spec_digest}, {"seed", m.seed}, {"dataset_digest", m.dataset_digest}};
}

attacks::AttackConfig seeded(attacks::AttackConfig a, std::uint64_t seed) {
  a.seed += seed;
  return a;
}

}  // namespace

std::vector<report::Row> attack_rows(Model& model, const Member& m, const Dataset& test,
                                     const std::vector<attacks::AttackConfig>& kinds,
                                     const std::vector<double>& epsilons, report::Writer* out) {
  const auto f = attacks::classifier(model);
  std::vector<report::Row> rows;
  std::map<attacks::AttackKind, std::vector<attacks::AccuracyPoint>> curves;
  for (const auto& kind : kinds) {
    const auto cfg = seeded(kind, m.seed);
    const auto points = attacks::adversarial_accuracy(f, test, cfg, epsilons);
    curves[cfg.kind] = points;
    for (const auto& p : points) {
      report::Row r = base_row(m);
      r.attack = attacks::to_string(cfg.kind);
      r.epsilon = p.epsilon;
      r.value = p.accuracy();
      r.count = p.total;
      r.attack_config = cfg.with_epsilon(p.epsilon).describe();
      if (out) out->row(r);
      rows.push_back(r);
    }
  }
  if (out && curves.count(attacks::AttackKind::fgsm) && curves.count(attacks::AttackKind::pgd)) {
    const auto& a = curves[attacks::AttackKind::fgsm];
    const auto& b = curves[attacks::AttackKind::pgd];
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (b[i].correct > a[i].correct) {
        auto j = member_json(m);
        j["check"] = "pgd_le_fgsm";
        j["epsilon"] = a[i].epsilon;
        j["fgsm"] = a[i].accuracy();
        j["pgd"] = b[i].accuracy();
        out->write("flag", j);
      }
    }
  }
  return rows;
}

std::vector<report::Row> corruption_rows(Model& model, const Member& m, const Dataset& test,
                                         const std::vector<CorruptionSpec>& corruptions,
                                         const attacks::AttackConfig& attack, const std::vector<double>& epsilons,
                                         report::Writer* out) {
  const auto f = attacks::classifier(model);
  const auto cfg = seeded(attack, m.seed);
  std::vector<report::Row> rows;
  for (const auto& spec : corruptions) {
    const Dataset bad = corrupt(test, spec);
    for (const auto& p : attacks::adversarial_accuracy(f, bad, cfg, epsilons)) {
      report::Row r = base_row(m);
      r.dataset_digest = bad.digest();
      r.attack = attacks::to_string(cfg.kind);
      r.epsilon = p.epsilon;
      r.corruption = to_string(spec.kind);
      r.severity = spec.severity;
      r.value = p.accuracy();
      r.count = p.total;
      r.attack_config = cfg.with_epsilon(p.epsilon).describe();
      if (out) out->row(r);
      rows.push_back(r);
    }
  }
  return rows;
}

std::vector<certify::CleverScore> clever_records(Model& model, const Member& m, const Dataset& test, std::size_t n,
                                                 const certify::CertifyConfig& cfg, report::Writer* out,
                                                 std::vector<report::Row>* rows) {
  if (n == 0) throw std::invalid_argument("certify: n_samples must be at least 1");
  n = std::min(n, test.size());
  const auto f = attacks::classifier(model);
  std::vector<certify::CleverScore> scores(n);
  parallel_for(n, [&](std::size_t i) { scores[i] = certify::clever_score(f, test.batch(i, i + 1), cfg, i); });
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = scores[i];
    if (out) {
      auto j = member_json(m);
      j["sample"] = i;
      j["label"] = test.labels[i];
      j["predicted"] = s.predicted;
      j["unbounded"] = s.unbounded;
      j["score"] = s.unbounded ? report::Json(nullptr) : report::Json(s.score);
      j["estimator"] = certify::to_string(cfg.estimator);
      j["radius"] = cfg.radius;
      j["points"] = s.points;
      out->write("clever", j);
    }
  }
  std::vector<double> v;
  for (const auto& s : scores) v.push_back(s.score);
  std::sort(v.begin(), v.end());
  const double median = v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
  if (std::isfinite(median)) {
    report::Row r = base_row(m);
    r.attack = "none";
    r.metric = "clever_median";
    r.value = median;
    r.count = n;
    if (out) out->row(r);
    if (rows) rows->push_back(r);
  }
  return scores;
}

void MatrixConfig::validate() const {
  if (specs.empty()) throw std::invalid_argument("matrix: no model specs");
  for (const auto& s : specs) {
    s.spec.validate();
    if (s.spec.num_classes != specs.front().spec.num_classes) {
      throw std::invalid_argument("matrix: specs disagree on num_classes");
    }
  }
  train.validate();
  for (const auto& a : attacks) a.validate();
  if (!attacks.empty() && epsilons.empty()) throw std::invalid_argument("matrix: empty epsilon grid");
  if (!corruptions.empty()) {
    corruption_attack.validate();
    if (corruption_epsilons.empty()) throw std::invalid_argument("matrix: empty corruption epsilon list");
  }
  if (clever_samples > 0) certify.validate();
}

MatrixResult run_matrix(const MatrixConfig& cfg, const Dataset& train_set, const Dataset& test_set,
                        report::Writer* out) {
  cfg.validate();
  MatrixResult res;
  std::size_t done = 0;
  try {
    for (const auto& named : cfg.specs) {
      for (std::uint64_t seed : cfg.train.seeds) {
        TrainConfig tc = cfg.train;
        if (!cfg.checkpoint_root.empty()) {
          tc.checkpoint_dir = cfg.checkpoint_root / named.label / ("seed_" + std::to_string(seed));
        }
        auto tr = train(named.spec, train_set, tc, seed);
        Member m{named.label, tr.model.spec().digest(), seed, test_set.digest()};
        if (out) {
          auto j = member_json(m);
          j["train_digest"] = train_set.digest();
          j["config"] = tc.describe();
          j["initial_loss"] = tr.initial_loss;
          j["final_loss"] = tr.final_loss;
          j["diverged"] = tr.diverged;
          j["checkpoint_digest"] = tr.model.digest();
          auto epochs = report::Json::array();
          for (const auto& e : tr.log) {
            epochs.push_back({{"epoch", e.epoch}, {"loss", e.loss}, {"accuracy", e.accuracy}, {"lr", e.learning_rate}});
          }
          j["epochs"] = epochs;
          out->write("train", j);
        }
        if (tr.diverged) throw std::runtime_error(named.label + " seed " + std::to_string(seed) + ": " + tr.message);

        auto rows = attack_rows(tr.model, m, test_set, cfg.attacks, cfg.epsilons, out);
        auto more = corruption_rows(tr.model, m, test_set, cfg.corruptions, cfg.corruption_attack,
                                    cfg.corruption_epsilons, out);
        rows.insert(rows.end(), more.begin(), more.end());
        if (cfg.clever_samples > 0) clever_records(tr.model, m, test_set, cfg.clever_samples, cfg.certify, out, &rows);
        res.rows.insert(res.rows.end(), rows.begin(), rows.end());
        res.members.push_back(m);
        ++done;
      }
    }
  } catch (const std::exception& e) {
    res.partial = true;
    res.error = e.what();
  }
  if (out) {
    report::Json j{{"partial", res.partial}, {"members_completed", done},
                   {"members_total", cfg.specs.size() * cfg.train.seeds.size()}};
    if (res.partial) j["error"] = res.error;
    out->write("status", j);
  }
  return res;
}

}  // namespace equirobust::train

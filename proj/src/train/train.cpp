#include "equirobust/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "equirobust/ops.hpp"

namespace equirobust::train {

namespace {

std::uint64_t epoch_seed(std::uint64_t seed, std::size_t epoch) {
  return seed ^ (0x9E3779B97F4A7C15ull * (static_cast<std::uint64_t>(epoch) + 1));
}

struct Snapshot {
  std::vector<std::vector<double>> params, buffers;

  void take(const Model& m) {
    params.clear();
    buffers.clear();
    for (const auto& p : m.params()) params.emplace_back(p.value.data().begin(), p.value.data().end());
    for (const auto& b : m.buffers()) buffers.emplace_back(b.value.data().begin(), b.value.data().end());
  }
  void restore(Model& m) const {
    for (std::size_t i = 0; i < params.size(); ++i) std::ranges::copy(params[i], m.params()[i].value.mutable_data().begin());
    for (std::size_t i = 0; i < buffers.size(); ++i) std::ranges::copy(buffers[i], m.buffers()[i].value.mutable_data().begin());
  }
};

class Updater {
 public:
  Updater(const TrainConfig& cfg, const std::vector<nn::Param>& params) : cfg_(cfg) {
    for (const auto& p : params) {
      m_.emplace_back(p.value.numel(), 0.0);
      if (cfg.optimizer == Optimizer::adam) v_.emplace_back(p.value.numel(), 0.0);
    }
  }

  void step(std::vector<nn::Param>& params, double lr) {
    ++t_;
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto& p = params[k];
      if (!p.value.has_grad()) continue;
      auto w = p.value.mutable_data();
      auto g = p.value.grad();
      const double wd = p.role == nn::ParamRole::weight ? cfg_.weight_decay : 0.0;
      auto& m = m_[k];
      if (cfg_.optimizer == Optimizer::sgd_momentum) {
        for (std::size_t i = 0; i < w.size(); ++i) {
          m[i] = cfg_.momentum * m[i] + g[i] + wd * w[i];
          w[i] -= lr * m[i];
        }
      } else {
        auto& v = v_[k];
        const double b1 = cfg_.adam_beta1, b2 = cfg_.adam_beta2;
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
        for (std::size_t i = 0; i < w.size(); ++i) {
          const double gi = g[i] + wd * w[i];
          m[i] = b1 * m[i] + (1 - b1) * gi;
          v[i] = b2 * v[i] + (1 - b2) * gi * gi;
          w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.adam_eps);
        }
      }
    }
  }

 private:
  const TrainConfig& cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace

std::string to_string(Optimizer o) { return o == Optimizer::sgd_momentum ? "sgd_momentum" : "adam"; }

Optimizer optimizer_from_string(const std::string& s) {
  if (s == "sgd_momentum" || s == "sgd") return Optimizer::sgd_momentum;
  if (s == "adam") return Optimizer::adam;
  throw std::invalid_argument("unknown optimizer '" + s + "' (known: sgd_momentum, adam)");
}

std::string to_string(Schedule s) { return s == Schedule::constant ? "constant" : "cosine"; }

Schedule schedule_from_string(const std::string& s) {
  if (s == "constant") return Schedule::constant;
  if (s == "cosine") return Schedule::cosine;
  throw std::invalid_argument("unknown schedule '" + s + "' (known: constant, cosine)");
}

attacks::AttackConfig default_adversarial_attack() {
  attacks::AttackConfig a;
  a.kind = attacks::AttackKind::pgd;
  a.epsilon = 0.03;
  a.steps = 7;
  a.step_ratio = 0.25;
  a.random_start = true;
  return a;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("train: epochs must be at least 1");
  if (batch_size < 1) throw std::invalid_argument("train: batch_size must be at least 1");
  if (seeds.empty()) throw std::invalid_argument("train: at least one seed is required");
  if (!(learning_rate >= 0.0)) throw std::invalid_argument("train: learning rate must be non-negative");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("train: weight decay must be non-negative");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("train: momentum must be in [0, 1)");
  if (adversarial) adversarial->validate();
}

double TrainConfig::learning_rate_at(std::size_t step, std::size_t total_steps) const {
  if (schedule == Schedule::constant || total_steps == 0) return learning_rate;
  const double t = static_cast<double>(step) / static_cast<double>(total_steps);
  return learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

std::string TrainConfig::describe() const {
  std::ostringstream os;
  os << to_string(optimizer) << " lr=" << learning_rate << " " << to_string(schedule) << " batch=" << batch_size
     << " epochs=" << epochs << " wd=" << weight_decay;
  if (optimizer == Optimizer::sgd_momentum) os << " momentum=" << momentum;
  if (adversarial) os << " adversarial=(" << adversarial->describe() << ")";
  return os.str();
}

EvalResult evaluate(const attacks::Classifier& f, const Dataset& ds, std::size_t batch) {
  if (ds.size() == 0) throw std::invalid_argument("evaluate: empty dataset");
  batch = std::max<std::size_t>(batch, 1);
  EvalResult r;
  r.count = ds.size();
  std::size_t correct = 0;
  for (std::size_t b = 0; b < ds.size(); b += batch) {
    const std::size_t e = std::min(ds.size(), b + batch);
    const auto y = ds.batch_labels(b, e);
    const auto pred = attacks::predict(f, ds.batch(b, e));
    const auto ce = attacks::cross_entropy(f, ds.batch(b, e), y);
    for (std::size_t i = 0; i < y.size(); ++i) {
      correct += pred[i] == y[i] ? 1 : 0;
      r.loss += ce[i];
    }
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(ds.size());
  r.loss /= static_cast<double>(ds.size());
  return r;
}

EvalResult evaluate(Model& model, const Dataset& ds, std::size_t batch) {
  return evaluate(attacks::classifier(model), ds, batch);
}

TrainResult train(ModelSpec spec, const Dataset& ds, const TrainConfig& cfg, std::uint64_t seed,
                  const EpochSink& sink) {
  cfg.validate();
  ds.validate();
  if (ds.num_classes != spec.num_classes) {
    throw std::invalid_argument("train: dataset has " + std::to_string(ds.num_classes) + " classes, model expects " +
                                std::to_string(spec.num_classes));
  }
  spec.seed = seed;
  TrainResult res{Model(spec), {}, 0.0, 0.0, false, {}, {}};
  Model& model = res.model;
  res.initial_loss = evaluate(model, ds).loss;

  const std::size_t n = ds.size();
  const std::size_t per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total = per_epoch * cfg.epochs;
  Updater updater(cfg, model.params());
  Snapshot good;
  good.take(model);
  if (!cfg.checkpoint_dir.empty()) std::filesystem::create_directories(cfg.checkpoint_dir);

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs && !res.diverged; ++epoch) {
    const auto order = shuffled_indices(n, epoch_seed(seed, epoch));
    EpochLog log;
    log.epoch = epoch + 1;
    std::size_t correct = 0;
    for (std::size_t b = 0; b < n; b += cfg.batch_size) {
      const std::vector<std::size_t> rows(order.begin() + static_cast<long>(b),
                                          order.begin() + static_cast<long>(std::min(n, b + cfg.batch_size)));
      const Dataset part = ds.select(rows);
      Tensor x = part.images;
      if (cfg.adversarial) {
        attacks::AttackConfig a = *cfg.adversarial;
        a.seed = seed;
        x = attacks::run_attack(attacks::classifier(model), x, part.labels, a, epoch * n + b);
      }
      const double lr = cfg.learning_rate_at(step++, total);
      log.learning_rate = lr;
      try {
        for (auto& p : model.params()) p.value.zero_grad();
        Tensor logits = model.forward(x, nn::Mode::train);
        Tensor loss = ops::softmax_cross_entropy(logits, part.labels);
        if (!std::isfinite(loss.item())) throw NumericError("non-finite training loss");
        const std::size_t k = spec.num_classes;
        for (std::size_t i = 0; i < rows.size(); ++i) {
          auto row = logits.data().subspan(i * k, k);
          const auto arg = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
          correct += arg == part.labels[i] ? 1 : 0;
        }
        log.loss += loss.item() * static_cast<double>(rows.size());
        backward(loss);
        updater.step(model.params(), lr);
      } catch (const NumericError& e) {
        res.diverged = true;
        res.message = "diverged in epoch " + std::to_string(epoch + 1) + ": " + e.what();
        break;
      }
    }
    if (res.diverged) break;
    log.loss /= static_cast<double>(n);
    log.accuracy = static_cast<double>(correct) / static_cast<double>(n);
    res.log.push_back(log);
    if (sink) sink(log);
    good.take(model);
    if (!cfg.checkpoint_dir.empty() && cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0) {
      res.checkpoint = cfg.checkpoint_dir / ("epoch_" + std::to_string(epoch + 1) + ".ckpt");
      model.save(res.checkpoint);
    }
  }

  if (res.diverged) {
    good.restore(model);
    if (!cfg.checkpoint_dir.empty()) {
      res.checkpoint = cfg.checkpoint_dir / "last_good.ckpt";
      model.save(res.checkpoint);
    }
    return res;
  }
  res.final_loss = evaluate(model, ds).loss;
  if (!cfg.checkpoint_dir.empty()) {
    res.checkpoint = cfg.checkpoint_dir / "final.ckpt";
    model.save(res.checkpoint);
  }
  return res;
}

}  // namespace equirobust::train

#include <cmath>
#include <random>

#include "doctest.h"
#include "equirobust/attacks.hpp"
#include "equirobust/model.hpp"
#include "equirobust/parallel.hpp"
#include "support.hpp"

using namespace equirobust;
using namespace equirobust::attacks;
using testing_support::linear_classifier;
using testing_support::max_abs_diff;
using testing_support::uniform;

namespace {

ModelSpec tiny_cnn() {
  ModelSpec s;
  s.arch = Architecture::baseline;
  s.num_classes = 4;
  s.image_size = 8;
  s.channel_plan = {4, 8, 8, 8};
  s.seed = 5;
  return s;
}

// Two logits (0, w.x + b) on (N, 1, 2, 2) inputs.
Classifier binary_linear(const std::vector<double>& w, double b) {
  std::vector<double> rows(8, 0.0);
  std::copy(w.begin(), w.end(), rows.begin() + 4);
  return linear_classifier(Tensor({2, 4}, rows), Tensor({2}, std::vector<double>{0.0, b}));
}

Dataset as_dataset(const Tensor& x, const std::vector<int>& y, std::size_t k) {
  Dataset ds;
  ds.images = x;
  ds.labels = y;
  ds.num_classes = k;
  return ds;
}

void check_feasible(const Tensor& adv, const Tensor& x, double eps) {
  for (std::size_t i = 0; i < x.numel(); ++i) {
    CHECK(std::abs(adv.at(i) - x.at(i)) <= eps);
    CHECK(adv.at(i) >= 0.0);
    CHECK(adv.at(i) <= 1.0);
  }
}

}  // namespace

TEST_CASE("zero budget leaves the input unchanged") {
  std::mt19937_64 rng(1);
  Model m(tiny_cnn());
  auto f = classifier(m);
  auto x = uniform({3, 3, 8, 8}, rng);
  std::vector<int> y{0, 1, 2};
  CHECK(max_abs_diff(fgsm(f, x, y, 0.0), x) == 0.0);
  AttackConfig cfg;
  cfg.epsilon = 0.0;
  CHECK(max_abs_diff(pgd(f, x, y, cfg), x) == 0.0);
}

TEST_CASE("FGSM on a binary linear model moves every pixel by eps against the label") {
  std::mt19937_64 rng(2);
  const std::vector<double> w{0.7, -1.3, 0.2, -0.05};
  auto f = binary_linear(w, 0.1);
  auto x = uniform({2, 1, 2, 2}, rng, 0.3, 0.7);
  const double eps = 0.1;
  auto adv = fgsm(f, x, {0, 1}, eps);
  // x + eps * s, or one ulp back toward x when the rounded sum lies outside the ball.
  auto moved = [&](std::size_t i, double s) {
    const double target = x.at(i) + eps * s;
    return adv.at(i) == target || adv.at(i) == std::nextafter(target, x.at(i));
  };
  for (std::size_t i = 0; i < 4; ++i) {
    const double s = w[i] > 0 ? 1.0 : -1.0;
    // Label 0 raises the class-1 logit, label 1 lowers it.
    CHECK(moved(i, s));
    CHECK(moved(4 + i, -s));
    CHECK(std::abs(adv.at(i) - x.at(i)) <= eps);
    CHECK(std::abs(adv.at(4 + i) - x.at(4 + i)) <= eps);
  }
}

TEST_CASE("a zero gradient component is not perturbed") {
  std::mt19937_64 rng(3);
  auto f = binary_linear({1.0, 0.0, -1.0, 0.0}, 0.0);
  auto x = uniform({1, 1, 2, 2}, rng, 0.2, 0.8);
  auto adv = fgsm(f, x, {0}, 0.05);
  CHECK(adv.at(1) == x.at(1));
  CHECK(adv.at(3) == x.at(3));
}

TEST_CASE("attack outputs stay inside the ball and the box on 256 images") {
  std::mt19937_64 rng(4);
  Model m(tiny_cnn());
  auto f = classifier(m);
  auto x = uniform({256, 3, 8, 8}, rng);
  std::vector<int> y(256);
  for (std::size_t i = 0; i < 256; ++i) y[i] = static_cast<int>(i % 4);
  for (double eps : {0.01, 0.03, 0.3}) {
    check_feasible(fgsm(f, x, y, eps), x, eps);
    AttackConfig cfg;
    cfg.epsilon = eps;
    cfg.steps = 3;
    cfg.step_ratio = 0.5;
    check_feasible(pgd(f, x, y, cfg), x, eps);
  }
}

TEST_CASE("PGD with one full step and no random start is FGSM bit for bit") {
  std::mt19937_64 rng(5);
  Model m(tiny_cnn());
  auto f = classifier(m);
  auto x = uniform({16, 3, 8, 8}, rng);
  std::vector<int> y(16);
  for (std::size_t i = 0; i < 16; ++i) y[i] = static_cast<int>((i * 3) % 4);
  for (double eps : {0.004, 0.03, 0.25}) {
    AttackConfig cfg;
    cfg.epsilon = eps;
    cfg.steps = 1;
    cfg.step_size = eps;
    cfg.random_start = false;
    auto a = pgd(f, x, y, cfg), b = fgsm(f, x, y, eps);
    CHECK(max_abs_diff(a, b) == 0.0);
  }
}

TEST_CASE("converged PGD on a binary linear model reaches the FGSM corner") {
  std::mt19937_64 rng(6);
  auto f = binary_linear({0.4, -0.9, 1.1, 0.3}, -0.2);
  auto x = uniform({32, 1, 2, 2}, rng, 0.2, 0.8);
  std::vector<int> y(32);
  for (std::size_t i = 0; i < 32; ++i) y[i] = static_cast<int>(i % 2);
  AttackConfig cfg;
  cfg.epsilon = 0.05;
  cfg.steps = 10;
  cfg.step_ratio = 0.25;
  cfg.random_start = false;
  auto lp = cross_entropy(f, pgd(f, x, y, cfg), y);
  auto lf = cross_entropy(f, fgsm(f, x, y, cfg.epsilon), y);
  for (std::size_t i = 0; i < 32; ++i) CHECK(lp[i] == doctest::Approx(lf[i]).epsilon(1e-12));
}

TEST_CASE("every PGD iterate is feasible") {
  std::mt19937_64 rng(7);
  Model m(tiny_cnn());
  auto f = classifier(m);
  auto x = uniform({8, 3, 8, 8}, rng);
  std::vector<int> y{0, 1, 2, 3, 0, 1, 2, 3};
  AttackConfig cfg;
  cfg.epsilon = 0.05;
  cfg.steps = 6;
  cfg.step_ratio = 0.5;
  int calls = 0;
  pgd(f, x, y, cfg, 0, [&](int step, const Tensor& it) {
    CHECK(step == calls++);
    check_feasible(it, x, cfg.epsilon);
  });
  CHECK(calls == 7);
}

TEST_CASE("random starts are seeded per sample") {
  std::mt19937_64 rng(8);
  Model m(tiny_cnn());
  auto f = classifier(m);
  auto x = uniform({6, 3, 8, 8}, rng);
  std::vector<int> y{0, 1, 2, 3, 0, 1};
  AttackConfig cfg;
  cfg.epsilon = 0.03;
  cfg.steps = 2;
  auto whole = pgd(f, x, y, cfg);
  CHECK(max_abs_diff(pgd(f, x, y, cfg), whole) == 0.0);
  // The last three rows attacked alone, with their index offset, match.
  Dataset ds = as_dataset(x, y, 4);
  auto tail = pgd(f, ds.batch(3, 6), ds.batch_labels(3, 6), cfg, 3);
  for (std::size_t i = 0; i < tail.numel(); ++i) CHECK(std::abs(tail.at(i) - whole.at(3 * 192 + i)) <= 1e-12);
  cfg.seed = 1;
  CHECK(max_abs_diff(pgd(f, x, y, cfg), whole) > 0.0);
}

TEST_CASE("attack configuration checks") {
  AttackConfig cfg;
  cfg.epsilon = 1.5;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.epsilon = 0.03;
  cfg.steps = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.steps = 5;
  cfg.step_size = 0.1;
  CHECK_FALSE(cfg.warnings().empty());
  cfg.step_size.reset();
  CHECK(cfg.alpha() == doctest::Approx(0.03 / 8));
  CHECK(attack_from_string("FGSM") == AttackKind::fgsm);
  CHECK_THROWS_AS(attack_from_string("cw"), std::invalid_argument);
}

TEST_CASE("adversarial accuracy sweeps") {
  std::mt19937_64 rng(9);
  auto f = binary_linear({0.8, -0.6, 0.5, -0.9}, 0.05);
  auto x = uniform({200, 1, 2, 2}, rng);
  // Labels from the model itself so clean accuracy is 1 and attacks bite.
  std::vector<int> y = predict(f, x);
  Dataset ds = as_dataset(x, y, 2);
  const std::vector<double> grid{0.0, 0.01, 0.02, 0.05, 0.1, 0.2};
  AttackConfig fg;
  fg.kind = AttackKind::fgsm;
  auto a = adversarial_accuracy(f, ds, fg, grid, 37);
  REQUIRE(a.size() == grid.size());
  CHECK(a[0].accuracy() == 1.0);
  for (std::size_t i = 1; i < a.size(); ++i) CHECK(a[i].accuracy() <= a[i - 1].accuracy());
  CHECK(a.back().accuracy() < 0.9);

  AttackConfig pg;
  pg.steps = 10;
  pg.step_ratio = 0.25;
  pg.random_start = false;
  auto p = adversarial_accuracy(f, ds, pg, grid, 37);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(p[i].accuracy() <= a[i].accuracy());

  CHECK_THROWS_AS(adversarial_accuracy(f, ds, fg, {0.02, 0.01}), std::invalid_argument);
  CHECK_THROWS_AS(adversarial_accuracy(f, ds, fg, {}), std::invalid_argument);
  Dataset empty = as_dataset(Tensor({0, 1, 2, 2}), {}, 2);
  CHECK_THROWS_AS(adversarial_accuracy(f, empty, fg, grid), std::invalid_argument);
}

TEST_CASE("zero budget accuracy equals clean accuracy on a CNN") {
  Model m(tiny_cnn());
  auto f = classifier(m);
  Dataset ds = make_synthetic(SyntheticKind::oriented_bars, 40, 8, 4, 1);
  auto pred = predict(f, ds.images);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) correct += pred[i] == ds.labels[i];
  AttackConfig cfg;
  auto acc = adversarial_accuracy(f, ds, cfg, {0.0, 0.02});
  CHECK(acc[0].correct == correct);
}

TEST_CASE("results do not depend on the worker count") {
  Model m(tiny_cnn());
  auto f = classifier(m);
  Dataset ds = make_synthetic(SyntheticKind::oriented_bars, 30, 8, 4, 2);
  AttackConfig cfg;
  cfg.epsilon = 0.03;
  cfg.steps = 2;
  set_num_threads(1);
  auto one = attack_dataset(f, ds, cfg, 7);
  set_num_threads(3);
  auto three = attack_dataset(f, ds, cfg, 7);
  set_num_threads(1);
  CHECK(max_abs_diff(one, three) == 0.0);
}

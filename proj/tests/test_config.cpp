#include <string>

#include "doctest.h"
#include "equirobust/config.hpp"

using equirobust::Architecture;
using equirobust::CorruptionKind;
using equirobust::config::ConfigError;
using equirobust::config::parse;
using equirobust::config::parse_document;

namespace {

// Line and column of the error a document raises, or {0, 0}.
std::pair<std::size_t, std::size_t> error_at(const std::string& text) {
  try {
    parse(text);
  } catch (const ConfigError& e) {
    return {e.line(), e.column()};
  }
  return {0, 0};
}

}  // namespace

TEST_CASE("documents split into sections, keys and values") {
  const auto doc = parse_document("# top\n[run]\n  name = \"a # b\"  # trailing\nseeds = 1, 2\n\n[model.wide]\narch=baseline\n");
  REQUIRE(doc.size() == 2);
  CHECK(doc[0].name == "run");
  REQUIRE(doc[0].entries.size() == 2);
  CHECK(doc[0].entries[0].value == "a # b");
  CHECK(doc[0].entries[0].quoted);
  CHECK(doc[0].entries[0].line == 3);
  CHECK(doc[0].entries[0].key_column == 3);
  CHECK(doc[0].entries[1].value == "1, 2");
  CHECK(doc[1].name == "model.wide");
  CHECK(doc[1].entries[0].value_column == 6);
}

TEST_CASE("defaults") {
  const auto c = parse("");
  CHECK(c.models.size() == 5);
  CHECK(c.attacks.size() == 2);
  CHECK(c.attacks[1].steps == 20);
  CHECK(c.attacks[1].alpha() == doctest::Approx(0.03 / 8));
  CHECK(c.epsilons == equirobust::attacks::default_epsilon_grid());
  CHECK(c.train.epochs == 30);
  CHECK(c.train.learning_rate == 0.05);
  CHECK(c.train.seeds == std::vector<std::uint64_t>{0});
  CHECK(c.corruptions.size() == 8);
  CHECK(c.corruptions[0].severity == 3);
  CHECK(c.corruption_epsilons == std::vector<double>{0.01, 0.02, 0.03, 0.04});
  CHECK(c.certify.batches == 50);
  CHECK(c.certify.samples_per_batch == 128);
  CHECK(c.certify.radius == 0.3);
}

TEST_CASE("model sections inherit the [model] defaults") {
  const auto c = parse(
      "[data]\nnum_classes = 6\nimage_size = 20\nchannels = 1\n"
      "[model]\ndepth = 4\nchannel_plan = 4, 8, 8, 8\n"
      "[model.fe10]\narch = fully_equivariant\ndepth = 10\nchannel_plan = 4,4,4,4,4,4,4,4,4,4\n"
      "[model.baseline]\n");
  REQUIRE(c.models.size() == 2);
  CHECK(c.models[0].label == "fe10");
  CHECK(c.models[0].spec.arch == Architecture::fully_equivariant);
  CHECK(c.models[0].spec.depth == 10);
  CHECK(c.models[1].spec.arch == Architecture::baseline);
  CHECK(c.models[1].spec.channel_plan == std::vector<std::size_t>{4, 8, 8, 8});
  CHECK(c.models[1].spec.num_classes == 6);
  CHECK(c.models[1].spec.in_channels == 1);
  CHECK(c.models[1].spec.image_size == 20);
}

TEST_CASE("the resolved snapshot parses back to itself") {
  const auto c = parse(
      "[run]\nseeds = 3, 4\nthreads = 2\n[train]\nadversarial = true\nadv_steps = 3\noptimizer = adam\n"
      "[attack]\nkinds = pgd\nepsilons = 0, 0.5\nstep_size = 0.01\n[corruption]\nkinds = pixelate\nseverities = 1, 5\n"
      "[checkpoint]\npath = \"a b.ckpt\"\n[model]\narchs = linear, parallel_rot_scale\nscale_factors = 0.5, 1\n");
  const std::string s = c.snapshot();
  const auto d = parse(s);
  CHECK(d.snapshot() == s);
  CHECK(d.train.adversarial->steps == 3);
  CHECK(*d.attacks[0].step_size == 0.01);
  CHECK(d.corruptions.size() == 2);
  CHECK(d.corruptions[1].kind == CorruptionKind::pixelate);
  CHECK(d.checkpoint->string() == "a b.ckpt");
  CHECK(d.models[1].spec.scale_set.factors == std::vector<double>{0.5, 1.0});
  CHECK(c.snapshot(false).find("out =") == std::string::npos);
}

TEST_CASE("errors carry line and column") {
  using P = std::pair<std::size_t, std::size_t>;
  CHECK(error_at("[run]\nseeds = 1\n[train]\nepochs 3\n") == P{4, 1});
  CHECK(error_at("[run]\n  sedes = 1\n") == P{2, 3});
  CHECK(error_at("[rnu]\n") == P{1, 1});
  CHECK(error_at("[run]\nthreads = 1\nthreads = 2\n") == P{3, 1});
  CHECK(error_at("name = x\n") == P{1, 1});
  CHECK(error_at("[attack]\nepsilons = 0, 0.1, x\n") == P{2, 20});
  CHECK(error_at("[attack]\nsteps = -1\n") == P{2, 9});
  CHECK(error_at("[attack]\nrandom_start = yes\n") == P{2, 16});
  CHECK(error_at("[attack]\nepsilons = 0.2, 0.1\n") == P{2, 12});
  CHECK(error_at("[model]\narchs = baseline, resnet\n") == P{2, 19});
  CHECK(error_at("[model.mine]\ndepth = 4\n") == P{1, 1});
  CHECK(error_at("[run]\nname = \"open\n") == P{2, 8});
  CHECK(error_at("[train]\nadv_steps = 3\n") == P{2, 13});
  CHECK(error_at("[train]\noptimizer = rmsprop\n") == P{2, 13});
  CHECK(error_at("[data]\nsource = imagenet\n") == P{2, 10});
  CHECK(error_at("[corruption]\nseverities = 6\n") == P{2, 14});
  CHECK(error_at("[run]\n[run]\n") == P{2, 1});
  CHECK(error_at("[model.x.y]\n") == P{1, 1});

  try {
    parse("[run]\nbogus = 1\n", "run.ini");
    FAIL("no error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()) == "run.ini:2:1: unknown key 'bogus' in [run]");
  }
}

TEST_CASE("cifar source pins the image geometry") {
  const auto c = parse("[data]\nsource = cifar\n");
  CHECK(c.data.image_size == 32);
  CHECK(c.data.num_classes == 10);
  CHECK(c.models[0].spec.in_channels == 3);
  CHECK_THROWS_AS(parse("[data]\nsource = cifar\nimage_size = 16\n"), ConfigError);
}

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>

#include "doctest.h"
#include "equirobust/data.hpp"
#include "equirobust/ops.hpp"
#include "support.hpp"

using namespace equirobust;
using testing_support::max_abs_diff;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("equirobust_data_" + name);
}

void write_bytes(const std::filesystem::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

// Angle (degrees, counter-clockwise, y up) of the foreground centroid
// relative to the image centre.
double bar_angle(const Dataset& ds, std::size_t n) {
  const std::size_t S = ds.height(), C = ds.channels(), per = C * S * S;
  auto d = ds.images.data();
  std::vector<double> lum(S * S, 0.0);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < S * S; ++i) lum[i] += d[n * per + c * S * S + i] / static_cast<double>(C);
  const double mean = std::accumulate(lum.begin(), lum.end(), 0.0) / static_cast<double>(lum.size());
  const double c0 = (static_cast<double>(S) - 1) / 2;
  double su = 0, sv = 0;
  for (std::size_t i = 0; i < S; ++i)
    for (std::size_t j = 0; j < S; ++j) {
      const double w = std::max(lum[i * S + j] - mean, 0.0);
      su += w * (static_cast<double>(j) - c0);
      sv += w * (c0 - static_cast<double>(i));
    }
  return std::atan2(sv, su) * 180.0 / std::numbers::pi;
}

double angle_gap(double a, double b) {
  double d = std::fmod(std::abs(a - b), 360.0);
  return d > 180.0 ? 360.0 - d : d;
}

}  // namespace

TEST_CASE("CIFAR binary records decode to planar images in [0, 1]") {
  // Two 2x2 RGB records: label, then R plane, G plane, B plane.
  std::vector<std::uint8_t> bytes{3, 0, 255, 51, 102, 1, 2, 3, 4, 5, 6, 7, 8,
                                  7, 9, 9, 9, 9,     10, 10, 10, 10, 255, 0, 255, 0};
  const auto p = temp_path("two.bin");
  write_bytes(p, bytes);
  Dataset ds = load_cifar_binary({p}, 10, 3, 2, 2);
  REQUIRE(ds.size() == 2);
  CHECK(ds.labels == std::vector<int>{3, 7});
  CHECK(ds.images.shape() == Shape{2, 3, 2, 2});
  CHECK(ds.images.at(0) == 0.0);
  CHECK(ds.images.at(1) == 1.0);
  CHECK(ds.images.at(2) == 0.2);
  CHECK(ds.images.at(4) == 1.0 / 255.0);
  CHECK(ds.images.at(12 + 8) == 1.0);
  CHECK(ds.provenance.find("sha256:") == 0);
  ds.validate();

  const auto q = temp_path("roundtrip.bin");
  save_cifar_binary(ds, q);
  Dataset back = load_cifar_binary({q}, 10, 3, 2, 2);
  CHECK(back.digest() == ds.digest());
  std::filesystem::remove(q);

  SUBCASE("label outside the class range") {
    CHECK_THROWS_AS(load_cifar_binary({p}, 5, 3, 2, 2), std::runtime_error);
  }
  SUBCASE("size not a multiple of the record") {
    bytes.pop_back();
    write_bytes(p, bytes);
    CHECK_THROWS_AS(load_cifar_binary({p}, 10, 3, 2, 2), std::runtime_error);
  }
  SUBCASE("empty file") {
    write_bytes(p, {});
    try {
      load_cifar_binary({p}, 10, 3, 2, 2);
      FAIL("expected an error");
    } catch (const std::runtime_error& e) {
      CHECK(std::string(e.what()).find("empty") != std::string::npos);
    }
  }
  SUBCASE("missing file") { CHECK_THROWS(load_cifar_binary({temp_path("absent.bin")})); }
  std::filesystem::remove(p);
}

TEST_CASE("synthetic datasets are deterministic and balanced") {
  for (auto kind : {SyntheticKind::oriented_bars, SyntheticKind::scaled_blobs}) {
    Dataset a = make_synthetic(kind, 40, 16, 4, 7), b = make_synthetic(kind, 40, 16, 4, 7);
    a.validate();
    CHECK(a.digest() == b.digest());
    CHECK(make_synthetic(kind, 40, 16, 4, 8).digest() != a.digest());
    std::vector<int> counts(4, 0);
    for (int l : a.labels) ++counts[static_cast<std::size_t>(l)];
    for (int c : counts) CHECK(c == 10);
  }
  CHECK_THROWS_AS(make_synthetic(SyntheticKind::oriented_bars, 0, 16, 4, 1), std::invalid_argument);
  CHECK(synthetic_from_string("scaled_blobs") == SyntheticKind::scaled_blobs);
  CHECK_THROWS_AS(synthetic_from_string("mnist"), std::invalid_argument);
}

TEST_CASE("oriented bars point along their class angle and rotate into class c + k/4") {
  for (std::size_t k : {4u, 8u}) {
    Dataset ds = make_synthetic(SyntheticKind::oriented_bars, 64, 16, k, 11);
    const double step = 360.0 / static_cast<double>(k);
    for (std::size_t n = 0; n < ds.size(); ++n) {
      const double target = static_cast<double>(ds.labels[n]) * step;
      INFO("k " << k << " image " << n << " label " << ds.labels[n]);
      CHECK(angle_gap(bar_angle(ds, n), target) < step / 2);
      // A quarter turn of the image lands on the class k/4 further on.
      Dataset r = ds.slice(n, n + 1);
      r.images = ops::rot90(r.images, 1);
      const double shifted = static_cast<double>((static_cast<std::size_t>(ds.labels[n]) + k / 4) % k) * step;
      CHECK(angle_gap(bar_angle(r, 0), shifted) < step / 2);
    }
  }
}

TEST_CASE("scaled blobs grow with the class index") {
  Dataset ds = make_synthetic(SyntheticKind::scaled_blobs, 80, 16, 4, 5);
  std::vector<double> area(4, 0.0);
  std::vector<int> count(4, 0);
  const std::size_t per = 3 * 256;
  for (std::size_t n = 0; n < ds.size(); ++n) {
    auto d = ds.images.data();
    // Foreground is everything above the mid-range luminance.
    std::vector<double> lum(256, 0.0);
    for (std::size_t i = 0; i < 256; ++i)
      for (std::size_t c = 0; c < 3; ++c) lum[i] += d[n * per + c * 256 + i] / 3;
    const auto [lo, hi] = std::minmax_element(lum.begin(), lum.end());
    const double mid = (*lo + *hi) / 2;
    double bright = 0;
    for (double v : lum) bright += v > mid ? 1 : 0;
    area[static_cast<std::size_t>(ds.labels[n])] += bright;
    ++count[static_cast<std::size_t>(ds.labels[n])];
  }
  for (std::size_t c = 1; c < 4; ++c) CHECK(area[c] / count[c] > area[c - 1] / count[c - 1]);
}

TEST_CASE("corruption identities") {
  Dataset ds = make_synthetic(SyntheticKind::scaled_blobs, 6, 16, 3, 2);
  CHECK(max_abs_diff(corrupt(ds, {CorruptionKind::gaussian_noise, 1, 0, 0.0}).images, ds.images) == 0.0);
  CHECK(max_abs_diff(corrupt(ds, {CorruptionKind::contrast, 1, 0, 1.0}).images, ds.images) <= 1e-12);
  CHECK(max_abs_diff(corrupt(ds, {CorruptionKind::brightness, 1, 0, 0.0}).images, ds.images) == 0.0);
  CHECK(max_abs_diff(corrupt(ds, {CorruptionKind::saturate, 1, 0, 0.0}).images, ds.images) == 0.0);
  CHECK(max_abs_diff(corrupt(ds, {CorruptionKind::impulse_noise, 1, 0, 0.0}).images, ds.images) == 0.0);
  CHECK(max_abs_diff(corrupt(ds, {CorruptionKind::pixelate, 1, 0, 1.0}).images, ds.images) == 0.0);
}

TEST_CASE("pixelate on a checkerboard") {
  std::vector<double> px(16);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) px[i * 4 + j] = (i + j) % 2 ? 1.0 : 0.0;
  Dataset ds;
  ds.images = Tensor({1, 1, 4, 4}, px);
  ds.labels = {0};
  ds.num_classes = 2;
  // Each 2x2 block takes its top-left value, which is 0 everywhere.
  Dataset out = corrupt(ds, {CorruptionKind::pixelate, 1, 0, std::nullopt});
  for (double v : out.images.data()) CHECK(v == 0.0);
  // Block size 3: rows/cols 0-2 read (0,0) and col 3 reads (0,3) or (3,3).
  out = corrupt(ds, {CorruptionKind::pixelate, 2, 0, std::nullopt});
  const std::vector<double> expect{0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 1, 1, 1, 0};
  for (std::size_t i = 0; i < 16; ++i) CHECK(out.images.at(i) == expect[i]);
}

TEST_CASE("defocus of a constant image is the identity and preserves mass away from borders") {
  Dataset ds;
  ds.images = Tensor({1, 1, 8, 8}, 0.4);
  ds.labels = {0};
  ds.num_classes = 2;
  auto out = corrupt(ds, {CorruptionKind::defocus_blur, 5, 0, std::nullopt});
  CHECK(max_abs_diff(out.images, ds.images) <= 1e-15);
  // Radius 1 disk is the 5-tap plus.
  std::vector<double> px(64, 0.0);
  px[3 * 8 + 3] = 1.0;
  ds.images = Tensor({1, 1, 8, 8}, px);
  out = corrupt(ds, {CorruptionKind::defocus_blur, 1, 0, std::nullopt});
  CHECK(out.images.at(3 * 8 + 3) == doctest::Approx(0.2));
  CHECK(out.images.at(2 * 8 + 3) == doctest::Approx(0.2));
  CHECK(out.images.at(2 * 8 + 2) == 0.0);
}

TEST_CASE("every corruption stays in range, is seed-deterministic and grows with severity") {
  Dataset ds = make_synthetic(SyntheticKind::oriented_bars, 8, 16, 4, 3);
  for (CorruptionKind k : kAllCorruptions) {
    INFO(to_string(k));
    CHECK(corruption_from_string(to_string(k)) == k);
    double prev = 0.0;
    for (int s = 1; s <= 5; ++s) {
      Dataset a = corrupt(ds, {k, s, 42, std::nullopt});
      a.validate();
      CHECK(corrupt(ds, {k, s, 42, std::nullopt}).digest() == a.digest());
      double dist = 0.0;
      for (std::size_t i = 0; i < a.images.numel(); ++i) dist += std::abs(a.images.at(i) - ds.images.at(i));
      // Block sampling on a 16-pixel image is not monotone between neighbouring sizes.
      if (k != CorruptionKind::pixelate) CHECK(dist >= prev * 0.999);
      if (s == 1) prev = dist;
      if (k == CorruptionKind::pixelate && s == 5) CHECK(dist > prev);
      if (k != CorruptionKind::pixelate) prev = dist;
    }
    const bool random = k == CorruptionKind::gaussian_noise || k == CorruptionKind::shot_noise ||
                        k == CorruptionKind::impulse_noise;
    if (random) CHECK(corrupt(ds, {k, 3, 43, std::nullopt}).digest() != corrupt(ds, {k, 3, 42, std::nullopt}).digest());
  }
  CHECK_THROWS_AS(corrupt(ds, {CorruptionKind::contrast, 6, 0, std::nullopt}), std::invalid_argument);
  CHECK_THROWS_AS(corruption_from_string("fog"), std::invalid_argument);
}

TEST_CASE("subsample") {
  Dataset ds = make_synthetic(SyntheticKind::scaled_blobs, 60, 8, 3, 9);
  CHECK(subsample(ds, 20, 1).digest() == ds.digest());
  Dataset a = subsample(ds, 5, 4), b = subsample(ds, 5, 4);
  CHECK(a.digest() == b.digest());
  CHECK(a.size() == 15);
  std::vector<int> counts(3, 0);
  for (int l : a.labels) ++counts[static_cast<std::size_t>(l)];
  CHECK(counts == std::vector<int>{5, 5, 5});
  CHECK(subsample(ds, 5, 5).digest() != a.digest());
  CHECK_THROWS_AS(subsample(ds, 21, 0), std::invalid_argument);
}

TEST_CASE("shuffled indices are a permutation") {
  auto idx = shuffled_indices(100, 3);
  auto sorted = idx;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < 100; ++i) CHECK(sorted[i] == i);
  CHECK(idx != sorted);
  CHECK(shuffled_indices(100, 3) == idx);
}

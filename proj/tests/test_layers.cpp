#include <cmath>
#include <random>

#include "doctest.h"
#include "equirobust/gradcheck.hpp"
#include "equirobust/group.hpp"
#include "equirobust/layers.hpp"
#include "support.hpp"

using namespace equirobust;
using testing_support::max_abs_diff;
using testing_support::randn;

namespace {

// Quarter-turn of a k x k kernel by explicit indexing: out[i][j] = in[j][k-1-i].
std::vector<double> rotate_kernel(const double* w, std::size_t k, int times) {
  std::vector<double> cur(w, w + k * k);
  for (int t = 0; t < times; ++t) {
    std::vector<double> next(k * k);
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < k; ++j) next[i * k + j] = cur[j * k + (k - 1 - i)];
    cur = next;
  }
  return cur;
}

// Brute-force lifting correlation with same padding.
Tensor lift_oracle(const Tensor& x, const Tensor& w) {
  const std::size_t N = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
  const std::size_t K = w.size(0), k = w.size(2), p = k / 2;
  std::vector<double> out(N * K * 4 * H * W, 0.0);
  for (std::size_t f = 0; f < K; ++f)
    for (int r = 0; r < 4; ++r)
      for (std::size_t c = 0; c < C; ++c) {
        const auto wr = rotate_kernel(w.data().data() + (f * C + c) * k * k, k, r);
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t y = 0; y < H; ++y)
            for (std::size_t z = 0; z < W; ++z) {
              double acc = 0.0;
              for (std::size_t a = 0; a < k; ++a)
                for (std::size_t b = 0; b < k; ++b) {
                  const long iy = static_cast<long>(y + a) - static_cast<long>(p);
                  const long iz = static_cast<long>(z + b) - static_cast<long>(p);
                  if (iy < 0 || iz < 0 || iy >= static_cast<long>(H) || iz >= static_cast<long>(W)) continue;
                  acc += x.at(((n * C + c) * H + iy) * W + iz) * wr[a * k + b];
                }
              out[(((n * K + f) * 4 + r) * H + y) * W + z] += acc;
            }
      }
  return Tensor({N, K, 4, H, W}, out);
}

Tensor smooth_field(std::size_t n, std::size_t c, std::size_t h, std::mt19937_64& rng) {
  // Sum of a few low-frequency sinusoids per channel.
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> v(n * c * h * h);
  for (std::size_t i = 0; i < n * c; ++i) {
    double fx[3], fy[3], ph[3], am[3];
    for (int t = 0; t < 3; ++t) {
      fx[t] = u(rng) * 1.5;
      fy[t] = u(rng) * 1.5;
      ph[t] = u(rng) * 6.283;
      am[t] = u(rng);
    }
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t z = 0; z < h; ++z) {
        double s = 0.0;
        for (int t = 0; t < 3; ++t)
          s += am[t] * std::sin(6.283 * (fx[t] * y + fy[t] * z) / static_cast<double>(h) + ph[t]);
        v[i * h * h + y * h + z] = s;
      }
  }
  return Tensor({n, c, h, h}, v);
}

}  // namespace

TEST_CASE("P4 group law holds exhaustively") {
  const auto g = GroupAction::p4();
  CHECK(g.order() == 4);
  for (int a : g.elements()) {
    CHECK(g.compose(a, g.inverse(a)) == 0);
    for (int b : g.elements()) {
      const int ab = g.compose(a, b);
      CHECK((ab >= 0 && ab < 4));
      for (int c : g.elements()) CHECK(g.compose(g.compose(a, b), c) == g.compose(a, g.compose(b, c)));
    }
  }
  CHECK(g.jacobian_kind() == JacobianKind::orthogonal_permutation);
  CHECK(GroupAction::scale(ScaleSet{}).jacobian_kind() == JacobianKind::non_isometric);
  CHECK_THROWS_AS(GroupAction::scale(ScaleSet{}).compose(0, 1), std::logic_error);
}

TEST_CASE("P4 actions are exactly invertible permutations") {
  std::mt19937_64 rng(2);
  const auto g = GroupAction::p4();
  auto x = randn({2, 3, 6, 6}, rng);
  auto h = randn({2, 3, 4, 6, 6}, rng);
  for (int r : g.elements()) {
    CHECK(max_abs_diff(g.act_input(g.act_input(x, r), g.inverse(r)), x) == 0.0);
    CHECK(max_abs_diff(g.act_feature(g.act_feature(h, r), g.inverse(r)), h) == 0.0);
    // Entries are only relocated, so the multiset of values is preserved.
    auto a = g.act_feature(h, r);
    std::vector<double> s1(a.data().begin(), a.data().end()), s2(h.data().begin(), h.data().end());
    std::sort(s1.begin(), s1.end());
    std::sort(s2.begin(), s2.end());
    CHECK(s1 == s2);
  }
  Tensor logits({2, 5}, 1.0);
  CHECK(max_abs_diff(g.act_feature(logits, 1), logits) == 0.0);
}

TEST_CASE("lifting convolution") {
  std::mt19937_64 rng(3);
  SUBCASE("centred delta reproduces the input in every orientation") {
    auto x = randn({2, 1, 5, 5}, rng);
    Tensor w({1, 1, 3, 3}, 0.0);
    w.mutable_data()[4] = 1.0;
    auto y = p4::lift_conv(x, w, 1);
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t i = 0; i < 25; ++i) CHECK(y.at(((n * 4) + r) * 25 + i) == x.at(n * 25 + i));
  }
  SUBCASE("constant input counts to nine") {
    auto y = p4::lift_conv(Tensor({1, 1, 5, 5}, 1.0), Tensor({1, 1, 3, 3}, 1.0), 0);
    CHECK(y.shape() == Shape{1, 1, 4, 3, 3});
    for (double v : y.data()) CHECK(v == 9.0);
  }
  SUBCASE("matches the brute-force oracle and its equivariance law") {
    for (int draw = 0; draw < 10; ++draw) {
      auto x = randn({1, 1, 6, 6}, rng);
      auto w = randn({2, 1, 3, 3}, rng);
      auto y = p4::lift_conv(x, w, 1);
      CHECK(max_abs_diff(y, lift_oracle(x, w)) < 1e-12);
      for (int r = 1; r < 4; ++r) {
        auto lhs = lift_oracle(ops::rot90(x, r), w);
        CHECK(max_abs_diff(lhs, p4::act(y, r)) < 1e-12);
      }
    }
  }
  SUBCASE("non-square kernel is rejected") {
    CHECK_THROWS_AS(p4::lift_conv(Tensor({1, 1, 5, 5}), Tensor({1, 1, 3, 2}), 1), ShapeError);
  }
}

TEST_CASE("group convolution") {
  std::mt19937_64 rng(4);
  SUBCASE("identity filter bank") {
    const std::size_t K = 3;
    Tensor w({K, K, 4, 3, 3}, 0.0);
    for (std::size_t k = 0; k < K; ++k) w.mutable_data()[((k * K + k) * 4 + 0) * 9 + 4] = 1.0;
    auto h = randn({2, K, 4, 5, 5}, rng);
    CHECK(max_abs_diff(p4::group_conv(h, w, 1), h) == 0.0);
  }
  SUBCASE("equivariance on 50 random inputs") {
    auto w = randn({3, 2, 4, 3, 3}, rng);
    double worst = 0.0;
    for (int draw = 0; draw < 50; ++draw) {
      auto h = randn({1, 2, 4, 6, 6}, rng);
      auto y = p4::group_conv(h, w, 1);
      for (int r = 1; r < 4; ++r) worst = std::max(worst, max_abs_diff(p4::group_conv(p4::act(h, r), w, 1), p4::act(y, r)));
    }
    CHECK(worst <= 1e-12);
  }
  SUBCASE("lift followed by group convolutions stays equivariant") {
    auto w0 = randn({2, 3, 3, 3}, rng), w1 = randn({4, 2, 4, 3, 3}, rng), w2 = randn({2, 4, 4, 3, 3}, rng);
    auto net = [&](const Tensor& x) {
      return p4::group_conv(ops::relu(p4::group_conv(ops::relu(p4::lift_conv(x, w0, 1)), w1, 1)), w2, 1);
    };
    for (int draw = 0; draw < 5; ++draw) {
      auto x = randn({2, 3, 8, 8}, rng);
      auto y = net(x);
      for (int r = 1; r < 4; ++r) CHECK(max_abs_diff(net(ops::rot90(x, r)), p4::act(y, r)) <= 1e-10);
    }
  }
  SUBCASE("orientation mismatch is rejected") {
    CHECK_THROWS_AS(p4::group_conv(Tensor({1, 2, 3, 5, 5}), Tensor({1, 2, 4, 3, 3}), 1), ShapeError);
    CHECK_THROWS_AS(p4::group_conv(Tensor({1, 2, 4, 5, 5}), Tensor({1, 2, 3, 3, 3}), 1), ShapeError);
  }
}

TEST_CASE("group pooling") {
  std::mt19937_64 rng(5);
  SUBCASE("identical orientations pool to that channel") {
    auto base = randn({1, 2, 1, 4, 4}, rng);
    auto h = ops::concat({base, base, base, base}, 2);
    auto expect = ops::reshape(base, {1, 2, 4, 4});
    CHECK(max_abs_diff(p4::group_pool(h, p4::PoolMode::max), expect) == 0.0);
    CHECK(max_abs_diff(p4::group_pool(h, p4::PoolMode::mean), expect) < 1e-15);
  }
  SUBCASE("pool of a transformed map is the rotated pool") {
    for (int draw = 0; draw < 10; ++draw) {
      auto h = randn({2, 3, 4, 5, 5}, rng);
      for (auto mode : {p4::PoolMode::max, p4::PoolMode::mean}) {
        auto base = p4::group_pool(h, mode);
        for (int r = 0; r < 4; ++r) {
          CHECK(max_abs_diff(p4::group_pool(p4::act(h, r), mode), ops::rot90(base, r)) <= 1e-15);
        }
      }
    }
  }
  SUBCASE("mean mode is the arithmetic mean") {
    auto h = randn({1, 1, 4, 2, 2}, rng);
    auto m = p4::group_pool(h, p4::PoolMode::mean);
    for (std::size_t i = 0; i < 4; ++i) {
      const double expect = (h.at(i) + h.at(4 + i) + h.at(8 + i) + h.at(12 + i)) / 4.0;
      CHECK(m.at(i) == doctest::Approx(expect).epsilon(1e-15));
    }
  }
}

TEST_CASE("group batch norm") {
  std::mt19937_64 rng(6);
  SUBCASE("constant input normalises to zero") {
    nn::BatchNorm bn(2, true);
    auto y = bn.forward(Tensor({3, 2, 4, 3, 3}, 2.5), nn::Mode::train);
    for (double v : y.data()) CHECK(v == 0.0);
  }
  SUBCASE("batch statistics give zero mean and unit variance per filter") {
    nn::BatchNorm bn(3, true);
    auto h = randn({4, 3, 4, 3, 3}, rng, 2.0);
    auto y = bn.forward(h, nn::Mode::train);
    for (std::size_t k = 0; k < 3; ++k) {
      double s = 0.0, s2 = 0.0, m = 0.0;
      for (std::size_t n = 0; n < 4; ++n)
        for (std::size_t i = 0; i < 36; ++i) {
          const double v = y.at((n * 3 + k) * 36 + i);
          s += v;
          s2 += v * v;
          m += 1.0;
        }
      CHECK(std::abs(s / m) < 1e-12);
      CHECK(s2 / m == doctest::Approx(1.0).epsilon(1e-4));
    }
  }
  SUBCASE("eval mode commutes with the group action") {
    nn::BatchNorm bn(3, true);
    for (int i = 0; i < 5; ++i) bn.forward(randn({4, 3, 4, 4, 4}, rng, 3.0), nn::Mode::train);
    for (int draw = 0; draw < 10; ++draw) {
      auto h = randn({2, 3, 4, 4, 4}, rng);
      auto y = bn.forward(h, nn::Mode::eval);
      for (int r = 0; r < 4; ++r) CHECK(max_abs_diff(bn.forward(p4::act(h, r), nn::Mode::eval), p4::act(y, r)) == 0.0);
    }
  }
}

TEST_CASE("scale convolution") {
  std::mt19937_64 rng(7);
  auto w = randn({4, 2, 3, 3}, rng);
  SUBCASE("single unit factor is plain convolution bit for bit") {
    auto x = randn({2, 2, 9, 9}, rng);
    ScaleSet s{{1.0}, Aggregation::average, {}};
    CHECK(max_abs_diff(scale_conv(x, w, s), ops::conv2d(x, w, Tensor(), 1)) == 0.0);
    s.aggregation = Aggregation::concat;
    CHECK(max_abs_diff(scale_conv(x, w, s), ops::conv2d(x, w, Tensor(), 1)) == 0.0);
  }
  SUBCASE("duplicate branches average to the single branch") {
    auto x = randn({1, 2, 8, 8}, rng);
    ScaleSet one{{1.0}, Aggregation::average, {}};
    ScaleSet two{{1.0, 1.0}, Aggregation::average, {}};
    CHECK(max_abs_diff(scale_conv(x, w, two), scale_conv(x, w, one)) == 0.0);
  }
  SUBCASE("concat stacks one block per factor") {
    auto y = scale_conv(randn({1, 2, 16, 16}, rng), w, ScaleSet{});
    CHECK(y.shape() == Shape{1, 12, 16, 16});
  }
  SUBCASE("learnable branch weights compute the weighted sum of branches") {
    auto x = randn({1, 2, 12, 12}, rng);
    ScaleSet s{{0.75, 1.0}, Aggregation::average, {}};
    Tensor bw({2}, std::vector<double>{0.3, -1.2});
    ScaleSet a{{0.75}, Aggregation::average, {}}, b{{1.0}, Aggregation::average, {}};
    auto expect = ops::add(ops::scale(scale_conv(x, w, a), 0.3), ops::scale(scale_conv(x, w, b), -1.2));
    CHECK(max_abs_diff(scale_conv(x, w, s, bw), expect) < 1e-12);
  }
  SUBCASE("too small a resize names the factor") {
    ScaleSet s{{0.25, 1.0}, Aggregation::average, {}};
    try {
      scale_conv(randn({1, 2, 8, 8}, rng), w, s);
      FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
      CHECK(std::string(e.what()).find("0.25") != std::string::npos);
    }
  }
  SUBCASE("approximate equivariance on smooth inputs") {
    // Single-factor branches commute with resizing up to interpolation error.
    auto ws = randn({4, 2, 3, 3}, rng, 0.3);
    ScaleSet s{{0.75, 1.0, 1.25}, Aggregation::average, {}};
    double worst = 0.0;
    for (int draw = 0; draw < 10; ++draw) {
      auto x = smooth_field(1, 2, 32, rng);
      auto fx = scale_conv(x, ws, s);
      for (double beta : s.factors) {
        const auto n = static_cast<std::size_t>(std::lround(beta * 32));
        auto lhs = scale_conv(ops::resize(x, n, n, ops::Interp::bilinear), ws, s);
        auto rhs = ops::resize(fx, n, n, ops::Interp::bilinear);
        double num = 0.0, den = 0.0;
        auto fd = fx.data();
        for (std::size_t i = 0; i < lhs.numel(); ++i) num += std::pow(lhs.at(i) - rhs.at(i), 2);
        for (double v : fd) den += v * v;
        worst = std::max(worst, std::sqrt(num) / std::sqrt(den));
      }
    }
    CHECK(worst < 0.15);
  }
}

TEST_CASE("fusion") {
  std::mt19937_64 rng(8);
  SUBCASE("concat shapes") {
    auto y = fuse({Tensor({2, 8, 4, 4}), Tensor({2, 16, 4, 4})}, FuseMode::concat);
    CHECK(y.shape() == Shape{2, 24, 4, 4});
  }
  SUBCASE("one-hot weights select the first branch") {
    auto a = randn({2, 3, 4, 4}, rng), b = randn({2, 3, 4, 4}, rng), c = randn({2, 3, 4, 4}, rng);
    Tensor theta({3}, std::vector<double>{1000.0, 0.0, 0.0});
    CHECK(max_abs_diff(fuse({a, b, c}, FuseMode::weighted_sum, theta), a) == 0.0);
  }
  SUBCASE("weights lie on the simplex") {
    auto s = ops::softmax(randn({4}, rng, 3.0));
    double total = 0.0;
    for (double v : s.data()) {
      CHECK(v > 0.0);
      total += v;
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-15));
  }
  SUBCASE("gradient with respect to the logits") {
    auto a = randn({1, 2, 3, 3}, rng), b = randn({1, 2, 3, 3}, rng), c = randn({1, 2, 3, 3}, rng);
    const auto proj = testing_support::random_weights(18, rng);
    for (int draw = 0; draw < 20; ++draw) {
      auto f = [&](const std::vector<Tensor>& v) {
        return ops::weighted_reduce(fuse({a, b, c}, FuseMode::weighted_sum, v[0]), proj);
      };
      CHECK(gradcheck(f, {randn({3}, rng)}).max_rel_error < 1e-5);
    }
  }
  SUBCASE("mismatched branches list their shapes") {
    try {
      fuse({Tensor({1, 2, 4, 4}), Tensor({1, 3, 4, 4})}, FuseMode::weighted_sum, Tensor({2}));
      FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("(1, 2, 4, 4)") != std::string::npos);
      CHECK(msg.find("(1, 3, 4, 4)") != std::string::npos);
    }
  }
}

TEST_CASE("scale set validation") {
  CHECK_NOTHROW(ScaleSet{}.validate());
  CHECK_THROWS_AS((ScaleSet{{1.0, 0.5}, Aggregation::concat, {}}.validate()), std::invalid_argument);
  CHECK_THROWS_AS((ScaleSet{{-1.0}, Aggregation::concat, {}}.validate()), std::invalid_argument);
  CHECK_THROWS_AS((ScaleSet{{0.5, 1.0}, Aggregation::concat, {1.0}}.validate()), std::invalid_argument);
}

#include <cmath>
#include <random>

#include "doctest.h"
#include "equirobust/gradcheck.hpp"
#include "equirobust/jacobian.hpp"
#include "equirobust/ops.hpp"
#include "support.hpp"

using namespace equirobust;
using testing_support::max_abs_diff;
using testing_support::randn;
using testing_support::random_weights;

namespace {

// Reduces any op output to a scalar through a fixed random projection.
double check_op(const std::function<Tensor(const std::vector<Tensor>&)>& op, std::vector<Tensor> inputs,
                std::mt19937_64& rng) {
  const std::size_t n = op(inputs).numel();
  const auto w = random_weights(n, rng);
  auto f = [&](const std::vector<Tensor>& in) { return ops::weighted_reduce(op(in), w); };
  return gradcheck(f, std::move(inputs)).max_rel_error;
}

}  // namespace

TEST_CASE("relu clamps negatives") {
  Tensor x(Shape{2}, std::vector<double>{-1.0, 2.0});
  auto y = ops::relu(x);
  CHECK(y.at(0) == 0.0);
  CHECK(y.at(1) == 2.0);
}

TEST_CASE("rot90 turns counter-clockwise and has order four") {
  Tensor m(Shape{2, 2}, std::vector<double>{1, 2, 3, 4});
  auto r = ops::rot90(m, 1);
  CHECK(std::vector<double>(r.data().begin(), r.data().end()) == std::vector<double>{2, 4, 1, 3});

  std::mt19937_64 rng(1);
  auto x = randn({2, 3, 4, 5}, rng);
  auto r1 = ops::rot90(x, 1);
  CHECK(r1.shape() == Shape{2, 3, 5, 4});
  auto r4 = ops::rot90(ops::rot90(ops::rot90(r1, 1), 1), 1);
  CHECK(r4.shape() == x.shape());
  CHECK(max_abs_diff(r4, x) == 0.0);
  CHECK(max_abs_diff(ops::rot90(x, -1), ops::rot90(x, 3)) == 0.0);
}

TEST_CASE("all-ones 3x3 filter over all-ones 5x5 input counts to nine") {
  Tensor x(Shape{1, 1, 5, 5}, 1.0);
  Tensor w(Shape{1, 1, 3, 3}, 1.0);
  auto y = ops::conv2d(x, w);
  CHECK(y.shape() == Shape{1, 1, 3, 3});
  for (double v : y.data()) CHECK(v == 9.0);
}

TEST_CASE("gradient of sum of squares") {
  Tensor x(Shape{3}, std::vector<double>{1, 2, 3});
  x.set_requires_grad(true);
  backward(ops::sum(ops::square(x)));
  auto g = x.grad();
  CHECK(g[0] == 2.0);
  CHECK(g[1] == 4.0);
  CHECK(g[2] == 6.0);
}

TEST_CASE("backward misuse is rejected") {
  Tensor x(Shape{3}, std::vector<double>{1, 2, 3});
  x.set_requires_grad(true);
  CHECK_THROWS_AS(backward(ops::square(x)), TapeError);

  auto loss = ops::sum(ops::square(x));
  backward(loss);
  CHECK_THROWS_AS(backward(loss), TapeError);
  // A fresh forward pass works again.
  backward(ops::sum(ops::square(x)));
  CHECK(x.grad()[2] == 6.0);
}

TEST_CASE("shape errors name the operation and the shapes") {
  Tensor a(Shape{2, 3}), b(Shape{3, 2});
  try {
    ops::add(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("add") != std::string::npos);
    CHECK(msg.find("(2, 3)") != std::string::npos);
    CHECK(msg.find("(3, 2)") != std::string::npos);
  }
  CHECK_THROWS_AS(ops::matmul(a, a), ShapeError);
  CHECK_THROWS_AS(ops::conv2d(Tensor(Shape{1, 2, 5, 5}), Tensor(Shape{1, 3, 3, 3})), ShapeError);
  CHECK_THROWS_AS(ops::concat({Tensor(Shape{1, 2, 4, 4}), Tensor(Shape{1, 2, 5, 5})}, 1), ShapeError);
}

TEST_CASE("frozen parameters record nothing") {
  Tensor w(Shape{2}, std::vector<double>{1, 2});
  w.mark_parameter();
  Tensor x(Shape{2}, std::vector<double>{3, 4});
  x.set_requires_grad(true);
  {
    FreezeParameters guard;
    backward(ops::sum(ops::mul(w, x)));
  }
  CHECK_FALSE(w.has_grad());
  CHECK(x.grad()[1] == 2.0);
}

TEST_CASE("central differences agree with the tape for every op") {
  std::mt19937_64 rng(7);
  constexpr int kDraws = 20;
  constexpr double kTol = 1e-5;
  auto worst = [&](auto make) {
    double w = 0.0;
    for (int d = 0; d < kDraws; ++d) w = std::max(w, make());
    return w;
  };
  using V = std::vector<Tensor>;

  SUBCASE("elementwise") {
    CHECK(worst([&] {
            return check_op([](const V& v) { return ops::mul(ops::add(v[0], v[1]), ops::sub(v[0], v[1])); },
                            {randn({3, 4}, rng), randn({3, 4}, rng)}, rng);
          }) < kTol);
    CHECK(worst([&] {
            return check_op([](const V& v) { return ops::relu(ops::add_scalar(ops::scale(v[0], 1.5), 0.1)); },
                            {randn({20}, rng)}, rng);
          }) < kTol);
    CHECK(worst([&] {
            return check_op([](const V& v) { return ops::mean(ops::square(v[0])); }, {randn({2, 5}, rng)}, rng);
          }) < kTol);
  }
  SUBCASE("linear algebra") {
    CHECK(worst([&] {
            return check_op([](const V& v) { return ops::matmul(v[0], v[1]); },
                            {randn({3, 4}, rng), randn({4, 2}, rng)}, rng);
          }) < kTol);
    CHECK(worst([&] {
            return check_op([](const V& v) { return ops::linear(v[0], v[1], v[2]); },
                            {randn({3, 5}, rng), randn({4, 5}, rng), randn({4}, rng)}, rng);
          }) < kTol);
    CHECK(worst([&] {
            return check_op([](const V& v) { return ops::add_channel_bias(v[0], v[1]); },
                            {randn({2, 3, 2, 2}, rng), randn({3}, rng)}, rng);
          }) < kTol);
  }
  SUBCASE("convolution and padding") {
    CHECK(worst([&] {
            return check_op([](const V& v) { return ops::conv2d(v[0], v[1], v[2], 1); },
                            {randn({2, 2, 5, 5}, rng), randn({3, 2, 3, 3}, rng), randn({3}, rng)}, rng);
          }) < kTol);
    CHECK(worst([&] {
            return check_op([](const V& v) { return ops::conv2d(v[0], v[1]); },
                            {randn({1, 3, 6, 5}, rng), randn({2, 3, 2, 3}, rng)}, rng);
          }) < kTol);
    CHECK(worst([&] {
            return check_op([](const V& v) { return ops::pad2d(v[0], 2, ops::PadMode::reflect); },
                            {randn({1, 2, 4, 4}, rng)}, rng);
          }) < kTol);
    CHECK(worst([&] {
            return check_op([](const V& v) { return ops::pad2d(v[0], 1, ops::PadMode::zero); },
                            {randn({1, 2, 3, 4}, rng)}, rng);
          }) < kTol);
  }
  SUBCASE("pooling and reductions") {
    CHECK(worst([&] {
            return check_op([](const V& v) { return ops::max_pool2d(v[0]); }, {randn({2, 2, 4, 6}, rng)}, rng);
          }) < kTol);
    CHECK(worst([&] {
            return check_op([](const V& v) { return ops::avg_pool2d(v[0]); }, {randn({2, 2, 4, 4}, rng)}, rng);
          }) < kTol);
    CHECK(worst([&] {
            return check_op([](const V& v) { return ops::global_avg_pool(v[0]); }, {randn({2, 3, 3, 3}, rng)},
                            rng);
          }) < kTol);
    CHECK(worst([&] {
            return check_op([](const V& v) { return ops::reduce_axis(v[0], 2, ops::Reduce::max); },
                            {randn({2, 2, 4, 3, 3}, rng)}, rng);
          }) < kTol);
    CHECK(worst([&] {
            return check_op([](const V& v) { return ops::reduce_axis(v[0], 1, ops::Reduce::mean); },
                            {randn({2, 4, 3}, rng)}, rng);
          }) < kTol);
  }
  SUBCASE("joining, normalisation and losses") {
    CHECK(worst([&] {
            return check_op([](const V& v) { return ops::concat({v[0], v[1]}, 1); },
                            {randn({2, 2, 3, 3}, rng), randn({2, 3, 3, 3}, rng)}, rng);
          }) < kTol);
    CHECK(worst([&] {
            ops::BatchNormState st{Tensor(Shape{3}, 0.0), Tensor(Shape{3}, 1.0)};
            return check_op([&](const V& v) { return ops::batch_norm(v[0], v[1], v[2], st, true); },
                            {randn({4, 3, 2, 2}, rng), randn({3}, rng), randn({3}, rng)}, rng);
          }) < kTol);
    CHECK(worst([&] {
            std::mt19937_64 local(rng());
            ops::BatchNormState st{testing_support::uniform({3}, local, -1, 1),
                                   testing_support::uniform({3}, local, 0.5, 2)};
            return check_op([&](const V& v) { return ops::batch_norm(v[0], v[1], v[2], st, false); },
                            {randn({2, 3, 2, 2}, rng), randn({3}, rng), randn({3}, rng)}, rng);
          }) < kTol);
    CHECK(worst([&] {
            return check_op([](const V& v) { return ops::softmax(v[0]); }, {randn({3, 5}, rng)}, rng);
          }) < kTol);
    CHECK(worst([&] {
            return check_op([](const V& v) { return ops::weighted_sum({v[0], v[1], v[2]}, ops::softmax(v[3])); },
                            {randn({2, 3}, rng), randn({2, 3}, rng), randn({2, 3}, rng), randn({3}, rng)}, rng);
          }) < kTol);
    CHECK(worst([&] {
            std::uniform_int_distribution<int> lab(0, 4);
            std::vector<int> labels{lab(rng), lab(rng), lab(rng)};
            auto f = [labels](const V& v) { return ops::softmax_cross_entropy(v[0], labels); };
            return gradcheck(f, {randn({3, 5}, rng)}).max_rel_error;
          }) < kTol);
  }
  SUBCASE("geometry") {
    CHECK(worst([&] {
            return check_op([](const V& v) { return ops::resize(v[0], 7, 5, ops::Interp::bilinear); },
                            {randn({1, 2, 5, 6}, rng)}, rng);
          }) < kTol);
    CHECK(worst([&] {
            return check_op([](const V& v) { return ops::resize(v[0], 3, 2, ops::Interp::nearest); },
                            {randn({1, 1, 6, 4}, rng)}, rng);
          }) < kTol);
    CHECK(worst([&] {
            return check_op([](const V& v) { return ops::rot90(v[0], 3); }, {randn({2, 3, 4}, rng)}, rng);
          }) < kTol);
    CHECK(worst([&] {
            return check_op([](const V& v) { return ops::roll(ops::reshape(v[0], {2, 4, 3}), 1, 1); },
                            {randn({2, 12}, rng)}, rng);
          }) < kTol);
  }
}

TEST_CASE("conv2d input gradient equals the transposed-convolution oracle") {
  std::mt19937_64 rng(11);
  for (int draw = 0; draw < 5; ++draw) {
    const std::size_t N = 2, C = 3, H = 6, W = 5, O = 4, K = 3, P = 1;
    auto x = randn({N, C, H, W}, rng);
    auto w = randn({O, C, K, K}, rng);
    x.set_requires_grad(true);
    auto y = ops::conv2d(x, w, Tensor(), P);
    const std::size_t Ho = y.size(2), Wo = y.size(3);
    const auto g = random_weights(y.numel(), rng);
    backward(ops::weighted_reduce(y, g));

    std::vector<double> oracle(N * C * H * W, 0.0);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t iy = 0; iy < H; ++iy)
          for (std::size_t ix = 0; ix < W; ++ix) {
            double acc = 0.0;
            for (std::size_t o = 0; o < O; ++o)
              for (std::size_t ki = 0; ki < K; ++ki)
                for (std::size_t kj = 0; kj < K; ++kj) {
                  const long oy = static_cast<long>(iy + P) - static_cast<long>(ki);
                  const long ox = static_cast<long>(ix + P) - static_cast<long>(kj);
                  if (oy < 0 || ox < 0 || oy >= static_cast<long>(Ho) || ox >= static_cast<long>(Wo)) continue;
                  acc += g[((n * O + o) * Ho + oy) * Wo + ox] * w.at(((o * C + c) * K + ki) * K + kj);
                }
            oracle[((n * C + c) * H + iy) * W + ix] = acc;
          }
    CHECK(max_abs_diff(x.grad_tensor(), Tensor(x.shape(), oracle)) < 1e-12);
  }
}

TEST_CASE("rot90 adjoint is the inverse rotation of the upstream gradient") {
  std::mt19937_64 rng(3);
  auto x = randn({2, 4, 3}, rng);
  x.set_requires_grad(true);
  auto upstream = randn({2, 3, 4}, rng);
  backward(ops::weighted_reduce(ops::rot90(x, 1), {upstream.data().begin(), upstream.data().end()}));
  CHECK(max_abs_diff(x.grad_tensor(), ops::rot90(upstream, 3)) == 0.0);
}

TEST_CASE("same-size bilinear resize is an exact copy") {
  std::mt19937_64 rng(5);
  auto x = randn({1, 2, 7, 7}, rng);
  CHECK(max_abs_diff(ops::resize(x, 7, 7, ops::Interp::bilinear), x) == 0.0);
}

TEST_CASE("batch norm of a constant input is zero") {
  Tensor x(Shape{3, 2, 2, 2}, 4.0);
  ops::BatchNormState st{Tensor(Shape{2}, 0.0), Tensor(Shape{2}, 1.0)};
  auto y = ops::batch_norm(x, Tensor(), Tensor(), st, true);
  for (double v : y.data()) CHECK(v == 0.0);
}

TEST_CASE("forward passes are deterministic") {
  std::mt19937_64 a(9), b(9);
  auto xa = randn({2, 3, 8, 8}, a), wa = randn({4, 3, 3, 3}, a);
  auto xb = randn({2, 3, 8, 8}, b), wb = randn({4, 3, 3, 3}, b);
  CHECK(max_abs_diff(ops::conv2d(xa, wa, Tensor(), 1), ops::conv2d(xb, wb, Tensor(), 1)) == 0.0);
}

TEST_CASE("input Jacobian") {
  std::mt19937_64 rng(13);
  SUBCASE("linear map gives its matrix exactly") {
    auto W = randn({3, 6}, rng);
    auto f = [&](const Tensor& x) { return ops::linear(ops::reshape(x, {1, 6}), W); };
    auto J = input_jacobian(f, randn({6}, rng));
    CHECK(max_abs_diff(J, W) == 0.0);
  }
  SUBCASE("single output gives one row") {
    auto f = [](const Tensor& x) { return ops::sum(ops::square(x)); };
    auto J = input_jacobian(f, Tensor(Shape{3}, std::vector<double>{1, 2, 3}));
    CHECK(J.shape() == Shape{1, 3});
    CHECK(J.at(2) == 6.0);
  }
  SUBCASE("two-layer network matches central differences") {
    auto W1 = randn({8, 12}, rng), b1 = randn({8}, rng), W2 = randn({3, 8}, rng);
    auto f = [&](const Tensor& x) {
      return ops::linear(ops::relu(ops::linear(ops::reshape(x, {1, 12}), W1, b1)), W2);
    };
    auto x = randn({12}, rng);
    auto J = input_jacobian(f, x);
    const double h = 1e-5;
    double diff = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < 12; ++i) {
      auto up = x.detach(), dn = x.detach();
      up.mutable_data()[i] += h;
      dn.mutable_data()[i] -= h;
      auto fu = f(up), fd = f(dn);
      for (std::size_t j = 0; j < 3; ++j) {
        const double num = (fu.at(j) - fd.at(j)) / (2 * h);
        diff = std::max(diff, std::abs(num - J.at(j * 12 + i)));
        scale = std::max(scale, std::abs(num));
      }
    }
    CHECK(diff / scale < 1e-5);
  }
}

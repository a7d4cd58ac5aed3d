#include "equirobust/group.hpp"

#include <cmath>
#include <stdexcept>

#include "equirobust/ops.hpp"

namespace equirobust {

void ScaleSet::validate() const {
  if (factors.empty()) throw std::invalid_argument("scale set: no factors");
  for (std::size_t i = 0; i < factors.size(); ++i) {
    if (!(factors[i] > 0.0) || !std::isfinite(factors[i])) {
      throw std::invalid_argument("scale set: factor " + std::to_string(factors[i]) + " is not positive");
    }
    if (i && factors[i] < factors[i - 1]) {
      throw std::invalid_argument("scale set: factors must be sorted ascending");
    }
  }
  if (!branch_weights.empty() && branch_weights.size() != factors.size()) {
    throw std::invalid_argument("scale set: " + std::to_string(branch_weights.size()) +
                                " branch weights for " + std::to_string(factors.size()) + " factors");
  }
}

std::string to_string(Aggregation a) { return a == Aggregation::concat ? "concat" : "average"; }

Aggregation aggregation_from_string(const std::string& s) {
  if (s == "concat") return Aggregation::concat;
  if (s == "average") return Aggregation::average;
  throw std::invalid_argument("unknown aggregation '" + s + "' (expected concat or average)");
}

namespace {

std::size_t scaled_extent(std::size_t n, double alpha) {
  return static_cast<std::size_t>(std::lround(alpha * static_cast<double>(n)));
}

}  // namespace

GroupAction GroupAction::p4() {
  GroupAction g;
  g.id_ = GroupId::p4;
  return g;
}

GroupAction GroupAction::scale(ScaleSet scales) {
  scales.validate();
  GroupAction g;
  g.id_ = GroupId::scale;
  g.scales_ = std::move(scales);
  return g;
}

GroupAction GroupAction::trivial() { return GroupAction(); }

std::size_t GroupAction::order() const {
  switch (id_) {
    case GroupId::p4: return 4;
    case GroupId::scale: return scales_.size();
    case GroupId::trivial: return 1;
  }
  return 1;
}

std::vector<int> GroupAction::elements() const {
  std::vector<int> e(order());
  for (std::size_t i = 0; i < e.size(); ++i) e[i] = static_cast<int>(i);
  return e;
}

JacobianKind GroupAction::jacobian_kind() const {
  return id_ == GroupId::scale ? JacobianKind::non_isometric : JacobianKind::orthogonal_permutation;
}

int GroupAction::compose(int a, int b) const {
  switch (id_) {
    case GroupId::p4: return ((a + b) % 4 + 4) % 4;
    case GroupId::trivial: return 0;
    case GroupId::scale: break;
  }
  throw std::logic_error("GroupAction: a finite scale set is not closed under composition");
}

int GroupAction::inverse(int a) const {
  switch (id_) {
    case GroupId::p4: return ((4 - a) % 4 + 4) % 4;
    case GroupId::trivial: return 0;
    case GroupId::scale: break;
  }
  throw std::logic_error("GroupAction: a finite scale set has no inverses");
}

Tensor GroupAction::act_input(const Tensor& x, int g) const {
  switch (id_) {
    case GroupId::p4: return ops::rot90(x, g);
    case GroupId::trivial: return x;
    case GroupId::scale: {
      const double a = scales_.factors.at(static_cast<std::size_t>(g));
      return ops::resize(x, scaled_extent(x.size(2), a), scaled_extent(x.size(3), a), ops::Interp::bilinear);
    }
  }
  return x;
}

Tensor GroupAction::act_feature(const Tensor& h, int g) const {
  if (h.dim() <= 2 || id_ == GroupId::trivial) return h;
  if (id_ == GroupId::p4 && h.dim() == 5) return p4::act(h, g);
  return act_input(h, g);
}

namespace p4 {

namespace {

void require_p4(const char* op, const Tensor& h) {
  if (h.dim() != 5 || h.size(2) != 4) {
    throw ShapeError(std::string(op) + ": expected a P4 feature map (N, K, 4, H, W), got " + shape_str(h.shape()));
  }
}

void require_square(const char* op, const Tensor& w) {
  const std::size_t d = w.dim();
  if (d < 3 || w.size(d - 1) != w.size(d - 2)) {
    throw ShapeError(std::string(op) + ": kernel must be square, got " + shape_str(w.shape()));
  }
}

}  // namespace

Tensor act(const Tensor& h, int r) {
  require_p4("p4::act", h);
  const int k = ((r % 4) + 4) % 4;
  if (k == 0) return h;
  return ops::rot90(ops::roll(h, 2, k), k);
}

Tensor lift_conv(const Tensor& x, const Tensor& w, std::size_t padding) {
  if (x.dim() != 4 || w.dim() != 4) {
    throw ShapeError("p4::lift_conv: expected x (N, C, H, W) and w (K, C, k, k), got " + shape_str(x.shape()) +
                     " and " + shape_str(w.shape()));
  }
  require_square("p4::lift_conv", w);
  const std::size_t K = w.size(0), C = w.size(1), k = w.size(2);
  std::vector<Tensor> rotated;
  for (int r = 0; r < 4; ++r) rotated.push_back(ops::reshape(ops::rot90(w, r), {K, 1, C, k, k}));
  const Tensor bank = ops::reshape(ops::concat(rotated, 1), {K * 4, C, k, k});
  const Tensor y = ops::conv2d(x, bank, Tensor(), padding);
  return ops::reshape(y, {x.size(0), K, 4, y.size(2), y.size(3)});
}

Tensor group_conv(const Tensor& h, const Tensor& w, std::size_t padding) {
  require_p4("p4::group_conv", h);
  if (w.dim() != 5 || w.size(2) != 4 || w.size(1) != h.size(1)) {
    throw ShapeError("p4::group_conv: filters " + shape_str(w.shape()) + " do not match input " +
                     shape_str(h.shape()) + " (expected (K', K, 4, k, k))");
  }
  require_square("p4::group_conv", w);
  const std::size_t Ko = w.size(0), K = w.size(1), k = w.size(3);
  std::vector<Tensor> expanded;
  for (int r = 0; r < 4; ++r) {
    expanded.push_back(ops::reshape(ops::rot90(ops::roll(w, 2, r), r), {Ko, 1, K, 4, k, k}));
  }
  const Tensor bank = ops::reshape(ops::concat(expanded, 1), {Ko * 4, K * 4, k, k});
  const Tensor flat = ops::reshape(h, {h.size(0), K * 4, h.size(3), h.size(4)});
  const Tensor y = ops::conv2d(flat, bank, Tensor(), padding);
  return ops::reshape(y, {h.size(0), Ko, 4, y.size(2), y.size(3)});
}

Tensor group_pool(const Tensor& h, PoolMode mode) {
  require_p4("p4::group_pool", h);
  return ops::reduce_axis(h, 2, mode == PoolMode::max ? ops::Reduce::max : ops::Reduce::mean);
}

Tensor spatial_max_pool(const Tensor& h) {
  require_p4("p4::spatial_max_pool", h);
  const std::size_t N = h.size(0), K = h.size(1);
  const Tensor y = ops::max_pool2d(ops::reshape(h, {N, K * 4, h.size(3), h.size(4)}));
  return ops::reshape(y, {N, K, 4, y.size(2), y.size(3)});
}

}  // namespace p4

Tensor scale_conv(const Tensor& x, const Tensor& w, const ScaleSet& scales, const Tensor& branch_weights) {
  scales.validate();
  if (x.dim() != 4 || w.dim() != 4 || x.size(1) != w.size(1)) {
    throw ShapeError("scale_conv: expected x (N, C, H, W) and w (O, C, k, k), got " + shape_str(x.shape()) +
                     " and " + shape_str(w.shape()));
  }
  if (w.size(2) != w.size(3) || w.size(2) % 2 == 0) {
    throw ShapeError("scale_conv: kernel must be square with odd size, got " + shape_str(w.shape()));
  }
  const std::size_t H = x.size(2), W = x.size(3), k = w.size(2);
  std::vector<Tensor> branches;
  for (double a : scales.factors) {
    const std::size_t h = scaled_extent(H, a), wd = scaled_extent(W, a);
    if (h < k || wd < k) {
      throw ShapeError("scale_conv: factor " + std::to_string(a) + " resizes " + std::to_string(H) + "x" +
                       std::to_string(W) + " to " + std::to_string(h) + "x" + std::to_string(wd) +
                       ", below the kernel size " + std::to_string(k));
    }
    const bool same = h == H && wd == W;
    const Tensor xs = same ? x : ops::resize(x, h, wd, ops::Interp::bilinear);
    const Tensor ys = ops::conv2d(xs, w, Tensor(), k / 2);
    branches.push_back(same ? ys : ops::resize(ys, H, W, ops::Interp::bilinear));
  }
  if (branch_weights.defined()) return ops::weighted_sum(branches, branch_weights);
  if (scales.aggregation == Aggregation::concat) return ops::concat(branches, 1);
  Tensor acc = branches.front();
  for (std::size_t i = 1; i < branches.size(); ++i) acc = ops::add(acc, branches[i]);
  return ops::scale(acc, 1.0 / static_cast<double>(branches.size()));
}

Tensor fuse(const std::vector<Tensor>& branches, FuseMode mode, const Tensor& theta) {
  if (branches.empty()) throw ShapeError("fuse: no branches");
  if (mode == FuseMode::concat) return ops::concat(branches, 1);
  if (!theta.defined()) throw std::invalid_argument("fuse: weighted_sum needs fusion logits");
  return ops::weighted_sum(branches, ops::softmax(theta));
}

}  // namespace equirobust

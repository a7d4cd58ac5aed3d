#pragma once

#include <string>
#include <vector>

#include "equirobust/tensor.hpp"

namespace equirobust {

enum class Aggregation { concat, average };

/// Discrete set of rescaling factors used by scale-equivariant convolution.
struct ScaleSet {
  std::vector<double> factors{0.75, 1.0, 1.25};
  Aggregation aggregation = Aggregation::concat;
  /// Initial values of learnable per-branch weights w_s. Empty means the
  /// branches are combined by `aggregation` alone.
  std::vector<double> branch_weights;

  /// Throws std::invalid_argument unless factors are positive, sorted
  /// ascending and (when present) matched one-to-one by branch weights.
  void validate() const;
  std::size_t size() const { return factors.size(); }
  bool operator==(const ScaleSet&) const = default;
};

enum class GroupId { p4, scale, trivial };
enum class JacobianKind { orthogonal_permutation, non_isometric };

/// A finite symmetry group with its action on images and its representation
/// on feature maps. Elements are indexed 0..order()-1; for P4 element r is a
/// counter-clockwise rotation by r * 90 degrees.
class GroupAction {
 public:
  static GroupAction p4();
  static GroupAction scale(ScaleSet scales);
  /// The one-element group; every action is the identity.
  static GroupAction trivial();

  GroupId id() const { return id_; }
  std::size_t order() const;
  std::vector<int> elements() const;
  JacobianKind jacobian_kind() const;

  /// Group law. The scale set is generally not closed, so these throw
  /// std::logic_error for GroupId::scale.
  int compose(int a, int b) const;
  int inverse(int a) const;

  /// T_g on images (N, C, H, W).
  Tensor act_input(const Tensor& x, int g) const;
  /// rho(g) on features: (N, K, 4, H, W) maps rotate spatially and shift the
  /// orientation axis; (N, C, H, W) maps rotate spatially; rank-2 outputs
  /// (logits) are left unchanged.
  Tensor act_feature(const Tensor& h, int g) const;

 private:
  GroupId id_ = GroupId::trivial;
  ScaleSet scales_;
};

namespace p4 {

/// rho(r) on a P4 feature map: out[:, :, s] = rot90(in[:, :, s - r], r).
Tensor act(const Tensor& h, int r);

/// Lifting correlation. x (N, C, H, W), w (K, C, k, k) -> (N, K, 4, H', W');
/// orientation channel r correlates x with w rotated by r quarter turns.
Tensor lift_conv(const Tensor& x, const Tensor& w, std::size_t padding);

/// Group correlation on P4 maps. h (N, K, 4, H, W), w (K', K, 4, k, k):
/// out[k', r] = sum_{k, s} corr(h[k, s], rot90^r(w[k', k, (s - r) mod 4])).
Tensor group_conv(const Tensor& h, const Tensor& w, std::size_t padding);

enum class PoolMode { max, mean };

/// Reduces the orientation axis: (N, K, 4, H, W) -> (N, K, H, W).
Tensor group_pool(const Tensor& h, PoolMode mode);

/// 2x2 stride-2 spatial max-pooling of every orientation plane.
Tensor spatial_max_pool(const Tensor& h);

}  // namespace p4

/// Shared-filter multi-scale correlation. Each branch resizes x by alpha
/// (bilinear, rounded sizes), correlates with w using same padding and
/// resizes back to the input resolution. Branches are combined by
/// sum_s w_s * branch_s when `branch_weights` is defined, otherwise by
/// scales.aggregation. Throws ShapeError naming alpha when a resized input
/// is smaller than the kernel.
Tensor scale_conv(const Tensor& x, const Tensor& w, const ScaleSet& scales,
                  const Tensor& branch_weights = Tensor());

enum class FuseMode { concat, weighted_sum };

/// Combines image branches (N, C_i, H, W): channel concatenation, or
/// sum_i softmax(theta)_i * branch_i.
Tensor fuse(const std::vector<Tensor>& branches, FuseMode mode, const Tensor& theta = Tensor());

std::string to_string(Aggregation a);
Aggregation aggregation_from_string(const std::string& s);

}  // namespace equirobust

#pragma once

#include <cstddef>
#include <vector>

#include "equirobust/tensor.hpp"

// Differentiable operations. Every function records a tape entry when any
// operand takes part in differentiation, and throws ShapeError naming the
// operation and the offending shapes when operands do not conform.
namespace equirobust::ops {

enum class PadMode { zero, reflect };
enum class Reduce { max, mean };
enum class Interp { nearest, bilinear };
enum class Reduction { mean, sum };

// Elementwise (identical shapes).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor square(const Tensor& a);
Tensor relu(const Tensor& a);

// Reductions to a scalar.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// sum_i a_i * weights_i with constant weights; picks out single logits or
/// margins without a one-hot tensor on the tape.
Tensor weighted_reduce(const Tensor& a, const std::vector<double>& weights);

Tensor reshape(const Tensor& a, Shape shape);
Tensor matmul(const Tensor& a, const Tensor& b);
/// x (N, F) times w (O, F) transposed, plus optional bias (O).
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = Tensor());
/// Adds bias[c] to every element of channel c (axis 1).
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);

/// Cross-correlation of x (N, C, H, W) with w (O, C, kh, kw), stride 1,
/// `padding` zeros on every side.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias = Tensor(),
              std::size_t padding = 0);
Tensor pad2d(const Tensor& x, std::size_t padding, PadMode mode);

Tensor max_pool2d(const Tensor& x, std::size_t kernel = 2, std::size_t stride = 2);
Tensor avg_pool2d(const Tensor& x, std::size_t kernel = 2, std::size_t stride = 2);
/// (N, C, H, W) -> (N, C).
Tensor global_avg_pool(const Tensor& x);

/// Removes `axis` by taking the max or mean over it.
Tensor reduce_axis(const Tensor& x, std::size_t axis, Reduce mode);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);

struct BatchNormState {
  Tensor running_mean;  // (C)
  Tensor running_var;   // (C)
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Normalises per channel (axis 1) over every other axis. In training mode
/// the batch statistics are used and the running estimates are updated in
/// place; otherwise the running estimates are used.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state,
                  bool training);

/// Softmax along the last axis.
Tensor softmax(const Tensor& x);
/// sum_i weights_i * branches_i, `weights` a 1-D tensor with one entry per branch.
Tensor weighted_sum(const std::vector<Tensor>& branches, const Tensor& weights);
/// Mean (or sum) over the batch of -log softmax(logits)[label].
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                             Reduction reduction = Reduction::mean);

/// Resizes the last two axes of (N, C, H, W) with half-pixel centres. A
/// same-size bilinear resize is an exact copy.
Tensor resize(const Tensor& x, std::size_t out_h, std::size_t out_w, Interp mode);
/// Rotates the last two axes counter-clockwise by times * 90 degrees.
Tensor rot90(const Tensor& x, int times);
/// out[..., i, ...] = x[..., (i - shift) mod n, ...] along `axis`.
Tensor roll(const Tensor& x, std::size_t axis, int shift);

}  // namespace equirobust::ops

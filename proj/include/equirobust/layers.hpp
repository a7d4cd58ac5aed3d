#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "equirobust/group.hpp"
#include "equirobust/ops.hpp"

namespace equirobust::nn {

enum class Mode { train, eval };

enum class ParamRole { weight, bias, bn_gamma, bn_beta, fusion_logits, branch_weights };

struct Param {
  std::string name;
  Tensor value;
  ParamRole role;
  std::size_t fan_in = 1;
};

struct Buffer {
  std::string name;
  Tensor value;
};

class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor forward(const Tensor& x, Mode mode) = 0;
  virtual std::string kind() const = 0;
  /// Appends owned parameters and buffers, names prefixed by `prefix`.
  virtual void collect(const std::string& prefix, std::vector<Param>& params, std::vector<Buffer>& buffers);
  /// Direct sub-layers, for structural queries.
  virtual std::vector<const Layer*> children() const { return {}; }
};

using LayerPtr = std::unique_ptr<Layer>;

/// Calls fn on `root` and every nested sub-layer, depth first.
void visit(const Layer& root, const std::function<void(const Layer&)>& fn);

class Sequential : public Layer {
 public:
  Sequential& add(LayerPtr layer);
  template <class L, class... Args>
  Sequential& emplace(Args&&... args) {
    return add(std::make_unique<L>(std::forward<Args>(args)...));
  }
  Tensor forward(const Tensor& x, Mode mode) override;
  std::string kind() const override { return "sequential"; }
  void collect(const std::string& prefix, std::vector<Param>& params, std::vector<Buffer>& buffers) override;
  std::vector<const Layer*> children() const override;
  std::size_t size() const { return layers_.size(); }
  Layer& at(std::size_t i) { return *layers_.at(i); }

 private:
  std::vector<LayerPtr> layers_;
};

/// Standard convolution with same padding (odd kernels).
class Conv2d : public Layer {
 public:
  Conv2d(std::size_t in, std::size_t out, std::size_t kernel = 3, bool bias = false);
  Tensor forward(const Tensor& x, Mode mode) override;
  std::string kind() const override { return "conv2d"; }
  void collect(const std::string& prefix, std::vector<Param>& params, std::vector<Buffer>& buffers) override;

 private:
  Tensor weight_, bias_;
  std::size_t fan_in_;
};

/// Batch normalisation per axis-1 channel. With `group` set the input is a
/// P4 map and statistics are shared across the orientation axis.
class BatchNorm : public Layer {
 public:
  explicit BatchNorm(std::size_t channels, bool group = false);
  Tensor forward(const Tensor& x, Mode mode) override;
  std::string kind() const override { return group_ ? "group_batch_norm" : "batch_norm"; }
  void collect(const std::string& prefix, std::vector<Param>& params, std::vector<Buffer>& buffers) override;

 private:
  Tensor gamma_, beta_;
  ops::BatchNormState state_;
  bool group_;
};

class ReLU : public Layer {
 public:
  Tensor forward(const Tensor& x, Mode) override { return ops::relu(x); }
  std::string kind() const override { return "relu"; }
};

/// 2x2 stride-2 max pooling on images or on every plane of a P4 map.
class MaxPool : public Layer {
 public:
  Tensor forward(const Tensor& x, Mode mode) override;
  std::string kind() const override { return "max_pool"; }
};

class P4Lift : public Layer {
 public:
  P4Lift(std::size_t in, std::size_t filters, std::size_t kernel = 3);
  Tensor forward(const Tensor& x, Mode mode) override;
  std::string kind() const override { return "p4_lift"; }
  void collect(const std::string& prefix, std::vector<Param>& params, std::vector<Buffer>& buffers) override;

 private:
  Tensor weight_;
  std::size_t fan_in_;
};

class P4GroupConv : public Layer {
 public:
  P4GroupConv(std::size_t in_filters, std::size_t out_filters, std::size_t kernel = 3);
  Tensor forward(const Tensor& x, Mode mode) override;
  std::string kind() const override { return "p4_group_conv"; }
  void collect(const std::string& prefix, std::vector<Param>& params, std::vector<Buffer>& buffers) override;

 private:
  Tensor weight_;
  std::size_t fan_in_;
};

class GroupPool : public Layer {
 public:
  explicit GroupPool(p4::PoolMode mode = p4::PoolMode::max) : mode_(mode) {}
  Tensor forward(const Tensor& x, Mode) override { return p4::group_pool(x, mode_); }
  std::string kind() const override { return "group_pool"; }

 private:
  p4::PoolMode mode_;
};

/// Shared-filter scale convolution. Output channels are out * |scales| for
/// concat aggregation and out otherwise.
class ScaleConv : public Layer {
 public:
  ScaleConv(std::size_t in, std::size_t out, ScaleSet scales, std::size_t kernel = 3);
  Tensor forward(const Tensor& x, Mode mode) override;
  std::string kind() const override { return "scale_conv"; }
  void collect(const std::string& prefix, std::vector<Param>& params, std::vector<Buffer>& buffers) override;
  std::size_t out_channels() const;
  const ScaleSet& scales() const { return scales_; }

 private:
  Tensor weight_, branch_weights_;
  ScaleSet scales_;
  std::size_t out_, fan_in_;
};

/// Runs branches on the same input and fuses their image outputs.
class Parallel : public Layer {
 public:
  Parallel(std::vector<std::unique_ptr<Sequential>> branches, FuseMode mode);
  Tensor forward(const Tensor& x, Mode mode) override;
  std::string kind() const override { return mode_ == FuseMode::concat ? "parallel_concat" : "parallel_weighted"; }
  void collect(const std::string& prefix, std::vector<Param>& params, std::vector<Buffer>& buffers) override;
  std::vector<const Layer*> children() const override;
  /// softmax(theta), or empty for concat fusion.
  std::vector<double> fusion_weights() const;

 private:
  std::vector<std::unique_ptr<Sequential>> branches_;
  FuseMode mode_;
  Tensor theta_;
};

class GlobalAvgPool : public Layer {
 public:
  Tensor forward(const Tensor& x, Mode) override { return ops::global_avg_pool(x); }
  std::string kind() const override { return "global_avg_pool"; }
};

class Flatten : public Layer {
 public:
  Tensor forward(const Tensor& x, Mode) override;
  std::string kind() const override { return "flatten"; }
};

class Dense : public Layer {
 public:
  Dense(std::size_t in, std::size_t out);
  Tensor forward(const Tensor& x, Mode mode) override;
  std::string kind() const override { return "dense"; }
  void collect(const std::string& prefix, std::vector<Param>& params, std::vector<Buffer>& buffers) override;

 private:
  Tensor weight_, bias_;
  std::size_t fan_in_;
};

}  // namespace equirobust::nn

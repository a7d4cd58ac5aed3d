#include "equirobust/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace equirobust::nn {

namespace {

Tensor parameter(Shape shape, double fill = 0.0) {
  Tensor t(std::move(shape), fill);
  t.mark_parameter();
  return t;
}

}  // namespace

void Layer::collect(const std::string&, std::vector<Param>&, std::vector<Buffer>&) {}

void visit(const Layer& root, const std::function<void(const Layer&)>& fn) {
  fn(root);
  for (const Layer* c : root.children()) visit(*c, fn);
}

Sequential& Sequential::add(LayerPtr layer) {
  layers_.push_back(std::move(layer));
  return *this;
}

Tensor Sequential::forward(const Tensor& x, Mode mode) {
  Tensor h = x;
  for (auto& l : layers_) h = l->forward(h, mode);
  return h;
}

void Sequential::collect(const std::string& prefix, std::vector<Param>& params, std::vector<Buffer>& buffers) {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    layers_[i]->collect(prefix + std::to_string(i) + ".", params, buffers);
  }
}

std::vector<const Layer*> Sequential::children() const {
  std::vector<const Layer*> out;
  for (const auto& l : layers_) out.push_back(l.get());
  return out;
}

Conv2d::Conv2d(std::size_t in, std::size_t out, std::size_t kernel, bool bias)
    : weight_(parameter({out, in, kernel, kernel})), fan_in_(in * kernel * kernel) {
  if (kernel % 2 == 0) throw std::invalid_argument("Conv2d: same padding needs an odd kernel");
  if (bias) bias_ = parameter({out});
}

Tensor Conv2d::forward(const Tensor& x, Mode) { return ops::conv2d(x, weight_, bias_, weight_.size(2) / 2); }

void Conv2d::collect(const std::string& prefix, std::vector<Param>& params, std::vector<Buffer>&) {
  params.push_back({prefix + "weight", weight_, ParamRole::weight, fan_in_});
  if (bias_.defined()) params.push_back({prefix + "bias", bias_, ParamRole::bias, fan_in_});
}

BatchNorm::BatchNorm(std::size_t channels, bool group)
    : gamma_(parameter({channels}, 1.0)),
      beta_(parameter({channels}, 0.0)),
      state_{Tensor(Shape{channels}, 0.0), Tensor(Shape{channels}, 1.0)},
      group_(group) {}

Tensor BatchNorm::forward(const Tensor& x, Mode mode) {
  const bool training = mode == Mode::train;
  if (!group_) {
    if (x.dim() != 4) throw ShapeError("BatchNorm: expected (N, C, H, W), got " + shape_str(x.shape()));
    return ops::batch_norm(x, gamma_, beta_, state_, training);
  }
  if (x.dim() != 5 || x.size(2) != 4) {
    throw ShapeError("group BatchNorm: expected (N, K, 4, H, W), got " + shape_str(x.shape()));
  }
  const Tensor flat = ops::reshape(x, {x.size(0), x.size(1), 4 * x.size(3) * x.size(4)});
  return ops::reshape(ops::batch_norm(flat, gamma_, beta_, state_, training), x.shape());
}

void BatchNorm::collect(const std::string& prefix, std::vector<Param>& params, std::vector<Buffer>& buffers) {
  params.push_back({prefix + "gamma", gamma_, ParamRole::bn_gamma, 1});
  params.push_back({prefix + "beta", beta_, ParamRole::bn_beta, 1});
  buffers.push_back({prefix + "running_mean", state_.running_mean});
  buffers.push_back({prefix + "running_var", state_.running_var});
}

Tensor MaxPool::forward(const Tensor& x, Mode) {
  if (x.dim() == 5) return p4::spatial_max_pool(x);
  return ops::max_pool2d(x);
}

P4Lift::P4Lift(std::size_t in, std::size_t filters, std::size_t kernel)
    : weight_(parameter({filters, in, kernel, kernel})), fan_in_(in * kernel * kernel) {
  if (kernel % 2 == 0) throw std::invalid_argument("P4Lift: same padding needs an odd kernel");
}

Tensor P4Lift::forward(const Tensor& x, Mode) { return p4::lift_conv(x, weight_, weight_.size(2) / 2); }

void P4Lift::collect(const std::string& prefix, std::vector<Param>& params, std::vector<Buffer>&) {
  params.push_back({prefix + "weight", weight_, ParamRole::weight, fan_in_});
}

P4GroupConv::P4GroupConv(std::size_t in_filters, std::size_t out_filters, std::size_t kernel)
    : weight_(parameter({out_filters, in_filters, 4, kernel, kernel})), fan_in_(in_filters * 4 * kernel * kernel) {
  if (kernel % 2 == 0) throw std::invalid_argument("P4GroupConv: same padding needs an odd kernel");
}

Tensor P4GroupConv::forward(const Tensor& x, Mode) { return p4::group_conv(x, weight_, weight_.size(3) / 2); }

void P4GroupConv::collect(const std::string& prefix, std::vector<Param>& params, std::vector<Buffer>&) {
  params.push_back({prefix + "weight", weight_, ParamRole::weight, fan_in_});
}

ScaleConv::ScaleConv(std::size_t in, std::size_t out, ScaleSet scales, std::size_t kernel)
    : weight_(parameter({out, in, kernel, kernel})), scales_(std::move(scales)), out_(out), fan_in_(in * kernel * kernel) {
  scales_.validate();
  if (!scales_.branch_weights.empty()) {
    branch_weights_ = Tensor(Shape{scales_.size()}, scales_.branch_weights);
    branch_weights_.mark_parameter();
  }
}

Tensor ScaleConv::forward(const Tensor& x, Mode) { return scale_conv(x, weight_, scales_, branch_weights_); }

void ScaleConv::collect(const std::string& prefix, std::vector<Param>& params, std::vector<Buffer>&) {
  params.push_back({prefix + "weight", weight_, ParamRole::weight, fan_in_});
  if (branch_weights_.defined()) {
    params.push_back({prefix + "branch_weights", branch_weights_, ParamRole::branch_weights, 1});
  }
}

std::size_t ScaleConv::out_channels() const {
  const bool concat = scales_.branch_weights.empty() && scales_.aggregation == Aggregation::concat;
  return concat ? out_ * scales_.size() : out_;
}

Parallel::Parallel(std::vector<std::unique_ptr<Sequential>> branches, FuseMode mode)
    : branches_(std::move(branches)), mode_(mode) {
  if (branches_.empty()) throw std::invalid_argument("Parallel: no branches");
  if (mode_ == FuseMode::weighted_sum) theta_ = parameter({branches_.size()}, 0.0);
}

Tensor Parallel::forward(const Tensor& x, Mode mode) {
  std::vector<Tensor> outs;
  outs.reserve(branches_.size());
  for (auto& b : branches_) outs.push_back(b->forward(x, mode));
  return fuse(outs, mode_, theta_);
}

void Parallel::collect(const std::string& prefix, std::vector<Param>& params, std::vector<Buffer>& buffers) {
  for (std::size_t i = 0; i < branches_.size(); ++i) {
    branches_[i]->collect(prefix + "branch" + std::to_string(i) + ".", params, buffers);
  }
  if (theta_.defined()) params.push_back({prefix + "fusion_logits", theta_, ParamRole::fusion_logits, 1});
}

std::vector<const Layer*> Parallel::children() const {
  std::vector<const Layer*> out;
  for (const auto& b : branches_) out.push_back(b.get());
  return out;
}

std::vector<double> Parallel::fusion_weights() const {
  if (!theta_.defined()) return {};
  const Tensor s = ops::softmax(theta_.detach());
  return {s.data().begin(), s.data().end()};
}

Tensor Flatten::forward(const Tensor& x, Mode) {
  if (x.dim() < 1) throw ShapeError("Flatten: scalar input");
  return ops::reshape(x, {x.size(0), x.numel() / std::max<std::size_t>(x.size(0), 1)});
}

Dense::Dense(std::size_t in, std::size_t out)
    : weight_(parameter({out, in})), bias_(parameter({out})), fan_in_(in) {}

Tensor Dense::forward(const Tensor& x, Mode) { return ops::linear(x, weight_, bias_); }

void Dense::collect(const std::string& prefix, std::vector<Param>& params, std::vector<Buffer>&) {
  params.push_back({prefix + "weight", weight_, ParamRole::weight, fan_in_});
  params.push_back({prefix + "bias", bias_, ParamRole::bias, fan_in_});
}

}  // namespace equirobust::nn

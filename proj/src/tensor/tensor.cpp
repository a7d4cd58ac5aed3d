#include "equirobust/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace equirobust {

namespace {
thread_local bool g_params_frozen = false;
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

namespace detail {

bool participates(const TensorImpl& t) {
  if (t.grad_fn) return true;
  if (!t.requires_grad) return false;
  return !(t.is_parameter && g_params_frozen);
}

namespace {

Tensor finish(Shape shape, std::vector<double> data, const char* op,
              std::vector<std::shared_ptr<TensorImpl>> inputs, BackwardFn fn) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  if (impl->data.size() != shape_numel(impl->shape)) {
    throw ShapeError(std::string(op) + ": produced " + std::to_string(impl->data.size()) +
                     " values for shape " + shape_str(impl->shape));
  }
  std::vector<bool> needs(inputs.size());
  bool any = false;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    needs[i] = participates(*inputs[i]);
    any = any || needs[i];
  }
  if (any && fn) {
    auto node = std::make_shared<Node>();
    node->op = op;
    node->inputs = std::move(inputs);
    node->needs_grad = std::move(needs);
    node->backward = std::move(fn);
    impl->grad_fn = std::move(node);
  }
  return Tensor::from_impl(std::move(impl));
}

}  // namespace

Tensor make_result(Shape shape, std::vector<double> data, const char* op,
                   std::initializer_list<const Tensor*> inputs, BackwardFn fn) {
  std::vector<std::shared_ptr<TensorImpl>> impls;
  impls.reserve(inputs.size());
  for (const Tensor* t : inputs) impls.push_back(t->impl());
  return finish(std::move(shape), std::move(data), op, std::move(impls), std::move(fn));
}

Tensor make_result(Shape shape, std::vector<double> data, const char* op,
                   const std::vector<Tensor>& inputs, BackwardFn fn) {
  std::vector<std::shared_ptr<TensorImpl>> impls;
  impls.reserve(inputs.size());
  for (const Tensor& t : inputs) impls.push_back(t.impl());
  return finish(std::move(shape), std::move(data), op, std::move(impls), std::move(fn));
}

}  // namespace detail

Tensor::Tensor(Shape shape, double fill) : impl_(std::make_shared<detail::TensorImpl>()) {
  impl_->data.assign(shape_numel(shape), fill);
  impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : impl_(std::make_shared<detail::TensorImpl>()) {
  if (data.size() != shape_numel(shape)) {
    throw ShapeError("Tensor: " + std::to_string(data.size()) + " values do not fill shape " +
                     shape_str(shape));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

Tensor Tensor::from_impl(std::shared_ptr<detail::TensorImpl> impl) {
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

const Shape& Tensor::shape() const {
  if (!impl_) throw std::logic_error("Tensor: use of undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::size(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) {
    throw ShapeError("Tensor::size: axis " + std::to_string(axis) + " out of range for shape " +
                     shape_str(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::span<const double> Tensor::data() const {
  shape();
  return impl_->data;
}

std::span<double> Tensor::mutable_data() {
  shape();
  if (impl_->grad_fn) throw TapeError("Tensor::mutable_data: tensor is an interior tape node");
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("Tensor::item: shape " + shape_str(shape()) + " is not scalar");
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && (impl_->requires_grad || impl_->grad_fn); }

Tensor& Tensor::set_requires_grad(bool flag) {
  shape();
  if (impl_->grad_fn) throw TapeError("set_requires_grad: only leaves can be flagged");
  impl_->requires_grad = flag;
  return *this;
}

Tensor& Tensor::mark_parameter() {
  set_requires_grad(true);
  impl_->is_parameter = true;
  return *this;
}

bool Tensor::is_parameter() const { return impl_ && impl_->is_parameter; }

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw TapeError("Tensor::grad: no gradient has been computed for this tensor");
  return impl_->grad;
}

Tensor Tensor::grad_tensor() const {
  auto g = grad();
  return Tensor(impl_->shape, std::vector<double>(g.begin(), g.end()));
}

void Tensor::zero_grad() {
  if (impl_) impl_->grad.clear();
}

Tensor Tensor::detach() const { return Tensor(shape(), impl_->data); }

bool Tensor::is_leaf() const { return impl_ && !impl_->grad_fn; }

bool Tensor::all_finite() const {
  const auto d = data();
  return std::all_of(d.begin(), d.end(), [](double v) { return std::isfinite(v); });
}

void backward(const Tensor& loss) {
  using detail::TensorImpl;
  if (!loss.defined()) throw TapeError("backward: undefined loss");
  if (loss.numel() != 1) {
    throw TapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  TensorImpl* root = loss.impl().get();
  if (!root->grad_fn) {
    if (!root->requires_grad) throw TapeError("backward: loss does not depend on any gradient leaf");
    root->grad.assign(1, 1.0);
    return;
  }
  if (root->grad_fn->consumed) {
    throw TapeError("backward: tape already consumed; re-run the forward pass first");
  }

  // Iterative post-order DFS gives a topological order of the recorded graph.
  // Shared ownership keeps every impl alive while nodes drop their inputs.
  std::vector<std::shared_ptr<TensorImpl>> order;
  std::unordered_set<TensorImpl*> visited;
  std::vector<std::pair<std::shared_ptr<TensorImpl>, std::size_t>> stack;
  stack.emplace_back(loss.impl(), 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [t, next] = stack.back();
    const auto& node = t->grad_fn;
    if (node && next < node->inputs.size()) {
      const auto& child = node->inputs[next];
      const bool needed = node->needs_grad[next];
      ++next;
      if (needed && visited.insert(child.get()).second) stack.emplace_back(child, 0);
      continue;
    }
    if (node && node->consumed) {
      throw TapeError("backward: part of the tape (" + node->op + ") was already consumed");
    }
    order.push_back(t);
    stack.pop_back();
  }

  for (const auto& t : order) t->grad.assign(t->data.size(), 0.0);
  root->grad[0] = 1.0;

  std::vector<double*> sinks;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* t = it->get();
    auto node = t->grad_fn;
    if (!node) continue;
    sinks.assign(node->inputs.size(), nullptr);
    for (std::size_t i = 0; i < node->inputs.size(); ++i) {
      if (node->needs_grad[i]) sinks[i] = node->inputs[i]->grad.data();
    }
    node->backward(t->grad, sinks);
    node->consumed = true;
    node->backward = nullptr;
    node->inputs.clear();
    node->needs_grad.clear();
    if (t != root) {
      t->grad.clear();
      t->grad.shrink_to_fit();
    }
  }
}

FreezeParameters::FreezeParameters() : previous_(g_params_frozen) { g_params_frozen = true; }
FreezeParameters::~FreezeParameters() { g_params_frozen = previous_; }

bool parameters_frozen() { return g_params_frozen; }

}  // namespace equirobust

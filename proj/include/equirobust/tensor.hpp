#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace equirobust {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised when operand shapes do not conform; the message names the operation
/// and every offending shape.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a forward pass produces NaN or Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised on misuse of the differentiation tape (non-scalar loss, replay).
class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

namespace detail {

// Receives the upstream gradient of the node's output and one pointer per
// input: a zero-initialised accumulation buffer, or nullptr when that input
// does not take part in differentiation.
using BackwardFn =
    std::function<void(std::span<const double> grad_out, const std::vector<double*>& grad_in)>;

struct TensorImpl;

struct Node {
  std::string op;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::vector<bool> needs_grad;
  BackwardFn backward;
  bool consumed = false;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  bool is_parameter = false;
  std::shared_ptr<Node> grad_fn;
};

bool participates(const TensorImpl& t);

}  // namespace detail

/// Dense float64 array with optional participation in reverse-mode
/// differentiation. Copies are cheap handles sharing one buffer; results of
/// operations are never mutated after construction.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t size(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  /// Mutable access is limited to graph leaves (parameters, inputs, buffers).
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);
  /// Parameters stop recording while a FreezeParameters guard is alive.
  Tensor& mark_parameter();
  bool is_parameter() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  Tensor grad_tensor() const;
  void zero_grad();

  /// A leaf copy of the values with no history.
  Tensor detach() const;
  bool is_leaf() const;
  bool all_finite() const;

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  static Tensor from_impl(std::shared_ptr<detail::TensorImpl> impl);

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Runs the adjoint replay from a scalar loss. Every reachable leaf that
/// requires gradients has its grad overwritten with d(loss)/d(leaf). The
/// recorded graph is consumed: a second call on the same loss throws.
void backward(const Tensor& loss);

/// While alive on the current thread, parameter leaves are treated as
/// constants: no tape entries are recorded for them and their grads are left
/// untouched. Used by attacks and certification, which only need input
/// gradients and may run concurrently over shared parameters.
class FreezeParameters {
 public:
  FreezeParameters();
  ~FreezeParameters();
  FreezeParameters(const FreezeParameters&) = delete;
  FreezeParameters& operator=(const FreezeParameters&) = delete;

 private:
  bool previous_;
};

bool parameters_frozen();

namespace detail {

Tensor make_result(Shape shape, std::vector<double> data, const char* op,
                   std::initializer_list<const Tensor*> inputs, BackwardFn fn);
Tensor make_result(Shape shape, std::vector<double> data, const char* op,
                   const std::vector<Tensor>& inputs, BackwardFn fn);

}  // namespace detail

}  // namespace equirobust

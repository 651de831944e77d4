#pragma once

// Reverse-mode differentiation over dense tensors.
//
// The graph is dynamic: every primitive call evaluates eagerly and, when any
// input requires a gradient, records a node holding a backward closure. Node
// ids grow monotonically, so sorting by id gives a topological order and the
// backward sweep accumulates gradients in a fixed order.

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "qcaps/tensor.hpp"

namespace qcaps {

template <typename Scalar>
struct Node {
  Tensor<Scalar> value;
  /// Empty until a gradient reaches this node.
  Tensor<Scalar> grad;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  std::uint64_t id = 0;
  bool requires_grad = false;

  Tensor<Scalar>& grad_ref();
  bool has_grad() const { return !grad.empty(); }
};

std::uint64_t next_node_id();

/// Thread-local switch; while disabled no backward closures are recorded.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool on);
};

class NoGradGuard {
 public:
  NoGradGuard() : previous_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename Scalar>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<Scalar> value, bool requires_grad = false);
  explicit Var(std::shared_ptr<Node<Scalar>> node) : node_(std::move(node)) {}

  bool defined() const { return node_ != nullptr; }
  const Tensor<Scalar>& value() const { return node_->value; }
  Tensor<Scalar>& mutable_value() { return node_->value; }
  const Tensor<Scalar>& grad() const { return node_->grad; }
  const Shape& shape() const { return node_->value.shape(); }
  Index dim(int axis) const { return node_->value.dim(axis); }
  int ndim() const { return node_->value.ndim(); }
  bool requires_grad() const { return node_->requires_grad; }
  const std::shared_ptr<Node<Scalar>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<Scalar>> node_;
};

/// Builds the result node of a primitive. `backward` receives the result node
/// and is only kept when grad mode is on and some input requires a gradient.
template <typename Scalar>
Var<Scalar> make_op(Tensor<Scalar> value, std::vector<Var<Scalar>> inputs, std::function<void(Node<Scalar>&)> backward);

/// Adds `g` into the gradient of `v` if it requires one.
template <typename Scalar>
void accumulate(const Var<Scalar>& v, const Tensor<Scalar>& g);

template <typename Scalar>
struct Parameter {
  std::string name;
  Var<Scalar> var;
  bool trainable = true;
};

/// Ordered, name-unique collection of parameters (trainable or buffers).
template <typename Scalar>
class ParameterStore {
 public:
  Var<Scalar> add(const std::string& name, Tensor<Scalar> value, bool trainable = true);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Parameter<Scalar>& get(const std::string& name);
  const Parameter<Scalar>& get(const std::string& name) const;
  Var<Scalar> var(const std::string& name) const { return get(name).var; }
  std::vector<Parameter<Scalar>>& all() { return params_; }
  const std::vector<Parameter<Scalar>>& all() const { return params_; }
  Index trainable_count() const;
  void zero_grad();

 private:
  std::vector<Parameter<Scalar>> params_;
  std::map<std::string, std::size_t> index_;
};

template <typename Scalar>
using GradientMap = std::map<std::string, Tensor<Scalar>>;

/// Runs the backward sweep from a scalar `loss`, accumulating into every
/// reachable leaf. Throws NonScalarLoss for non-scalar input.
template <typename Scalar>
void backward(const Var<Scalar>& loss);

/// Clears parameter gradients, backpropagates `loss` and returns one gradient
/// per trainable parameter (zeros when unreachable).
template <typename Scalar>
GradientMap<Scalar> backpropagate(const Var<Scalar>& loss, ParameterStore<Scalar>& params);

// ---------------------------------------------------------------------------
// Primitives. Binary element-wise ops broadcast with numpy rules.

template <typename Scalar> Var<Scalar> constant(Tensor<Scalar> value);

template <typename Scalar> Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar> Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar> Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar> Var<Scalar> div(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar> Var<Scalar> neg(const Var<Scalar>& a);
template <typename Scalar> Var<Scalar> add_scalar(const Var<Scalar>& a, Scalar s);
template <typename Scalar> Var<Scalar> mul_scalar(const Var<Scalar>& a, Scalar s);

template <typename Scalar> Var<Scalar> relu(const Var<Scalar>& a);
template <typename Scalar> Var<Scalar> sigmoid(const Var<Scalar>& a);
template <typename Scalar> Var<Scalar> log(const Var<Scalar>& a);
template <typename Scalar> Var<Scalar> exp(const Var<Scalar>& a);
template <typename Scalar> Var<Scalar> sqrt(const Var<Scalar>& a);
template <typename Scalar> Var<Scalar> square(const Var<Scalar>& a);
template <typename Scalar> Var<Scalar> cos(const Var<Scalar>& a);
template <typename Scalar> Var<Scalar> sin(const Var<Scalar>& a);

/// a: [..., m, k], b: [..., k, n] with equal batch dims, or b: [k, n] shared.
template <typename Scalar> Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b);

/// 2-D cross-correlation. x: [n, c, h, w], w: [o, c, kh, kw]; output
/// [n, o, (h + 2p - kh) / s + 1, (w + 2p - kw) / s + 1].
template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& w, Index stride, Index padding);

/// Output extent of conv2d along one spatial axis.
Index conv_output_extent(Index in, Index kernel, Index stride, Index padding);

template <typename Scalar> Var<Scalar> permute(const Var<Scalar>& a, const std::vector<int>& axes);
template <typename Scalar> Var<Scalar> reshape(const Var<Scalar>& a, Shape shape);
template <typename Scalar> Var<Scalar> slice(const Var<Scalar>& a, int axis, Index start, Index end);
template <typename Scalar> Var<Scalar> concat(const std::vector<Var<Scalar>>& parts, int axis);
template <typename Scalar>
Var<Scalar> index_select(const Var<Scalar>& a, int axis, const std::vector<Index>& indices);
template <typename Scalar> Var<Scalar> broadcast_to(const Var<Scalar>& a, const Shape& shape);

/// Softmax along `axis`, computed from max-shifted exponentials.
template <typename Scalar> Var<Scalar> softmax(const Var<Scalar>& a, int axis);

template <typename Scalar> Var<Scalar> sum(const Var<Scalar>& a, int axis, bool keepdim = false);
template <typename Scalar> Var<Scalar> mean(const Var<Scalar>& a, int axis, bool keepdim = false);
/// Gradient flows to the first maximal element along `axis`.
template <typename Scalar> Var<Scalar> max(const Var<Scalar>& a, int axis, bool keepdim = false);
template <typename Scalar> Var<Scalar> sum_all(const Var<Scalar>& a);
template <typename Scalar> Var<Scalar> mean_all(const Var<Scalar>& a);

template <typename Scalar> Var<Scalar> operator+(const Var<Scalar>& a, const Var<Scalar>& b) { return add(a, b); }
template <typename Scalar> Var<Scalar> operator-(const Var<Scalar>& a, const Var<Scalar>& b) { return sub(a, b); }
template <typename Scalar> Var<Scalar> operator*(const Var<Scalar>& a, const Var<Scalar>& b) { return mul(a, b); }
template <typename Scalar> Var<Scalar> operator/(const Var<Scalar>& a, const Var<Scalar>& b) { return div(a, b); }
template <typename Scalar> Var<Scalar> operator-(const Var<Scalar>& a) { return neg(a); }

}  // namespace qcaps

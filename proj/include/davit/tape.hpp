#pragma once

// Reverse-mode autodiff tape. Ops evaluate eagerly, producing a node holding
// the result tensor; ops that need gradients also record a closure that, given
// the node's output gradient, accumulates into its inputs' gradients. backward
// replays closures in strict reverse recording order, so accumulation order is
// deterministic. A tape is single-use: rerunning backward without re-recording
// is an error by contract.

#include <functional>
#include <utility>
#include <vector>

#include "tensor.hpp"

namespace davit {

// Handle into one tape. Values from different tapes must not be mixed.
struct Value {
  int32_t id = -1;
};

template <typename T>
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  size_t size() const { return nodes_.size(); }

  // Record an input tensor. requires_grad marks it as a differentiation target.
  Value leaf(Tensor<T> v, bool requires_grad = false) {
    return push(std::move(v), requires_grad, nullptr);
  }

  // Record an op result. Called by ops; `backprop` may be null when no input
  // needs gradients (the node is then constant w.r.t. all targets).
  Value push(Tensor<T> v, bool requires_grad, std::function<void(Tape&)> backprop) {
    const bool rg = grad_enabled_ && requires_grad;
    nodes_.push_back(Node{std::move(v), Tensor<T>{}, rg ? std::move(backprop) : nullptr, false, rg});
    return Value{static_cast<int32_t>(nodes_.size() - 1)};
  }

  const Tensor<T>& value(Value v) const { return node(v).value; }
  bool requires_grad(Value v) const { return node(v).requires_grad; }
  bool has_grad(Value v) const { return node(v).has_grad; }

  // Gradient buffer for a node, zero-allocated on first touch. Backprop
  // closures add into these.
  Tensor<T>& grad_buffer(Value v) {
    Node& n = node(v);
    if (!n.has_grad) {
      n.grad = Tensor<T>(n.value.shape);
      n.has_grad = true;
    }
    return n.grad;
  }

  // Elementwise-add a delta into a node's gradient (shapes must match).
  void accumulate(Value v, const Tensor<T>& delta) {
    Tensor<T>& g = grad_buffer(v);
    if (!g.same_shape(delta))
      throw ShapeError("Tape::accumulate: gradient shape " + shape_str(delta.shape) +
                       " vs value shape " + shape_str(g.shape));
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += delta[i];
  }

  const Tensor<T>& grad(Value v) const {
    if (!backward_done_) throw NumericError("Tape::grad: backward has not been run");
    const Node& n = node(v);
    if (!n.has_grad)
      throw NumericError("Tape::grad: no gradient flowed to this node");
    return n.grad;
  }

  // Gradient if any reached the node, else zeros (disconnected subgraph).
  Tensor<T> grad_or_zeros(Value v) const {
    const Node& n = node(v);
    if (backward_done_ && n.has_grad) return n.grad;
    return Tensor<T>(n.value.shape);
  }

  void backward(Value loss) {
    if (backward_done_)
      throw NumericError("Tape::backward: tape already consumed; record a fresh graph first");
    if (!grad_enabled_)
      throw NumericError("Tape::backward: tape was created with gradients disabled");
    if (node(loss).value.numel() != 1)
      throw ShapeError("Tape::backward: loss must be a scalar, got shape " +
                       shape_str(node(loss).value.shape));
    grad_buffer(loss)[0] = T(1);
    for (int32_t i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (n.backprop && n.has_grad) n.backprop(*this);
    }
    backward_done_ = true;
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::function<void(Tape&)> backprop;
    bool has_grad = false;
    bool requires_grad = false;
  };

  Node& node(Value v) {
    if (v.id < 0 || static_cast<size_t>(v.id) >= nodes_.size())
      throw ShapeError("Tape: invalid value handle");
    return nodes_[static_cast<size_t>(v.id)];
  }
  const Node& node(Value v) const {
    return const_cast<Tape*>(this)->node(v);
  }

  std::vector<Node> nodes_;
  bool grad_enabled_;
  bool backward_done_ = false;
};

}  // namespace davit

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "capsf/error.hpp"

namespace capsf {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

namespace detail {

// One value in the computation graph. Leaves have no inputs; op results
// keep their inputs alive and know how to push their gradient into them.
template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  bool is_leaf() const { return inputs.empty(); }

  std::vector<T>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

/// Dense row-major N-dimensional array with optional gradient tracking.
///
/// Copies share storage: a Tensor is a handle. Values produced by ops are
/// never written to afterwards, so untracked tensors behave as immutable
/// values; only the optimizer mutates parameter leaves in place.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node<T>>()) {
    for (auto d : shape) {
      if (d == 0) throw UsageError("tensor dimensions must be positive, got " + shape_str(shape));
    }
    if (shape_numel(shape) != data.size()) {
      throw UsageError(detail::concat("tensor data length ", data.size(),
                                      " does not match shape ", shape_str(shape)));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  static Tensor from_node(NodePtr node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  // Mutable access for parameter updates and initialization.
  std::span<T> mutable_data() { return node_->data; }
  const std::vector<T>& values() const { return node_->data; }

  T item() const {
    if (numel() != 1) throw UsageError("item() requires a single-element tensor, got " + shape_str(shape()));
    return node_->data[0];
  }
  T operator[](std::size_t i) const { return node_->data[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }

  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const T> grad() const {
    if (!has_grad()) node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.assign(node_->data.size(), T(0)); }

  // A new leaf holding a copy of the values, detached from any graph.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }

  const std::string& op_name() const { return node_->op; }
  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

namespace detail {

template <typename T>
void require_finite(const Node<T>& node) {
  for (const T& v : node.data) {
    if (!std::isfinite(v)) throw NumericalError("non-finite value produced by op '" + node.op + "'");
  }
}

// Wraps freshly computed values into a graph node. The backward closure is
// attached only when some input tracks gradients.
template <typename T>
Tensor<T> make_result(std::string op, Shape shape, std::vector<T> data,
                      std::vector<std::shared_ptr<Node<T>>> inputs,
                      std::function<void(Node<T>&)> backward) {
  auto node = std::make_shared<Node<T>>();
  node->op = std::move(op);
  node->shape = std::move(shape);
  node->data = std::move(data);
  require_finite(*node);
  bool tracked = std::any_of(inputs.begin(), inputs.end(),
                             [](const auto& in) { return in->requires_grad; });
  if (tracked) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
  }
  return Tensor<T>::from_node(std::move(node));
}

}  // namespace detail

/// Ordered record of the differentiable ops that produced a value, in
/// execution (topological) order. Leaves are excluded.
template <typename T>
class Graph {
 public:
  explicit Graph(const Tensor<T>& output) {
    using NodePtr = std::shared_ptr<detail::Node<T>>;
    std::unordered_set<const detail::Node<T>*> seen;
    // Iterative post-order DFS; recursion depth would track graph depth.
    std::vector<std::pair<NodePtr, std::size_t>> stack;
    if (output.node()->requires_grad) stack.emplace_back(output.node(), 0);
    seen.insert(output.node().get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        const NodePtr& in = node->inputs[next++];
        if (in->requires_grad && seen.insert(in.get()).second) stack.emplace_back(in, 0);
        continue;
      }
      if (!node->is_leaf()) ops_.push_back(node);
      stack.pop_back();
    }
  }

  const std::vector<std::shared_ptr<detail::Node<T>>>& ops() const { return ops_; }

 private:
  std::vector<std::shared_ptr<detail::Node<T>>> ops_;
};

/// Reverse-mode pass from a scalar. Leaf gradients accumulate across calls;
/// intermediate gradients are recomputed from zero each time.
template <typename T>
void backward(const Tensor<T>& output) {
  if (!output.defined() || output.numel() != 1) {
    throw UsageError("backward() requires a scalar output, got " +
                     (output.defined() ? shape_str(output.shape()) : std::string("undefined")));
  }
  if (!output.requires_grad()) throw UsageError("backward() on a value that does not require grad");
  Graph<T> graph(output);
  for (const auto& node : graph.ops()) node->grad.assign(node->data.size(), T(0));
  auto& root = output.node();
  if (root->is_leaf()) {
    root->ensure_grad()[0] += T(1);
    return;
  }
  root->grad[0] = T(1);
  const auto& ops = graph.ops();
  for (auto it = ops.rbegin(); it != ops.rend(); ++it) {
    auto& node = **it;
    if (node.backward) node.backward(node);
  }
}

}  // namespace capsf

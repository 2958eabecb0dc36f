#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "wmhseg/tensor.hpp"

namespace wmhseg {

namespace detail {
inline std::uint64_t next_node_sequence() {
  static std::atomic<std::uint64_t> counter{0};
  return counter.fetch_add(1, std::memory_order_relaxed);
}
}  // namespace detail

template <std::floating_point T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::uint64_t sequence = 0;
  std::string op;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into parents' grads.
  std::function<void(Node&)> backward_fn;

  Tensor<T>& grad_buffer() {
    if (grad.empty() && !value.empty()) grad = Tensor<T>::zeros(value.shape());
    return grad;
  }
};

/// Handle to a node of the differentiation graph. Copies share the node.
template <std::floating_point T>
class Var {
 public:
  using NodePtr = std::shared_ptr<Node<T>>;

  Var() = default;
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  static Var leaf(Tensor<T> value, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    n->sequence = detail::next_node_sequence();
    n->op = "leaf";
    return Var(std::move(n));
  }

  static Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

  bool defined() const noexcept { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(int axis) const { return node_->value.dim(axis); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  bool has_grad() const noexcept { return node_ && !node_->grad.empty(); }
  const Tensor<T>& grad() const { return node_->grad; }
  const std::string& op() const { return node_->op; }
  void zero_grad() { node_->grad = Tensor<T>(); }

  NodePtr node() const noexcept { return node_; }

 private:
  NodePtr node_;
};

/// Creates an op result. The backward closure is kept only when some input
/// requires a gradient, so inference builds no graph.
template <std::floating_point T>
Var<T> make_result(std::string op, Tensor<T> value, std::vector<Var<T>> inputs,
                   std::function<void(Node<T>&)> backward_fn) {
  value.require_finite(op);
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->sequence = detail::next_node_sequence();
  n->op = std::move(op);
  const bool track = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Var<T>& v) { return v.requires_grad(); });
  if (track) {
    n->requires_grad = true;
    n->parents.reserve(inputs.size());
    for (auto& in : inputs) n->parents.push_back(in.node());
    n->backward_fn = std::move(backward_fn);
  }
  return Var<T>(std::move(n));
}

/// The executed operations reachable from a root, in execution order.
/// Replaying backward visits each node once, consumers before producers.
template <std::floating_point T>
class GradTape {
 public:
  static GradTape record(const Var<T>& root) {
    GradTape tape;
    std::unordered_set<Node<T>*> seen;
    std::vector<Node<T>*> stack{root.node().get()};
    while (!stack.empty()) {
      Node<T>* n = stack.back();
      stack.pop_back();
      if (!n->requires_grad || !seen.insert(n).second) continue;
      tape.nodes_.push_back(n);
      for (auto& p : n->parents) stack.push_back(p.get());
    }
    // A node is always created after its inputs, so creation order is topological.
    std::sort(tape.nodes_.begin(), tape.nodes_.end(),
              [](const Node<T>* a, const Node<T>* b) { return a->sequence < b->sequence; });
    return tape;
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  const std::vector<Node<T>*>& nodes() const noexcept { return nodes_; }

  /// Runs backward closures newest-first. Returns the visit order.
  std::vector<const Node<T>*> replay() {
    std::vector<const Node<T>*> visited;
    visited.reserve(nodes_.size());
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node<T>* n = *it;
      visited.push_back(n);
      if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
    return visited;
  }

 private:
  std::vector<Node<T>*> nodes_;
};

/// Accumulates d(root)/d(leaf) into every tracked leaf reachable from root.
template <std::floating_point T>
void backward(const Var<T>& root, const Tensor<T>& seed) {
  if (!root.defined()) throw UsageError("backward on an undefined variable");
  if (seed.shape() != root.shape()) {
    throw UsageError("seed gradient shape " + shape_str(seed.shape()) + " differs from output " +
                     shape_str(root.shape()));
  }
  if (!root.requires_grad()) throw UsageError("backward on a graph with no tracked inputs");
  root.node()->grad_buffer() += seed;
  GradTape<T>::record(root).replay();
}

template <std::floating_point T>
void backward(const Var<T>& root) {
  if (!root.defined()) throw UsageError("backward on an undefined variable");
  if (root.size() != 1) {
    throw UsageError("backward needs a scalar output or an explicit seed gradient; got shape " +
                     shape_str(root.shape()));
  }
  backward(root, Tensor<T>::ones(root.shape()));
}

/// Accumulation helper for backward closures.
template <std::floating_point T>
inline void accumulate(const std::shared_ptr<Node<T>>& target, const Tensor<T>& g) {
  if (target->requires_grad) target->grad_buffer() += g;
}

}  // namespace wmhseg

#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "hand/core/tensor.hpp"

namespace hand {

// Define-by-run reverse-mode autodiff over whole tensors. Ops are coarse
// (conv, gemm, norm, ...), so graphs stay small: one node per layer-ish op.
struct Node {
  Tensor value;
  Tensor grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad, accumulates into parents' grads.
  std::function<void(Node&)> backward_fn;

  Tensor& ensure_grad() {
    if (grad.empty() && value.numel() > 0) grad = Tensor(value.shape());
    return grad;
  }
};

using NodePtr = std::shared_ptr<Node>;

class Var {
public:
  Var() = default;
  explicit Var(NodePtr n) : node_(std::move(n)) {}

  static Var leaf(Tensor value, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
  }

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& value() { return node_->value; }
  Tensor& grad() { return node_->ensure_grad(); }
  const Tensor& grad() const { return node_->grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const NodePtr& node() const { return node_; }

  void zero_grad() {
    if (node_ && !node_->grad.empty()) node_->grad.fill(0.0f);
  }

  float scalar() const {
    assert(node_ && node_->value.numel() == 1);
    return node_->value[0];
  }

private:
  NodePtr node_;
};

namespace detail {

inline void topo_collect(const NodePtr& root, std::vector<Node*>& order) {
  // Iterative post-order DFS; graphs are shallow but wide enough that
  // recursion depth is not a concern either way.
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && !visited.count(parent)) {
        visited.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
}

}  // namespace detail

// Backpropagates from a scalar root. Leaves accumulate into .grad; call
// zero_grad on parameters between steps.
inline void backward(const Var& root) {
  assert(root.defined() && root.value().numel() == 1);
  if (!root.requires_grad()) return;
  std::vector<Node*> order;
  detail::topo_collect(root.node(), order);
  root.node()->ensure_grad();
  root.node()->grad[0] += 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

// Helper for op implementations: make a node from parents.
inline Var make_op(Tensor value, std::vector<NodePtr> parents,
                   std::function<void(Node&)> backward_fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->parents = std::move(parents);
  for (const auto& p : n->parents)
    if (p->requires_grad) n->requires_grad = true;
  if (n->requires_grad) n->backward_fn = std::move(backward_fn);
  return Var(std::move(n));
}

inline void accumulate(Node& target, const Tensor& delta) {
  Tensor& g = target.ensure_grad();
  assert(g.same_shape(delta));
  const float* src = delta.data();
  float* dst = g.data();
  for (std::int64_t i = 0; i < delta.numel(); ++i) dst[i] += src[i];
}

}  // namespace hand

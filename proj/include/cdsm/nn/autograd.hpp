// Copyright 2026 The cdsm-fusion Authors
// SPDX-License-Identifier: Apache-2.0
//
// Define-by-run reverse-mode differentiation over Tensor values.

#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cdsm/tensor.hpp"

namespace cdsm::nn {

struct Node {
  Tensor value;
  Tensor grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  bool has_grad() const { return grad.size() == value.size() && grad.shape() == value.shape(); }

  Tensor& grad_buffer() {
    if (!has_grad()) {
      grad = Tensor(value.shape());
    }
    return grad;
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var constant(Tensor t) {
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    return Var(std::move(n));
  }

  static Var leaf(Tensor t, bool requires_grad = true) {
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  Index dim(std::size_t axis) const { return node_->value.dim(axis); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  // Gradient after backward(); zeros when nothing flowed here.
  Tensor grad() const {
    if (!node_->has_grad()) {
      return Tensor(node_->value.shape());
    }
    return node_->grad;
  }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Creates an op node. `backward` reads self.grad and accumulates into the
/// parents' grad buffers; it only runs when some parent requires grad.
inline Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  for (const Var& p : parents) {
    if (p.requires_grad()) {
      n->requires_grad = true;
    }
    n->parents.push_back(p.shared());
  }
  if (n->requires_grad) {
    n->backward = std::move(backward);
  } else {
    n->parents.clear();
  }
  return Var(std::move(n));
}

/// Reverse sweep from `root`, seeded with `seed` (ones when omitted).
inline void backward(const Var& root, const Tensor* seed = nullptr) {
  if (!root.requires_grad()) {
    return;
  }
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) {
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  Tensor& g = root.node()->grad_buffer();
  if (seed != nullptr) {
    require_same_shape(g, *seed, "backward seed");
    for (Index i = 0; i < g.size(); ++i) {
      g[i] += (*seed)[i];
    }
  } else {
    for (double& v : g.values()) {
      v += 1.0;
    }
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->has_grad()) {
      n->backward(*n);
    }
  }
}

inline Tensor& grad_of(const std::shared_ptr<Node>& n) { return n->grad_buffer(); }

}  // namespace cdsm::nn

// Copyright (c) 2026 the tan authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "tan/tensor.hpp"

namespace tan {

/// Reverse-mode autodiff node. A forward pass builds a fresh graph of Vars;
/// backward() walks it once in reverse topological order. Parameters are
/// long-lived Vars with requires_grad set; everything else is released with
/// the graph.
template <class T>
class Var {
 public:
  Tensor<T> value;
  Tensor<T> grad;  // allocated lazily by backward
  bool requires_grad = false;
  std::vector<std::shared_ptr<Var>> parents;
  std::function<void(Var&)> backward_fn;  // accumulates into parents' grads

  Var() = default;
  explicit Var(Tensor<T> v, bool rg = false) : value(std::move(v)), requires_grad(rg) {}

  void ensure_grad() {
    if (grad.shape != value.shape) grad = Tensor<T>::zeros(value.shape);
  }
  void zero_grad() {
    if (grad.shape == value.shape)
      std::fill(grad.data.begin(), grad.data.end(), T(0));
  }
  int64_t numel() const { return value.numel(); }
};

template <class T>
using VarPtr = std::shared_ptr<Var<T>>;

template <class T>
VarPtr<T> make_var(Tensor<T> v, bool requires_grad = false) {
  return std::make_shared<Var<T>>(std::move(v), requires_grad);
}

template <class T>
VarPtr<T> constant(Tensor<T> v) {
  return make_var<T>(std::move(v), false);
}

namespace detail {
template <class T>
void topo_visit(Var<T>* node, std::unordered_set<Var<T>*>& seen,
                std::vector<Var<T>*>& order) {
  // Iterative DFS; graphs can be a few hundred nodes deep.
  struct Frame {
    Var<T>* node;
    size_t next_child;
  };
  std::vector<Frame> stack{{node, 0}};
  seen.insert(node);
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_child < f.node->parents.size()) {
      Var<T>* child = f.node->parents[f.next_child++].get();
      if (!seen.count(child)) {
        seen.insert(child);
        stack.push_back({child, 0});
      }
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }
}
}  // namespace detail

/// Backpropagate from a scalar root (numel == 1).
template <class T>
void backward(const VarPtr<T>& root) {
  TAN_CHECK(root->numel() == 1, "backward root must be scalar");
  std::unordered_set<Var<T>*> seen;
  std::vector<Var<T>*> order;
  detail::topo_visit(root.get(), seen, order);
  root->ensure_grad();
  root->grad.data[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Var<T>* v = *it;
    if (v->backward_fn && v->grad.shape == v->value.shape) v->backward_fn(*v);
  }
}

}  // namespace tan

#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "chainseg/core/tensor.hpp"

namespace chainseg {

// Reverse-mode tape. Every op allocates an output Node whose backward_fn
// scatters the output gradient into the input nodes' gradients. The graph is
// a DAG held alive by shared_ptr edges from consumer to producer, so dropping
// the loss node frees the whole forward pass.
template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  bool grad_ready = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;
  std::string name;

  Tensor<T>& ensure_grad() {
    if (!grad_ready) {
      grad = Tensor<T>::zeros(value.shape());
      grad_ready = true;
    }
    return grad;
  }

  void drop_grad() {
    grad = Tensor<T>();
    grad_ready = false;
  }
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

// Disables graph construction for the enclosing scope (inference paths).
class NoGrad {
 public:
  NoGrad() : prev_(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGrad() { grad_mode_flag() = prev_; }
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;

 private:
  bool prev_;
};

template <typename T>
Var<T> make_var(Tensor<T> value, bool requires_grad = false, std::string name = "") {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  n->name = std::move(name);
  return n;
}

template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> inputs,
               std::function<void(Node<T>&)> backward_fn) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  bool need = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) need = need || (in && in->requires_grad);
  }
  n->requires_grad = need;
  if (need) {
    n->inputs = std::move(inputs);
    n->backward_fn = std::move(backward_fn);
  }
  return n;
}

// Reverse-topological traversal from root. Seeds the root gradient with ones
// (the usual case is a scalar loss). Gradients accumulate; callers zero
// parameter gradients between steps.
template <typename T>
void backward(const Var<T>& root) {
  CS_CHECK(root, "backward: null root");
  CS_CHECK(root->requires_grad, "backward: root does not require gradients");

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->inputs.size()) {
      Node<T>* next = node->inputs[idx].get();
      ++idx;
      if (next && next->requires_grad && !seen.count(next)) {
        seen.insert(next);
        stack.emplace_back(next, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad().fill(T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && n->grad_ready) n->backward_fn(*n);
  }
}

}  // namespace chainseg

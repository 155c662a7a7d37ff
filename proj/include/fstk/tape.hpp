#pragma once

#include <functional>
#include <utility>
#include <vector>

#ifdef FSTK_PROFILE_TAPE
#include <chrono>
#include <cstdio>
#include <map>
#endif

#include "fstk/tensor.hpp"

namespace fstk {

#ifdef FSTK_PROFILE_TAPE
namespace detail {
inline std::map<std::string, double>& pull_profile() {
  static std::map<std::string, double> m;
  return m;
}
inline void dump_pull_profile() {
  double total = 0;
  for (auto& [op, s] : pull_profile()) total += s;
  std::printf("-- backward profile (total %.3f s) --\n", total);
  for (auto& [op, s] : pull_profile()) std::printf("  %-16s %8.3f s\n", op.c_str(), s);
  pull_profile().clear();
}
}  // namespace detail
#endif

template <typename T>
class Tape;

// Lightweight handle to a tape node.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  const Tensor<T>& value() const { return tape->node(id).value; }
  bool valid() const { return tape != nullptr && id >= 0; }
};

using Var64 = Var<double>;

template <typename T>
struct TapeNode {
  const char* op = "leaf";
  std::vector<int> parents;
  Tensor<T> value;
  Tensor<T> grad;  // allocated on first contribution during backward
  bool requires_grad = false;
  bool has_grad = false;
  // Backward rule: reads this node's grad, accumulates into parents'.
  // Saved activations (argmax maps, batch statistics, ...) are captured
  // inside the closure.
  std::function<void(Tape<T>&, const TapeNode<T>&)> pull;
};

// Record of one forward evaluation. Nodes are appended in evaluation order,
// so the tape is acyclic and topologically ordered by construction.
template <typename T>
class Tape {
 public:
  Tape() { detail::tune_allocator(); }

  Var<T> leaf(Tensor<T> value, bool requires_grad) {
    check_arg(!consumed_, "tape already consumed by backward(); reset() it first");
    TapeNode<T> n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  Var<T> emit(const char* op, Tensor<T> value, std::vector<int> parents,
              std::function<void(Tape<T>&, const TapeNode<T>&)> pull) {
    check_arg(!consumed_, "tape already consumed by backward(); reset() it first");
    TapeNode<T> n;
    n.op = op;
    n.value = std::move(value);
    n.parents = std::move(parents);
    for (int p : n.parents) n.requires_grad |= nodes_[static_cast<size_t>(p)].requires_grad;
    if (n.requires_grad) n.pull = std::move(pull);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  TapeNode<T>& node(int id) { return nodes_[static_cast<size_t>(id)]; }
  const TapeNode<T>& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
  int size() const { return static_cast<int>(nodes_.size()); }

  // Accumulate g into node id's gradient buffer.
  void accumulate(int id, const Tensor<T>& g) {
    TapeNode<T>& n = node(id);
    if (!n.requires_grad) return;
    if (!n.has_grad) {
      n.grad = Tensor<T>::zeros_like(n.value);
      n.has_grad = true;
    }
    T* dst = n.grad.data();
    const T* src = g.data();
    const long long m = n.grad.numel();
    for (long long i = 0; i < m; ++i) dst[i] += src[i];
  }

  Tensor<T>& grad_buf(int id) {
    TapeNode<T>& n = node(id);
    if (!n.has_grad) {
      n.grad = Tensor<T>::zeros_like(n.value);
      n.has_grad = true;
    }
    return n.grad;
  }

  // Reverse sweep from a scalar root. Exact gradients land on every
  // requires-grad leaf reachable from the root.
  void backward(Var<T> root) {
    check_arg(root.tape == this, "backward: root belongs to a different tape");
    check_arg(!consumed_, "backward already ran on this tape; reset() it first");
    const TapeNode<T>& r = node(root.id);
    check_arg(r.value.numel() == 1, "backward: root must be a scalar node");
    check_arg(r.requires_grad, "backward: root does not depend on any requires-grad leaf");
    grad_buf(root.id).fill(T{1});
    for (int id = root.id; id >= 0; --id) {
      TapeNode<T>& n = node(id);
      if (!n.requires_grad || !n.has_grad || !n.pull) continue;
#ifdef FSTK_PROFILE_TAPE
      auto t0 = std::chrono::steady_clock::now();
      n.pull(*this, n);
      detail::pull_profile()[n.op] +=
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
#else
      n.pull(*this, n);
#endif
    }
    consumed_ = true;
  }

  const Tensor<T>& grad(Var<T> v) const {
    const TapeNode<T>& n = node(v.id);
    check_arg(n.requires_grad, "grad: node is detached (requires_grad is false)");
    check_arg(n.has_grad, "grad: no gradient reached this node; was backward() run?");
    return n.grad;
  }

  void reset() {
    nodes_.clear();
    consumed_ = false;
  }

  bool consumed() const { return consumed_; }

 private:
  std::vector<TapeNode<T>> nodes_;
  bool consumed_ = false;
};

using Tape64 = Tape<double>;

// Gradients of every requires-grad leaf, keyed by node id; each leaf appears
// exactly once and its tensor matches the primal shape.
template <typename T>
struct GradientMap {
  std::vector<std::pair<int, Tensor<T>>> grads;

  const Tensor<T>& at(Var<T> v) const {
    for (const auto& [id, g] : grads)
      if (id == v.id) return g;
    throw std::invalid_argument("GradientMap: no entry for node " + std::to_string(v.id));
  }
  size_t size() const { return grads.size(); }
};

// Collect leaf gradients after backward().
template <typename T>
GradientMap<T> leaf_gradients(const Tape<T>& tape) {
  GradientMap<T> out;
  for (int id = 0; id < tape.size(); ++id) {
    const TapeNode<T>& n = tape.node(id);
    if (n.parents.empty() && n.requires_grad) {
      out.grads.emplace_back(id, n.has_grad ? n.grad : Tensor<T>::zeros_like(n.value));
    }
  }
  return out;
}

}  // namespace fstk

#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "dvat/error.hpp"
#include "dvat/tensor.hpp"

namespace dvat {

template <typename T>
class Tape;

// Handle to a value recorded on a Tape. A default-constructed Var is detached.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool attached() const noexcept { return tape_ != nullptr; }
  Tape<T>* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }

  const Tensor<T>& value() const { return checked().value_of(id_); }
  const Shape& shape() const { return value().shape; }
  bool requires_grad() const { return checked().requires_grad(id_); }

  // Gradient after Tape::backward. Zeros if the node was not reached.
  Tensor<T> grad() const { return checked().grad_of(id_); }

 private:
  Tape<T>& checked() const {
    if (!tape_) throw AutogradError("detached tensor");
    return *tape_;
  }

  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Define-by-run record of executed ops. Nodes are appended in execution order, so
// walking the record backwards is a reverse topological order. Not thread-safe;
// each thread uses its own tape.
template <typename T>
class Tape {
 public:
  // Receives the tape and the id of the node whose grad is being propagated.
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad = false) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, nullptr});
    return {this, nodes_.size() - 1};
  }

  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  // Records an op output. `fn` is dropped when no input needs a gradient.
  Var<T> record(Tensor<T> value, bool requires_grad, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, requires_grad ? std::move(fn) : nullptr});
    return {this, nodes_.size() - 1};
  }

  void backward(const Var<T>& root) {
    if (root.tape() != this) throw AutogradError("detached tensor: root is not on this tape");
    const Node& r = nodes_.at(root.id());
    if (r.value.size() != 1) {
      throw AutogradError("backward needs a scalar root, got shape " + shape_str(r.value.shape));
    }
    if (backward_done_) throw AutogradError("backward already ran on this tape; call zero_grad first");
    backward_done_ = true;

    for (std::size_t i = 0; i <= root.id(); ++i) {
      if (nodes_[i].requires_grad) nodes_[i].grad.assign(nodes_[i].value.size(), T(0));
    }
    if (!r.requires_grad) return;
    nodes_[root.id()].grad[0] = T(1);
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward_fn) n.backward_fn(*this, i);
    }
  }

  // Clears gradients so backward can run again over the same record.
  void zero_grad() {
    for (auto& n : nodes_) n.grad.clear();
    backward_done_ = false;
  }

  void clear() {
    nodes_.clear();
    backward_done_ = false;
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  const Tensor<T>& value_of(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  Tensor<T> grad_of(std::size_t id) const {
    const Node& n = nodes_.at(id);
    if (n.grad.empty()) return Tensor<T>(n.value.shape);
    return Tensor<T>(n.value.shape, n.grad);
  }

  // Raw gradient buffers for op implementations. `grad_buffer` is empty when the
  // node does not require a gradient.
  std::vector<T>& grad_buffer(std::size_t id) { return nodes_[id].grad; }
  const std::vector<T>& grad_buffer(std::size_t id) const { return nodes_[id].grad; }

 private:
  struct Node {
    Tensor<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    BackwardFn backward_fn;
  };

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

}  // namespace dvat

#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "core/errors.hpp"
#include "core/tensor.hpp"

namespace punet {

template <typename S>
class Tape;

// Handle to a value recorded on a tape. Cheap to copy; the tape owns storage.
template <typename S>
struct Var {
  Tape<S>* tape = nullptr;
  int id = -1;

  const Tensor<S>& val() const { return tape->val(id); }
  const std::vector<int>& shape() const { return tape->val(id).shape; }
  bool requires_grad() const { return tape->needs_grad(id); }
};

// Reverse-mode tape. Nodes are recorded in execution order, which is a
// topological order by construction; backward() walks the list once in
// reverse. A node's backward closure reads the node's accumulated gradient
// and scatters into the gradients of its inputs.
//
// The tape is single-threaded: one tape per sample per training step.
template <typename S>
class Tape {
 public:
  // Receives the tape and the output gradient of this node.
  using Backward = std::function<void(Tape<S>&, const Tensor<S>&)>;

  Var<S> leaf(Tensor<S> value, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), Tensor<S>(), requires_grad, false, nullptr});
    return Var<S>{this, static_cast<int>(nodes_.size()) - 1};
  }

  // Record an op result. `bw` may be null when requires_grad is false, in
  // which case nothing is retained for backward.
  Var<S> push(Tensor<S> value, bool requires_grad, Backward bw) {
    nodes_.push_back(Node{std::move(value), Tensor<S>(), requires_grad,
                          false, requires_grad ? std::move(bw) : nullptr});
    return Var<S>{this, static_cast<int>(nodes_.size()) - 1};
  }

  const Tensor<S>& val(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  // For ops whose backward reads their own output (sigmoid, softmax): the
  // closure can only capture the node id once the node exists.
  void set_backward(int id, Backward bw) { nodes_[static_cast<std::size_t>(id)].bw = std::move(bw); }

  // Gradient buffer of a node, allocated to zeros on first touch.
  Tensor<S>& grad(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.grad_live) {
      n.grad = Tensor<S>::zeros(n.value.shape);
      n.grad_live = true;
    }
    return n.grad;
  }

  bool grad_live(int id) const { return nodes_[static_cast<std::size_t>(id)].grad_live; }

  // Reverse sweep from a scalar loss node. Each node is visited at most once.
  void backward(const Var<S>& loss) {
    if (loss.tape != this) throw ContractError("backward: loss recorded on a different tape");
    const Tensor<S>& lv = val(loss.id);
    if (lv.numel() != 1) {
      throw ContractError("backward: loss must be scalar, got shape " + lv.shape_str());
    }
    if (!needs_grad(loss.id)) return;
    grad(loss.id).data[0] = S(1);
    for (int id = loss.id; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (n.requires_grad && n.grad_live && n.bw) n.bw(*this, n.grad);
    }
  }

  int size() const { return static_cast<int>(nodes_.size()); }

 private:
  struct Node {
    Tensor<S> value;
    Tensor<S> grad;
    bool requires_grad;
    bool grad_live;
    Backward bw;
  };
  std::vector<Node> nodes_;
};

}  // namespace punet

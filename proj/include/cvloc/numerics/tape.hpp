#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <vector>

#include "cvloc/numerics/tensor.hpp"

namespace cvloc::numerics {

class Tape;

// Handle to a node recorded on a Tape. Cheap to copy; valid while its tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  // Gradient after backward(); nullptr when the node holds none.
  const Tensor* grad() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Reverse-mode tape. Nodes are appended in evaluation order, so the node list
// is already topologically sorted and backward() is a single reverse sweep.
//
// Leaf gradients accumulate across backward() calls until zero_grad().
// Gradients of intermediate nodes are dropped at the end of every pass unless
// the node was flagged with retain_grad().
class Tape {
 public:
  // Called during backward with the node's output gradient and value.
  using BackwardFn =
      std::function<void(const Tensor& out_grad, const Tensor& out_value, Tape& tape)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var leaf(Tensor value, bool requires_grad = true);
  // Leaf that reads `external` in place. `external` must outlive the tape.
  Var parameter(const Tensor& external, bool requires_grad = true);

  // Records an op output. The backward rule is kept only when grads are
  // enabled and at least one input requires a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn fn);

  void retain_grad(Var v);
  bool retains_grad(Var v) const;

  // Seeds d(output)/d(output) = 1. Output must hold exactly one element.
  void backward(Var output);
  void zero_grad();

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

  const Tensor& value(std::size_t id) const;
  const Tensor* grad(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // Gradient accumulator of an input node, allocated as zeros on first use.
  // Returns nullptr for nodes that do not require a gradient.
  Tensor* accumulator(Var v);

 private:
  struct Node {
    Tensor owned;
    const Tensor* external = nullptr;
    std::optional<Tensor> grad;
    bool requires_grad = false;
    bool is_leaf = true;
    bool retain = false;
    BackwardFn backward;
  };

  Var push(Node node);
  void check_owner(Var v) const;

  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
};

}  // namespace cvloc::numerics

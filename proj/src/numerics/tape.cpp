#include "cvloc/numerics/tape.hpp"

#include "cvloc/errors.hpp"

namespace cvloc::numerics {

const Tensor& Var::value() const {
  if (!tape_) throw ContractError("value() on an unbound Var");
  return tape_->value(id_);
}

const Tensor* Var::grad() const {
  if (!tape_) throw ContractError("grad() on an unbound Var");
  return tape_->grad(id_);
}

bool Var::requires_grad() const { return tape_ && tape_->requires_grad(id_); }

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

void Tape::check_owner(Var v) const {
  if (v.tape_ != this) throw ContractError("Var belongs to a different tape");
}

Var Tape::constant(Tensor value) {
  Node n;
  n.owned = std::move(value);
  return push(std::move(n));
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = requires_grad && grad_enabled_;
  return push(std::move(n));
}

Var Tape::parameter(const Tensor& external, bool requires_grad) {
  Node n;
  n.external = &external;
  n.requires_grad = requires_grad && grad_enabled_;
  return push(std::move(n));
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  return record(std::move(value), std::vector<Var>(inputs), std::move(fn));
}

Var Tape::record(Tensor value, const std::vector<Var>& inputs, BackwardFn fn) {
  Node n;
  n.owned = std::move(value);
  n.is_leaf = false;
  for (const Var& in : inputs) {
    check_owner(in);
    if (nodes_[in.id_].requires_grad) n.requires_grad = true;
  }
  n.requires_grad = n.requires_grad && grad_enabled_;
  if (n.requires_grad) n.backward = std::move(fn);
  return push(std::move(n));
}

void Tape::retain_grad(Var v) {
  check_owner(v);
  nodes_[v.id_].retain = true;
}

bool Tape::retains_grad(Var v) const {
  check_owner(v);
  return nodes_[v.id_].retain;
}

const Tensor& Tape::value(std::size_t id) const {
  const Node& n = nodes_.at(id);
  return n.external ? *n.external : n.owned;
}

const Tensor* Tape::grad(std::size_t id) const {
  const Node& n = nodes_.at(id);
  return n.grad ? &*n.grad : nullptr;
}

Tensor* Tape::accumulator(Var v) {
  Node& n = nodes_[v.id_];
  if (!n.requires_grad) return nullptr;
  if (!n.grad) n.grad.emplace(value(v.id_).shape());
  return &*n.grad;
}

void Tape::backward(Var output) {
  check_owner(output);
  const Tensor& out_value = value(output.id_);
  if (out_value.numel() != 1) {
    throw ContractError("backward: terminal node must be scalar, got shape " +
                        shape_string(out_value.shape()));
  }
  for (Node& n : nodes_) {
    if (!n.is_leaf) n.grad.reset();
  }
  Tensor* seed = accumulator(output);
  if (!seed) return;
  (*seed)[0] += 1.0;

  for (std::size_t i = output.id_ + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.is_leaf || !n.grad || !n.backward) continue;
    n.backward(*n.grad, value(i), *this);
  }
  for (Node& n : nodes_) {
    if (!n.is_leaf && !n.retain) n.grad.reset();
  }
}

void Tape::zero_grad() {
  for (Node& n : nodes_) n.grad.reset();
}

}  // namespace cvloc::numerics

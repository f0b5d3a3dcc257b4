#include "fssi/autodiff.hpp"

#include "fssi/errors.hpp"

namespace fssi {

const Tensor& Var::value() const {
  if (tape == nullptr) throw NumericError("Var is not attached to a tape");
  return tape->value(*this);
}

const Tensor& BackwardContext::out_grad() const {
  return tape_.nodes_[node_].grad;
}

const Tensor& BackwardContext::output() const {
  return tape_.nodes_[node_].value;
}

const Tensor& BackwardContext::input(std::size_t i) const {
  return tape_.nodes_[tape_.nodes_[node_].inputs.at(i)].value;
}

Tensor* BackwardContext::input_grad(std::size_t i) const {
  const std::size_t id = tape_.nodes_[node_].inputs.at(i);
  if (!tape_.nodes_[id].requires_grad) return nullptr;
  return tape_.ensure_grad(id);
}

Var Tape::leaf(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = grad_enabled();
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  n.inputs.reserve(inputs.size());
  for (const Var& in : inputs) {
    if (in.tape != this) throw NumericError("operation mixes vars from different tapes");
    n.inputs.push_back(in.id);
    n.requires_grad = n.requires_grad || nodes_[in.id].requires_grad;
  }
  if (grad_enabled() && n.requires_grad) {
    n.backward = std::move(backward);
  } else {
    n.requires_grad = false;
  }
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

const Tape::Node& Tape::node(Var v) const {
  if (v.tape != this || v.id >= nodes_.size()) {
    throw NumericError("Var does not belong to this tape");
  }
  return nodes_[v.id];
}

bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }

const Tensor& Tape::value(Var v) const { return node(v).value; }

Tensor Tape::grad(Var v) const {
  const Node& n = node(v);
  if (n.grad.empty()) return Tensor::zeros(n.value.shape());
  return n.grad;
}

Tensor* Tape::ensure_grad(std::size_t id) const {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Tensor::zeros(n.value.shape());
  return &n.grad;
}

void Tape::backward(Var loss) {
  const Node& root = node(loss);
  if (consumed_) throw NumericError("gradient tape already consumed");
  if (root.value.size() != 1) {
    throw NumericError("backward() needs a scalar loss, got shape " +
                       shape_to_string(root.value.shape()));
  }
  consumed_ = true;
  if (!root.requires_grad) return;
  ensure_grad(loss.id)->fill(1.0);
  for (std::size_t id = loss.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.backward || n.grad.empty()) continue;
    n.backward(BackwardContext(*this, id));
    // Intermediate gradients are no longer needed once propagated.
    if (!n.inputs.empty()) n.grad = Tensor();
  }
}

}  // namespace fssi

#include "advin/autograd.hpp"

#include <algorithm>
#include <stdexcept>

namespace advin {

Tape& Var::tape() const {
  if (!tape_) throw std::logic_error("Var: not bound to a tape");
  return *tape_;
}

const Tensor& Var::value() const { return tape().value(*this); }

bool Var::requires_grad() const { return tape().requires_grad(*this); }

bool Gradients::contains(Var v) const {
  if (!tape_ || !tape_->owns(v)) return false;
  return std::binary_search(ids_.begin(), ids_.end(), v.id());
}

const Tensor& Gradients::operator[](Var v) const {
  if (!tape_ || !tape_->owns(v)) {
    throw std::invalid_argument("Gradients: variable is not on this tape");
  }
  auto it = std::lower_bound(ids_.begin(), ids_.end(), v.id());
  if (it == ids_.end() || *it != v.id()) {
    throw std::invalid_argument("Gradients: variable " + std::to_string(v.id()) +
                                " does not require gradient");
  }
  return grads_[static_cast<std::size_t>(it - ids_.begin())];
}

void Tape::check_owned(Var v, std::string_view what) const {
  if (!owns(v)) {
    throw std::invalid_argument(std::string(what) + ": variable is not on this tape");
  }
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  if (!value.all_finite()) throw NumericError("leaf: non-finite input");
  nodes_.push_back(Node{"leaf", std::move(value), requires_grad, true, {}, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(std::string_view op, Tensor value, std::vector<Var> parents,
                 BackwardFn backward) {
  if (!value.all_finite()) {
    throw NumericError(std::string(op) + ": produced a non-finite value");
  }
  Node node;
  node.op = std::string(op);
  node.value = std::move(value);
  node.is_leaf = false;
  for (const Var& p : parents) {
    check_owned(p, op);
    node.parents.push_back(p.id());
    node.requires_grad = node.requires_grad || nodes_[p.id()].requires_grad;
  }
  // Ops downstream of constants only never need a backward closure.
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

const Tensor& Tape::value(Var v) const {
  check_owned(v, "value");
  return nodes_[v.id()].value;
}

bool Tape::requires_grad(Var v) const {
  check_owned(v, "requires_grad");
  return nodes_[v.id()].requires_grad;
}

Gradients Tape::backward(Var loss) const {
  check_owned(loss, "backward");
  const Node& root = nodes_[loss.id()];
  if (root.value.numel() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " +
                     to_string(root.value.shape()));
  }

  std::vector<Tensor> grads(loss.id() + 1);
  grads[loss.id()] = Tensor::full(root.value.shape(), 1.0f);

  Gradients out;
  out.tape_ = this;
  std::vector<Tensor*> parent_grads;
  for (std::size_t k = loss.id() + 1; k-- > 0;) {
    const Node& node = nodes_[k];
    if (node.is_leaf || !node.backward || grads[k].empty()) continue;
    parent_grads.assign(node.parents.size(), nullptr);
    for (std::size_t i = 0; i < node.parents.size(); ++i) {
      const std::size_t p = node.parents[i];
      if (!nodes_[p].requires_grad) continue;
      if (grads[p].empty()) grads[p] = Tensor::zeros(nodes_[p].value.shape());
      parent_grads[i] = &grads[p];
    }
    node.backward(grads[k], parent_grads);
    out.visited_.push_back(k);
    grads[k] = Tensor();
  }

  for (std::size_t k = 0; k < nodes_.size(); ++k) {
    const Node& node = nodes_[k];
    if (!node.is_leaf || !node.requires_grad) continue;
    out.ids_.push_back(k);
    if (k < grads.size() && !grads[k].empty()) {
      out.grads_.push_back(std::move(grads[k]));
    } else {
      out.grads_.push_back(Tensor::zeros(node.value.shape()));
    }
  }
  return out;
}

}  // namespace advin

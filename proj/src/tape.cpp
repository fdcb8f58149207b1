#include "cropdoc/tape.hpp"

#include <algorithm>

#include "cropdoc/errors.hpp"

namespace cropdoc {

const Tensor& Var::value() const { return tape_->value(id_); }

Var Tape::constant(Tensor value) {
  Node node;
  node.owned = std::move(value);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::variable(Tensor& tensor) {
  Node node;
  node.bound = &tensor;
  node.sink = &tensor;
  node.needs_grad = tensor.requires_grad();
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::reference(const Tensor& tensor) {
  Node node;
  node.bound = &tensor;
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<std::size_t> parents, BackwardFn backward) {
  Node node;
  node.owned = std::move(value);
  for (std::size_t p : parents) {
    if (p >= nodes_.size()) throw ArgumentError("tape parent id out of range");
    node.needs_grad = node.needs_grad || nodes_[p].needs_grad;
  }
  node.parents = std::move(parents);
  if (node.needs_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

const Tensor& Tape::value(std::size_t id) const {
  const Node& node = nodes_.at(id);
  return node.bound ? *node.bound : node.owned;
}

std::span<double> Tape::adjoint(std::size_t id) {
  Node& node = nodes_[id];
  if (node.adjoint.empty()) node.adjoint.assign(value(id).size(), 0.0);
  return node.adjoint;
}

void Tape::backward(Var loss) {
  if (nodes_.empty()) throw ArgumentError("backward on an empty tape");
  if (&loss.tape() != this) throw ArgumentError("loss belongs to a different tape");
  if (value(loss.id()).size() != 1) {
    throw ArgumentError("backward requires a scalar loss, got shape " + shape_string(value(loss.id()).shape()));
  }
  for (Node& node : nodes_) node.adjoint.clear();
  adjoint(loss.id())[0] = 1.0;

  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (node.adjoint.empty() || !node.needs_grad) continue;
    if (node.backward) node.backward(*this, id);
    if (node.sink && node.sink->requires_grad()) {
      std::span<double> g = node.sink->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += node.adjoint[i];
    }
  }
}

}  // namespace cropdoc

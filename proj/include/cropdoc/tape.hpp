#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "cropdoc/tensor.hpp"

namespace cropdoc {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the
/// tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode differentiation tape.
///
/// Nodes are appended in evaluation order, so every node's parents have
/// smaller ids and a single reverse sweep visits each node once.
class Tape {
 public:
  // Receives the tape and the id of the node whose adjoint is ready; pushes
  // contributions into the parents' adjoints.
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf that owns its value and never receives a gradient.
  Var constant(Tensor value);
  // Leaf bound to an external tensor. If the tensor requires grad, backward()
  // accumulates into its grad buffer. The tensor must outlive the tape.
  Var variable(Tensor& tensor);
  // Leaf bound to an external tensor without gradient flow (e.g. frozen
  // parameters during inference). The tensor must outlive the tape.
  Var reference(const Tensor& tensor);
  // Records an operation output. `backward` may be empty for outputs that
  // do not need a gradient.
  Var record(Tensor value, std::vector<std::size_t> parents, BackwardFn backward);

  // Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse.
  void backward(Var loss);

  const Tensor& value(std::size_t id) const;
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  // Adjoint buffer of a node, allocated on first use.
  std::span<double> adjoint(std::size_t id);
  bool has_adjoint(std::size_t id) const { return !nodes_[id].adjoint.empty(); }

  std::size_t size() const { return nodes_.size(); }
  const std::vector<std::size_t>& parents(std::size_t id) const { return nodes_[id].parents; }

 private:
  struct Node {
    Tensor owned;
    const Tensor* bound = nullptr;
    Tensor* sink = nullptr;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    std::vector<double> adjoint;
    bool needs_grad = false;
  };
  std::vector<Node> nodes_;
};

}  // namespace cropdoc

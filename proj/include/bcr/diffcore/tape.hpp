#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "bcr/errors.hpp"

namespace bcr::ad {

using Index = Eigen::Index;

// Dense row-major matrix used for every value and gradient on the tape.
template <typename Scalar>
using Tensor2 = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

// A trainable tensor together with its accumulated gradient.
template <typename Scalar>
struct Parameter {
  std::string name;
  Tensor2<Scalar> value;
  Tensor2<Scalar> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor2<Scalar> v)
      : name(std::move(n)), value(std::move(v)), grad(Tensor2<Scalar>::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
  Index size() const { return value.size(); }
};

template <typename Scalar>
class Tape;

// Handle to a node on a tape. Cheap to copy; valid as long as its tape lives.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Tape<Scalar>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<Scalar>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Tensor2<Scalar>& value() const { return tape_->value(id_); }
  const Tensor2<Scalar>& grad() const { return tape_->grad(id_); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  Scalar scalar() const {
    if (value().size() != 1) throw DimensionError("Var::scalar on a non-scalar node");
    return value()(0, 0);
  }

 private:
  Tape<Scalar>* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Reverse-mode record of primitive ops. Each node caches its forward value and
// a closure that pushes its output gradient to its inputs.
template <typename Scalar>
class Tape {
 public:
  using Matrix = Tensor2<Scalar>;
  using Backward = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Scalar> constant(Matrix value) { return push(std::move(value), false, nullptr); }

  // Registering the same parameter twice returns the same node, so its
  // gradient is accumulated into Parameter::grad exactly once.
  Var<Scalar> parameter(Parameter<Scalar>& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var<Scalar>(this, it->second);
    Var<Scalar> v = push(p.value, true, nullptr);
    nodes_[v.id()].param = &p;
    param_nodes_.emplace(&p, v.id());
    return v;
  }

  // Appends a primitive result. `requires_grad` should be true iff any input
  // requires a gradient; `backward` may be empty for leaves.
  Var<Scalar> push(Matrix value, bool requires_grad, Backward backward) {
    if (!value.allFinite()) throw NumericError("non-finite value produced on tape");
    nodes_.push_back(Node{std::move(value), Matrix(), std::move(backward), nullptr, requires_grad});
    return Var<Scalar>(this, nodes_.size() - 1);
  }

  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  const Matrix& grad(std::size_t id) const { return nodes_[id].grad; }
  std::size_t size() const { return nodes_.size(); }

  // Adds `g` into the gradient of node `id`. No-op for nodes that do not need one.
  template <typename Derived>
  void accumulate(std::size_t id, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    n.grad += g;
  }
  Matrix& grad_ref(std::size_t id) { return nodes_[id].grad; }

  // Backward pass from a scalar root (seed 1).
  void backward(const Var<Scalar>& root) {
    if (root.value().size() != 1) throw DimensionError("backward root must be 1x1");
    std::pair<Var<Scalar>, Matrix> seed{root, Matrix::Ones(1, 1)};
    backward(std::span<const std::pair<Var<Scalar>, Matrix>>(&seed, 1));
  }

  // Backward pass from several seeded nodes. Parameter gradients are added to
  // the registered Parameter objects. A tape can be replayed only once.
  void backward(std::span<const std::pair<Var<Scalar>, Matrix>> seeds) {
    if (replayed_) throw ArgumentError("tape already replayed");
    replayed_ = true;
    for (Node& n : nodes_)
      if (n.requires_grad) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    for (const auto& [var, g] : seeds) {
      if (g.rows() != var.rows() || g.cols() != var.cols()) throw DimensionError("seed shape mismatch");
      accumulate(var.id(), g);
    }
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad) continue;
      if (n.backward) n.backward(*this, i);
      if (n.param) n.param->grad += n.grad;
    }
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    Backward backward;
    Parameter<Scalar>* param;
    bool requires_grad;
  };

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<Scalar>*, std::size_t> param_nodes_;
  bool replayed_ = false;
};

}  // namespace bcr::ad

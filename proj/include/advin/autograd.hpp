#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "advin/tensor.hpp"

namespace advin {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid only while the
/// owning tape is alive.
class Var {
 public:
  Var() = default;

  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const;
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Result of a backward pass: d(loss)/d(leaf) for every leaf that requires
/// gradient, plus the order in which recorded ops were replayed.
class Gradients {
 public:
  bool contains(Var v) const;
  const Tensor& operator[](Var v) const;
  const std::vector<std::size_t>& visited_ops() const { return visited_; }

 private:
  friend class Tape;
  const Tape* tape_ = nullptr;
  std::vector<std::size_t> ids_;
  std::vector<Tensor> grads_;
  std::vector<std::size_t> visited_;
};

/// Records primitive ops in execution order. Single-owner; not thread safe.
class Tape {
 public:
  /// Accumulates into parent gradients. A parent that does not require
  /// gradient is passed as nullptr.
  using BackwardFn =
      std::function<void(const Tensor& grad_out, std::span<Tensor* const> grads)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = false);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Appends an op node. Throws NumericError if `value` is not finite.
  Var record(std::string_view op, Tensor value, std::vector<Var> parents,
             BackwardFn backward);

  /// Reverse-mode sweep from a scalar loss recorded on this tape.
  Gradients backward(Var loss) const;

  bool owns(Var v) const { return v.tape_ == this && v.id_ < nodes_.size(); }
  std::size_t size() const { return nodes_.size(); }
  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;
  const std::string& op_name(std::size_t id) const { return nodes_.at(id).op; }

 private:
  struct Node {
    std::string op;
    Tensor value;
    bool requires_grad = false;
    bool is_leaf = true;
    std::vector<std::size_t> parents;
    BackwardFn backward;
  };

  void check_owned(Var v, std::string_view what) const;

  std::vector<Node> nodes_;
};

}  // namespace advin

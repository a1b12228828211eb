// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fsq/tensor.hpp"

/// Reverse-mode automatic differentiation over a define-by-run tape.
///
/// Every op records its output value together with a backward rule. Backward
/// rules are written in terms of the same recorded ops, so when gradients are
/// requested with `create_graph`, the gradients are themselves nodes on the
/// tape and can be differentiated again (used for MAML meta-gradients).
///
/// Node ids increase in creation order, which is a topological order: an
/// op's inputs always have smaller ids than the op itself.
namespace fsq::ad {

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid as long as the tape.
class Var {
 public:
  Var() = default;

  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  std::int64_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::int64_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::int64_t id_ = -1;
};

enum class Op {
  leaf,
  constant,
  matmul,
  batched_matmul,
  add,
  sub,
  mul,
  div,
  scale,
  add_scalar,
  tanh,
  sigmoid,
  exp,
  log,
  pow,
  softmax_rows,
  concat_cols,
  concat_rows,
  slice_cols,
  pad_cols,
  slice_rows,
  pad_rows,
  gather_rows,
  scatter_rows,
  max_of,
  sum,
  sum_to,
  broadcast_to,
  cross_entropy,
  transpose,
  reshape,
  custom,
};

const char* op_name(Op op);

/// want[i] is set when input i leads to a node whose gradient was requested.
using Want = std::vector<char>;

/// Given the node itself and the gradient flowing into it, returns one
/// gradient per input (an invalid Var where the input gets nothing).
using BackwardFn =
    std::function<std::vector<Var>(const Var& self, const Var& grad, const Want& want)>;

struct GradOptions {
  /// Record the backward computation so the returned gradients can be
  /// differentiated again.
  bool create_graph = false;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that gradients can be taken with respect to.
  Var variable(Tensor value);
  Var constant(Tensor value);

  /// Gradients of the rank-0 `output` with respect to each of `wrt`.
  ///
  /// Nodes in `wrt` that `output` does not depend on get an exact zero
  /// gradient. Throws ContractError when `output` is not rank 0, and
  /// UnsupportedOpError when `create_graph` is set and the path crosses an
  /// op whose backward rule is not recorded.
  std::vector<Var> gradients(const Var& output, std::span<const Var> wrt,
                             GradOptions options = {});

  std::size_t size() const { return nodes_.size(); }
  bool grad_enabled() const { return grad_enabled_; }
  Op op(const Var& v) const { return nodes_.at(static_cast<std::size_t>(v.id())).op; }

  /// Appends a node. Inputs and backward rule are kept only when recording
  /// is enabled and at least one input requires a gradient.
  Var record(Op op, Tensor value, std::vector<Var> inputs, BackwardFn backward,
             bool differentiable_backward = true);

 private:
  friend class Var;
  friend class NoGradGuard;

  struct Node {
    Op op;
    Tensor value;
    std::vector<Var> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    bool differentiable_backward = true;
  };

  const Node& node(std::int64_t id) const { return nodes_[static_cast<std::size_t>(id)]; }

  std::deque<Node> nodes_;
  bool grad_enabled_ = true;
};

/// Disables recording on a tape for the guard's lifetime.
class NoGradGuard {
 public:
  explicit NoGradGuard(Tape& tape) : tape_(tape), previous_(tape.grad_enabled_) {
    tape_.grad_enabled_ = false;
  }
  ~NoGradGuard() { tape_.grad_enabled_ = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape& tape_;
  bool previous_;
};

// Ops. All operands must live on the same tape. Tensors are rank 0 or 2.

/// op(a) * op(b) with optional transposition of either operand.
Var matmul(const Var& a, const Var& b, bool trans_a = false, bool trans_b = false);
/// `batch` independent products: a and b are stacks of equal row blocks and
/// block i of the result is op(a_i) * op(b_i).
Var batched_matmul(const Var& a, const Var& b, std::size_t batch, bool trans_a = false,
                   bool trans_b = false);

// Elementwise with broadcasting: a rank-0 operand, or a 2-D operand with a
// unit dimension, is stretched to match the other.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);

Var scale(const Var& x, double factor);
Var add_scalar(const Var& x, double offset);
Var tanh(const Var& x);
Var sigmoid(const Var& x);
Var exp(const Var& x);
Var log(const Var& x);
Var pow(const Var& x, double exponent);

/// Softmax along the last axis of a matrix.
Var softmax_rows(const Var& x);

/// Normalizes each row to zero mean, unit variance (with `eps` added to the
/// variance), then applies the 1 x cols affine parameters.
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);

Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var slice_cols(const Var& x, std::size_t begin, std::size_t count);
Var slice_rows(const Var& x, std::size_t begin, std::size_t count);
Var gather_rows(const Var& x, std::vector<std::size_t> rows);
/// Inverse of gather_rows: rows of `x` are added into a zero matrix with
/// `total_rows` rows at the given positions.
Var scatter_rows(const Var& x, std::vector<std::size_t> rows, std::size_t total_rows);

/// Elementwise maximum over same-shaped operands. The gradient goes to the
/// operand holding the maximum, the lowest index on ties.
Var max_of(std::span<const Var> parts);

Var sum(const Var& x);
Var mean(const Var& x);
/// Sums a broadcast operand back down to `shape` (the adjoint of broadcasting).
Var sum_to(const Var& x, const Shape& shape);
Var broadcast_to(const Var& x, const Shape& shape);

/// Mean over rows of -log softmax(logits)[label].
Var cross_entropy(const Var& logits, std::span<const int> labels);

Var transpose(const Var& x);
Var reshape(const Var& x, Shape shape);

/// Value-level vector-Jacobian product used by `custom`.
using CustomVjp = std::function<std::vector<Tensor>(const Tensor& grad_out)>;

/// Wraps an externally computed op. Its backward is first-order only:
/// differentiating through it with create_graph raises UnsupportedOpError.
Var custom(std::span<const Var> inputs, Tensor value, CustomVjp vjp);

}  // namespace fsq::ad

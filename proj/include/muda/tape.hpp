#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "muda/matrix.hpp"

// Matrix-valued reverse-mode differentiation.
//
// A Tape records every operation in creation order. Leaves are inputs or
// parameters; constants are leaves that never receive a gradient.
// `stop_gradient` copies a value into a node that cuts the gradient path to
// everything that produced it.
namespace muda::autodiff {

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Matrix& value() const;
  double scalar() const;  // value of a 1x1 node
};

class Tape {
 public:
  using ForwardFn = std::function<Matrix(std::span<const Matrix* const> inputs)>;
  // Accumulates into the gradients of inputs whose pointer is non-null.
  using BackwardFn = std::function<void(const Matrix& out_grad, const Matrix& out_value,
                                        std::span<const Matrix* const> inputs,
                                        std::span<Matrix* const> input_grads)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Matrix value, bool requires_grad = true);
  Var constant(Matrix value) { return leaf(std::move(value), false); }

  // Evaluates `forward` on the parent values and records the node.
  Var record(std::vector<Var> parents, ForwardFn forward, BackwardFn backward);
  Var stop_gradient(Var v);

  const Matrix& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  /// Reverse pass from a 1x1 loss. Throws NonScalarLoss otherwise. Gradients
  /// from an earlier call are discarded.
  void backward(Var loss);

  /// Gradient of the last backward() loss with respect to `v`; a zero matrix
  /// when `v` does not influence the loss through differentiable paths.
  Matrix grad(Var v) const;

  /// Recomputes every recorded node from the leaves and returns the value of
  /// `v`. Matches the recorded value bit-for-bit.
  const Matrix& replay(Var v);

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    std::vector<std::size_t> parents;
    ForwardFn forward;    // empty for leaves
    BackwardFn backward;  // empty for leaves and cut nodes
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
  std::vector<Matrix> grads_;
};

// --- operations ------------------------------------------------------------

Var matmul(Var a, Var b);
Var add_bias(Var a, Var bias);  // bias is 1 x cols, broadcast over rows
Var tanh(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);  // elementwise
Var div(Var a, Var b);  // elementwise
Var scale(Var a, double s);
Var sum(Var a);
Var gram(Var x);         // x^T x
Var frobenius(Var a);    // 1x1
Var softmax(Var logits);

/// Mean over rows of -log softmax(logits)[label].
Var cross_entropy(Var logits, std::span<const int> labels);

/// Mean over rows of sum_c p_c (log p_c - log_target_c), with p the softmax of
/// `logits`. `log_target` is a constant (no gradient flows into it).
Var kl_to_log_target(Var logits, Matrix log_target);

inline Var stop_gradient(Var v) { return v.tape->stop_gradient(v); }

}  // namespace muda::autodiff

#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "kvdistill/kernels.hpp"
#include "kvdistill/matrix.hpp"

namespace kvdistill {

// A trainable matrix together with its accumulated gradient.
struct Param {
  Matrix value;
  Matrix grad;

  Param() = default;
  explicit Param(Matrix v) : value(std::move(v)), grad(value.rows(), value.cols()) {}
  void zero_grad() { grad.fill(0.0); }
};

class Tape;

// Handle to a node recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Reverse-mode differentiation tape. Nodes are appended in evaluation order,
// so reverse insertion order is a valid topological order for backward().
class Tape {
 public:
  // Receives the tape, the gradient flowing into the node and the node's own
  // forward value.
  using Backward = std::function<void(Tape&, const Matrix& grad_out, const Matrix& out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  // Leaf bound to a parameter; backward() adds d(root)/d(param) into p.grad.
  Var input(Param& p);
  // Leaf with a private gradient readable through grad().
  Var variable(Matrix value);
  Var record(Matrix value, std::initializer_list<Var> inputs, Backward fn);
  Var record(Matrix value, std::span<const Var> inputs, Backward fn);

  const Matrix& value(Var v) const { return nodes_[v.id()].value; }
  bool requires_grad(Var v) const { return nodes_[v.id()].requires_grad; }

  // Adds g into the gradient of v. No-op for nodes that need no gradient.
  void accumulate(Var v, const Matrix& g);
  // Mutable gradient buffer of v (allocated on first use). Only call for
  // nodes with requires_grad(v) == true.
  Matrix& grad_buffer(Var v);
  // Gradient of v after backward(); zeros when nothing flowed into it.
  Matrix grad(Var v) const;

  // Root must be 1x1 (ContractError otherwise).
  void backward(Var root);

  std::size_t node_count() const { return nodes_.size(); }
  // Number of node backward callbacks executed by the last backward().
  std::size_t last_backward_visits() const { return last_visits_; }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool has_grad = false;
    bool requires_grad = false;
    Backward backward;
    Param* sink = nullptr;
  };

  std::vector<Node> nodes_;
  std::size_t last_visits_ = 0;
};

// Differentiable operations. Each forwards to the pure kernel of the same
// name and records its vector-Jacobian product.
namespace ad {

Var matmul(Var a, Var b);
Var matmul_nt(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
// x (n x c) + bias (1 x c) broadcast over rows.
Var add_row(Var x, Var bias);
// x (n x c) * row (1 x c) broadcast over rows.
Var mul_row(Var x, Var row);
Var gelu(Var x);
Var softplus(Var x);
// exp(a * x + b) elementwise.
Var exp_affine(Var x, double a, double b);
Var layer_norm(Var x, Var gamma, Var beta, double eps = kLayerNormEps);
Var softmax_rows(Var x, const std::optional<Mask>& mask = std::nullopt);
Var normalize_rows(Var x);
Var sum(Var x);
Var mean(Var x);
Var slice_rows(Var x, std::size_t begin, std::size_t count);
Var concat_rows(std::span<const Var> parts);
// Stacks `times` copies of x vertically.
Var tile_rows(Var x, std::size_t times);

// Multi-head scaled dot-product self-attention applied independently to
// consecutive row blocks of length `segment`. q, k, v are (n x d) with head h
// owning columns [h*d/heads, (h+1)*d/heads). Returns the head outputs
// concatenated back into n x d.
Var segment_attention(Var q, Var k, Var v, std::size_t heads, std::size_t segment);

// Per-head linear map on column blocks: w is d x dk stacked head blocks
// (rows [h*dk, (h+1)*dk) hold the dk x dk matrix W_h); output block h of row i
// is W_h * x_h.
Var blockdiag_apply(Var x, Var w, std::size_t heads);

// a is B x d, b is (B*groups) x d; out(i, g) = <a_i, b_{i*groups+g}>.
Var grouped_row_dot(Var a, Var b, std::size_t groups);

}  // namespace ad
}  // namespace kvdistill

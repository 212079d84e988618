#pragma once

// Define-by-run reverse-mode automatic differentiation over dense matrices.
//
// A Value is a cheap handle to a graph node. Every operation allocates a new
// node holding its forward result; when at least one input requires a
// gradient, the node also records its parents and a closure that pushes the
// node's adjoint back into them. backward() walks the graph reachable from a
// scalar loss in reverse topological order.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "diffml/matrix.hpp"

namespace diffml::autodiff {

enum class OpKind {
  leaf,
  add,
  sub,
  elementwise_mul,
  matmul,
  relu,
  sigmoid,
  softmax_rowwise,
  mean,
  mse_loss,
  scalar_mul,
  concat_cols,
  custom,
};

std::string_view op_name(OpKind kind);

struct Node;
using BackwardFn = std::function<void(Node&)>;

struct Node {
  Matrix data;
  Matrix grad;  // allocated iff requires_grad
  bool requires_grad = false;
  OpKind op = OpKind::leaf;
  std::string label;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;
};

class Value {
 public:
  Value() = default;

  static Value constant(Matrix data);
  static Value parameter(Matrix data, std::string label = {});

  const Matrix& data() const { return node_->data; }
  // Direct write access, used by optimizers and finite-difference probes.
  Matrix& mutable_data() { return node_->data; }
  const Matrix& grad() const { return node_->grad; }
  Matrix& mutable_grad() { return node_->grad; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool valid() const { return node_ != nullptr; }
  OpKind op() const { return node_->op; }
  const std::string& label() const { return node_->label; }
  std::size_t rows() const { return node_->data.rows(); }
  std::size_t cols() const { return node_->data.cols(); }

  // Value of a 1x1 node.
  double item() const;
  void zero_grad();

  // A new leaf sharing no state with this node.
  Value detached() const { return constant(node_->data); }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  explicit Value(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  friend Value make_node(Matrix, OpKind, std::vector<Value>, BackwardFn);

  std::shared_ptr<Node> node_;
};

// Records an operation node. `backward` is only stored when some parent
// requires a gradient; it receives the node and must accumulate into
// parents[i]->grad for every parent with requires_grad set.
Value make_node(Matrix data, OpKind op, std::vector<Value> parents, BackwardFn backward);

// Elementwise a + b. b may also be a 1 x cols row vector, broadcast over rows
// (bias addition); no other broadcasting is supported.
Value add(const Value& a, const Value& b);
Value sub(const Value& a, const Value& b);
Value elementwise_mul(const Value& a, const Value& b);
Value matmul(const Value& a, const Value& b);
Value relu(const Value& x);
Value sigmoid(const Value& x);
Value softmax_rowwise(const Value& x);
// Mean over all entries, returned as 1x1.
Value mean(const Value& x);
// Mean squared error between predictions and a constant target of equal shape.
Value mse_loss(const Value& pred, const Matrix& target);
Value scalar_mul(const Value& x, double factor);
Value concat_cols(std::span<const Value> parts);

// Uniform dispatcher used by generic graph builders and tests. `scalar` is
// only read by scalar_mul; mse_loss treats inputs[1] as a constant target.
Value tensor_op_eval(OpKind kind, std::span<const Value> inputs, double scalar = 1.0);

// Accumulates dLoss/dParam into every requires_grad ancestor of `loss`.
// Intermediate adjoints are reset on every call, so repeated calls add the
// same contribution to leaves again.
void backward(const Value& loss);

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::vector<std::pair<std::string, double>> per_parameter_errors;
};

// Compares the autodiff gradient of f at `params` with central differences
// (f(p+h) - f(p-h)) / 2h, one coordinate at a time. Parameter grads are
// zeroed before and left holding the autodiff gradient afterwards.
GradCheckReport finite_diff_check(const std::function<Value()>& f, std::span<Value> params,
                                  double h = 1e-5);

}  // namespace diffml::autodiff

#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "odeflow/tensor.hpp"

namespace odeflow {

enum class OpKind {
  Constant,
  Input,
  Parameter,
  MatMul,
  BatchMatMul,
  Add,
  Sub,
  Mul,
  Scale,
  AddRowVec,
  MulRowVec,
  CenterRows,
  LayerNormRows,
  SoftmaxRows,
  Gelu,
  Log,
  Exp,
  Sum,
  Mean,
  Mse,
  CrossEntropy,
  Reshape,
  SplitHeads,
  MergeHeads,
  SelectRows,
  AssembleTokens,
  KthLargestRows,
  GroupMax,
};

const char* op_name(OpKind kind) noexcept;

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  Tape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Define-by-run reverse-mode tape.
///
/// Nodes are appended in evaluation order, so every input id precedes its
/// consumer and the node list is a topological order. backward() walks it in
/// exact reverse. Parameters bound with parameter() receive their gradient in
/// Parameter::grad (accumulated, so call zero_grad() between steps).
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var input(Tensor value);
  Var parameter(Parameter& p);

  Var record(OpKind kind, Tensor value, std::vector<std::size_t> inputs, BackwardFn backward);

  void backward(Var root);

  std::size_t size() const noexcept { return nodes_.size(); }
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& value(Var v) const { return nodes_[v.id()].value; }
  OpKind kind(Var v) const { return nodes_[v.id()].kind; }
  const std::vector<std::size_t>& inputs(Var v) const { return nodes_[v.id()].inputs; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Gradient of the last backward root with respect to v (zeros if unreached).
  Tensor grad(Var v) const;

  /// Node ids in the order the last backward() visited them.
  const std::vector<std::size_t>& backward_order() const noexcept { return order_; }

  // For op implementations.
  const Tensor& upstream(std::size_t id) const { return nodes_[id].grad; }
  Tensor& grad_buffer(std::size_t id);

 private:
  struct Node {
    OpKind kind = OpKind::Constant;
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };

  std::deque<Node> nodes_;
  std::vector<std::size_t> order_;
};

// ---- differentiable operations ----------------------------------------------

Var matmul(Var a, Var b, bool transpose_a = false, bool transpose_b = false);
Var bmm(Var a, Var b, bool transpose_a = false, bool transpose_b = false);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_rowvec(Var x, Var v);
Var mul_rowvec(Var x, Var v);
Var center_rows(Var x);
Var layer_norm_rows(Var x, double eps = 1e-6);
Var softmax_rows(Var x);
Var gelu(Var x);
Var log(Var x);
Var exp(Var x);
Var sum(Var x);
Var mean(Var x);
Var mse(Var a, Var b);
Var cross_entropy(Var logits, std::span<const int> labels);
Var reshape(Var x, Shape shape);
Var split_heads(Var x, std::size_t batch, std::size_t tokens, std::size_t heads);
Var merge_heads(Var x, std::size_t batch, std::size_t tokens, std::size_t heads);
Var select_rows(Var x, std::vector<std::size_t> rows);
Var assemble_tokens(Var patches, Var cls, Var registers, Var pos, std::size_t batch);
Var kth_largest_rows(Var x, std::size_t k);
Var group_max(Var x, std::size_t group);

// ---- plain-tensor helpers ----------------------------------------------------

Tensor softmax_rows(const Tensor& x);
double gelu(double x) noexcept;

}  // namespace odeflow

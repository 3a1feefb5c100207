#pragma once

// Tape-based reverse-mode automatic differentiation over Tensor.
//
// A Tape records every operation whose inputs require gradients as a
// sequential list of nodes. backward() walks the list in reverse once and then
// drops the recorded closures; the tape cannot be differentiated twice.
// Parameters enter the tape by reference and receive their gradients through
// Parameter::grad, which accumulates across tapes until zeroed.

#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "jstts/tensor.hpp"

namespace jstts {

class Tape;

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}
  void zero_grad() { grad.fill(0.0); }
};

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  int64_t rows() const { return value().rows(); }
  int64_t cols() const { return value().cols(); }
  double item() const { return value().item(); }
  bool requires_grad() const;
  bool valid() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  int id() const { return id_; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

// Gradient callback for custom ops: receives the output gradient and one
// pointer per parent (nullptr when that parent does not require gradients).
using BackwardFn = std::function<void(const Tensor& grad_out, std::span<Tensor* const> parent_grads)>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var leaf(Tensor value, bool requires_grad);
  // References p.value without copying. Gradients accumulate into p.grad when
  // trainable is true; otherwise the parameter acts as a constant.
  Var param(Parameter& p, bool trainable);

  Var record(std::string_view op, Tensor value, std::vector<Var> parents, BackwardFn fn);

  void backward(const Var& loss);
  // Gradient of a leaf after backward(); empty when the leaf does not require
  // gradients or received none.
  std::optional<Tensor> grad(const Var& v) const;

  const Tensor& value(int id) const;
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    const Tensor* external = nullptr;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    Parameter* param = nullptr;
    std::vector<int> parents;
    BackwardFn backward;
  };
  Tensor& grad_slot(int id);

  std::deque<Node> nodes_;  // stable addresses: Var::value() references survive growth
  bool consumed_ = false;
};

// ---- differentiable operations -------------------------------------------
// Every op validates shapes and throws ShapeError naming the op and shapes.

Var matmul(const Var& a, const Var& b);
// a * b^T
Var matmul_nt(const Var& a, const Var& b);
Var transpose(const Var& a);
// Same shape, or b a {1, cols} row broadcast over a's rows.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var relu(const Var& a);
Var tanh(const Var& a);
Var sigmoid(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var abs(const Var& a);
Var square(const Var& a);
Var softmax(const Var& a);
Var log_softmax(const Var& a);
// Row-wise; returns {rows, 1}.
Var logsumexp(const Var& a);
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);
Var embedding(const Var& table, std::span<const int> ids);
Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var slice_rows(const Var& a, int64_t start, int64_t count);
Var slice_cols(const Var& a, int64_t start, int64_t count);
Var sum(const Var& a);
Var mean(const Var& a);
// {rows, cols} -> {1, cols}
Var mean_rows(const Var& a);
// {1, cols} -> {n, cols}
Var broadcast_rows(const Var& a, int64_t n);
// Row i of a repeated counts[i] times.
Var repeat_rows(const Var& a, std::span<const int> counts);
// a {T, J}, b {U, J} -> {T*U, J} with row t*U+u = a_t + b_u.
Var outer_add(const Var& a, const Var& b);
// Same-padded depthwise convolution over rows (time); w is {kernel, cols}.
Var depthwise_conv1d(const Var& x, const Var& w);
Var reshape(const Var& a, Shape shape);
Var stop_gradient(const Var& a);

}  // namespace jstts

#pragma once

// Reverse-mode automatic differentiation over Tensor values.
//
// A Tape records every operation of one forward pass. Each recorded node owns
// its value and, when any input requires a gradient, a closure that pushes the
// node's gradient back to its inputs. Nodes are kept in a deque so references
// to earlier values stay valid while later nodes are appended.

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "mindvis/tensor.hpp"

namespace mindvis {

struct Parameter {
  Tensor value;
  Tensor grad;
  bool trainable = true;
};

// Named parameters with stable addresses (std::map nodes never move).
class ParamStore {
 public:
  Parameter& add(const std::string& name, Tensor init, bool trainable = true);
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  void zero_grad();
  void set_trainable(bool trainable);
  std::size_t scalar_count() const;
  std::size_t size() const { return params_.size(); }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::map<std::string, Parameter> params_;
};

class Tape;

class Var {
 public:
  Var() = default;
  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  const Tensor& value() const;
  const std::vector<int>& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Value that never receives a gradient.
  Var constant(Tensor value);
  // Free leaf whose gradient can be read back with grad().
  Var leaf(Tensor value);
  // Leaf bound to a parameter. It tracks a gradient only when the parameter is
  // trainable; backward() adds that gradient into Parameter::grad.
  Var param(Parameter& p);

  void backward(Var scalar_output);
  Tensor grad(Var v) const;

  // Op plumbing.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn fn);
  const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  // Gradient buffer of an input, allocated (zeroed) on first use.
  Tensor& grad_buffer(int id);

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter* param = nullptr;
  };
  std::deque<Node> nodes_;
};

// ---- Elementwise and broadcasting ----
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
// a[n, d] + b[d] on every row.
Var add_row(Var a, Var b);
// a[n, d] * g[d] on every row.
Var mul_row(Var a, Var g);
// a[n, d] + b[n] on every column.
Var add_col(Var a, Var b);
// a[n, d] * g[n] on every column.
Var mul_col(Var a, Var g);

Var silu(Var a);
Var gelu(Var a);
Var relu(Var a);
Var sigmoid(Var a);
Var square(Var a);

// ---- Linear algebra ----
Var matmul(Var a, Var b);     // [m,k] x [k,n]
Var matmul_nt(Var a, Var b);  // [m,k] x [n,k]^T
Var transpose(Var a);
Var linear(Var x, Var w, Var b);  // x[n,in] w[in,out] + b[out]

// ---- Row-wise normalisation ----
Var softmax_rows(Var a);
Var normalize_rows(Var a, double eps = 1e-5);
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
// x[C, ...] with C divisible by groups; gamma/beta per channel.
Var group_norm(Var x, int groups, Var gamma, Var beta, double eps = 1e-5);

// ---- Shape manipulation ----
Var reshape(Var a, std::vector<int> shape);
Var slice_cols(Var a, int start, int len);
Var concat_cols(const std::vector<Var>& parts);
Var slice_rows(Var a, int start, int len);
// Concatenates along the leading dimension; trailing dims must agree.
Var concat_rows(const std::vector<Var>& parts);
Var gather_rows(Var a, const std::vector<int>& idx);
Var repeat_rows(Var a, int n);
Var mean_rows(Var a);  // [n, d] -> [1, d]

// ---- Reductions ----
Var sum(Var a);
Var mean(Var a);
Var mse(Var a, Var b);
// Softmax cross-entropy of a single logit row against a class index.
Var cross_entropy(Var logits, int label);

// ---- Spatial ops on [C, H, W] ----
// weight is [Cout, Cin*k*k], bias is [Cout].
Var conv2d(Var x, Var weight, Var bias, int kernel, int stride, int pad);
Var upsample_nearest2(Var x);
Var avg_pool2(Var x);

}  // namespace mindvis

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "flowvi/errors.hpp"
#include "flowvi/rng.hpp"

namespace flowvi {

// Shapes are rank 0 (scalar), 1 (vector) or 2 (matrix), row-major storage.
using Shape = std::vector<long>;

long shape_size(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  const char* op = "leaf";
  // Reads this->grad and accumulates into the parents captured by the closure.
  std::function<void(TensorNode&)> backprop;
};

}  // namespace detail

class Tape;

// Value-semantics handle to a shared node. Copies alias the same storage.
// Tensors without grad state are plain immutable values; leaves created with
// requires_grad keep their gradient buffer across tapes so an optimizer can
// read it after backward.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> data);
  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double v);
  static Tensor scalar(double v);
  // A trainable parameter: requires_grad = true.
  static Tensor leaf(Shape shape, std::vector<double> data);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  long rank() const;
  long size() const;
  const std::vector<double>& data() const;
  double value() const;  // scalar tensors only
  double at(long i) const;
  double at(long i, long j) const;

  bool requires_grad() const;
  bool has_grad() const;
  const std::vector<double>& grad() const;  // ContractError if absent
  // Handle-level const: these mutate the shared node, like copying a pointer.
  void zero_grad() const;

  // Overwrite values in place (optimizer updates; never while a tape holds
  // ops that consumed the old values).
  void set_data(const std::vector<double>& v) const;

  detail::TensorNode* node() const { return node_.get(); }
  const std::shared_ptr<detail::TensorNode>& node_ptr() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorNode> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::TensorNode> node_;
  friend Tensor make_op_result(const char* op, Shape shape, std::vector<double> data,
                               const std::vector<Tensor>& inputs,
                               std::function<void(detail::TensorNode&)> backprop);
};

// Records ops executed while it is the active tape (one per thread, LIFO).
// backward() propagates from a scalar loss through the recorded ops in
// reverse execution order (each node visited once, fan-out sums) and then
// consumes the tape.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void backward(const Tensor& loss);
  std::size_t node_count() const { return nodes_.size(); }

  static Tape* current();

 private:
  std::vector<std::shared_ptr<detail::TensorNode>> nodes_;
  Tape* prev_ = nullptr;
  friend Tensor make_op_result(const char* op, Shape shape, std::vector<double> data,
                               const std::vector<Tensor>& inputs,
                               std::function<void(detail::TensorNode&)> backprop);
  friend class TapeSuspend;
};

// RAII: value-level computations (inverses, diagnostics) run under this so
// they never record onto an active training tape.
class TapeSuspend {
 public:
  TapeSuspend();
  ~TapeSuspend();
  TapeSuspend(const TapeSuspend&) = delete;
  TapeSuspend& operator=(const TapeSuspend&) = delete;

 private:
  Tape* saved_;
};

// Core op constructor: runs the finite-check on `data`, records the node on
// the active tape when any input requires grad, and wires `backprop` (which
// reads the node's grad and accumulates into the inputs it captured).
// Exposed so custom ops can be built on the same machinery.
Tensor make_op_result(const char* op, Shape shape, std::vector<double> data,
                      const std::vector<Tensor>& inputs,
                      std::function<void(detail::TensorNode&)> backprop);

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor square(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope);
Tensor clamp(const Tensor& a, double lo, double hi);  // pass-through grad inside [lo,hi]

// ---- linear algebra (2-D) ----
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor matvec(const Tensor& a, const Tensor& x);  // [m,n]·[n] -> [m]
Tensor vecmat(const Tensor& x, const Tensor& a);  // [m]·[m,n] -> [n]
Tensor transpose(const Tensor& a);
Tensor outer(const Tensor& x, const Tensor& y);  // [m]⊗[n] -> [m,n]

// ---- reductions ----
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor dot(const Tensor& a, const Tensor& b);

// ---- shape ----
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, long start, long len);
std::vector<Tensor> split(const Tensor& a, int axis, const std::vector<long>& sizes);
Tensor broadcast_to(const Tensor& a, const Shape& shape);
Tensor reverse(const Tensor& a);  // 1-D coordinate reversal

// ---- indexed ----
Tensor embedding_lookup(const Tensor& table, const std::vector<long>& ids);
Tensor gather_cols(const Tensor& a, const std::vector<long>& cols);  // [n,V],[n] -> [n]

// ---- neural ----
Tensor softmax(const Tensor& a);      // over the last axis
Tensor log_softmax(const Tensor& a);  // over the last axis, fused-stable
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
Tensor dropout(const Tensor& x, double p, Rng& rng, bool training);

}  // namespace flowvi

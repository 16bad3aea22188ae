#pragma once

#include <string>
#include <vector>

#include "flowvi/rng.hpp"
#include "flowvi/tensor.hpp"

namespace flowvi {

struct NamedParam {
  std::string name;
  Tensor tensor;
};

// Flat registry of trainable parameters, addressed by stable dotted names.
class ParamList {
 public:
  void add(std::string name, const Tensor& t);
  void extend(const ParamList& other);
  const std::vector<NamedParam>& items() const { return items_; }
  std::size_t count() const { return items_.size(); }
  long total_size() const;
  const Tensor* find(const std::string& name) const;

 private:
  std::vector<NamedParam> items_;
};

// Per-call forward context: training toggles dropout, rng feeds it.
struct ForwardCtx {
  bool training = false;
  Rng* rng = nullptr;
};

enum class Activation { tanh_fn, relu_fn, leaky_relu_fn };

Activation activation_from_string(const std::string& s);
Tensor apply_activation(Activation a, const Tensor& x, double leaky_slope = 0.01);
// Supremum of the activation's first derivative (used by flow constraints).
double activation_deriv_sup(Activation a, double leaky_slope = 0.01);
double activation_deriv(Activation a, double x, double leaky_slope = 0.01);

// ---- initializers (all return requires_grad leaves) ----
Tensor init_xavier(long in, long out, Rng& rng);         // [in,out]
Tensor init_normal(Shape shape, double stddev, Rng& rng);
Tensor init_zeros(Shape shape);
Tensor init_const(Shape shape, double v);

// Dense layer; weights are input-major so forward(x) = x·W + b.
class Linear {
 public:
  Linear() = default;
  Linear(long in, long out, Rng& rng, bool bias = true);
  Tensor forward(const Tensor& x) const;  // [n,in] -> [n,out], or [in] -> [out]
  void collect(const std::string& prefix, ParamList& out) const;
  long in_dim() const { return W.shape()[0]; }
  long out_dim() const { return W.shape()[1]; }

  Tensor W;  // [in,out]
  Tensor b;  // [out]; undefined when bias-free
};

// MLP with identical activation+dropout on every hidden layer, linear output.
class Mlp {
 public:
  Mlp() = default;
  Mlp(long in, const std::vector<long>& hidden, long out, Activation act, double dropout_p,
      Rng& rng);
  Tensor forward(const Tensor& x, const ForwardCtx& ctx) const;
  void collect(const std::string& prefix, ParamList& out) const;

  std::vector<Linear> layers;
  Activation act = Activation::tanh_fn;
  double dropout_p = 0.0;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(long dim);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;

  Tensor gamma, beta;
};

}  // namespace flowvi

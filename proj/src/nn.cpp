#include "flowvi/nn.hpp"

#include <cmath>

namespace flowvi {

void ParamList::add(std::string name, const Tensor& t) {
  items_.push_back({std::move(name), t});
}

void ParamList::extend(const ParamList& other) {
  items_.insert(items_.end(), other.items_.begin(), other.items_.end());
}

long ParamList::total_size() const {
  long n = 0;
  for (const auto& p : items_) n += p.tensor.size();
  return n;
}

const Tensor* ParamList::find(const std::string& name) const {
  for (const auto& p : items_)
    if (p.name == name) return &p.tensor;
  return nullptr;
}

Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::tanh_fn;
  if (s == "relu") return Activation::relu_fn;
  if (s == "leakyrelu") return Activation::leaky_relu_fn;
  throw ValidationError("unknown activation '" + s + "' (expected tanh|relu|leakyrelu)");
}

Tensor apply_activation(Activation a, const Tensor& x, double leaky_slope) {
  switch (a) {
    case Activation::tanh_fn:
      return tanh(x);
    case Activation::relu_fn:
      return relu(x);
    case Activation::leaky_relu_fn:
      return leaky_relu(x, leaky_slope);
  }
  throw ContractError("apply_activation: bad enum");
}

double activation_deriv_sup(Activation a, double leaky_slope) {
  switch (a) {
    case Activation::tanh_fn:
      return 1.0;
    case Activation::relu_fn:
      return 1.0;
    case Activation::leaky_relu_fn:
      return std::max(1.0, leaky_slope);
  }
  throw ContractError("activation_deriv_sup: bad enum");
}

double activation_deriv(Activation a, double x, double leaky_slope) {
  switch (a) {
    case Activation::tanh_fn: {
      const double t = std::tanh(x);
      return 1.0 - t * t;
    }
    case Activation::relu_fn:
      return x > 0.0 ? 1.0 : 0.0;
    case Activation::leaky_relu_fn:
      return x > 0.0 ? 1.0 : leaky_slope;
  }
  throw ContractError("activation_deriv: bad enum");
}

Tensor init_xavier(long in, long out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  std::vector<double> d(static_cast<std::size_t>(in * out));
  for (auto& v : d) v = (2.0 * rng.uniform() - 1.0) * limit;
  return Tensor::leaf({in, out}, std::move(d));
}

Tensor init_normal(Shape shape, double stddev, Rng& rng) {
  std::vector<double> d(static_cast<std::size_t>(shape_size(shape)));
  for (auto& v : d) v = rng.normal() * stddev;
  return Tensor::leaf(std::move(shape), std::move(d));
}

Tensor init_zeros(Shape shape) {
  std::vector<double> d(static_cast<std::size_t>(shape_size(shape)), 0.0);
  return Tensor::leaf(std::move(shape), std::move(d));
}

Tensor init_const(Shape shape, double v) {
  std::vector<double> d(static_cast<std::size_t>(shape_size(shape)), v);
  return Tensor::leaf(std::move(shape), std::move(d));
}

Linear::Linear(long in, long out, Rng& rng, bool bias) {
  W = init_xavier(in, out, rng);
  if (bias) b = init_zeros({out});
}

Tensor Linear::forward(const Tensor& x) const {
  Tensor y;
  if (x.rank() == 1) {
    y = vecmat(x, W);
    if (b.defined()) y = add(y, b);
  } else {
    y = matmul(x, W);
    if (b.defined()) y = add(y, broadcast_to(b, y.shape()));
  }
  return y;
}

void Linear::collect(const std::string& prefix, ParamList& out) const {
  out.add(prefix + ".W", W);
  if (b.defined()) out.add(prefix + ".b", b);
}

Mlp::Mlp(long in, const std::vector<long>& hidden, long out, Activation a, double p, Rng& rng)
    : act(a), dropout_p(p) {
  long cur = in;
  for (long h : hidden) {
    layers.emplace_back(cur, h, rng);
    cur = h;
  }
  layers.emplace_back(cur, out, rng);
}

Tensor Mlp::forward(const Tensor& x, const ForwardCtx& ctx) const {
  Tensor h = x;
  for (std::size_t i = 0; i + 1 < layers.size(); ++i) {
    h = apply_activation(act, layers[i].forward(h));
    if (ctx.training && dropout_p > 0.0) {
      if (!ctx.rng) throw ContractError("Mlp::forward: training dropout needs an rng");
      h = dropout(h, dropout_p, *ctx.rng, true);
    }
  }
  return layers.back().forward(h);
}

void Mlp::collect(const std::string& prefix, ParamList& out) const {
  for (std::size_t i = 0; i < layers.size(); ++i)
    layers[i].collect(prefix + ".l" + std::to_string(i), out);
}

LayerNorm::LayerNorm(long dim) {
  gamma = init_const({dim}, 1.0);
  beta = init_zeros({dim});
}

Tensor LayerNorm::forward(const Tensor& x) const { return layer_norm(x, gamma, beta); }

void LayerNorm::collect(const std::string& prefix, ParamList& out) const {
  out.add(prefix + ".gamma", gamma);
  out.add(prefix + ".beta", beta);
}

}  // namespace flowvi

#include "flowvi/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <sstream>

namespace flowvi {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapCMat = Eigen::Map<const RowMat>;

thread_local Tape* g_current_tape = nullptr;

bool all_finite(const std::vector<double>& v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

void ensure_grad(detail::TensorNode* n) {
  if (n->grad.empty()) n->grad.assign(n->data.size(), 0.0);
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double stable_softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

[[noreturn]] void shape_fail(const char* op, const std::string& detail) {
  throw ShapeError(std::string(op) + ": " + detail);
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    shape_fail(op, "operand shapes differ: " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
}

}  // namespace

long shape_size(const Shape& s) {
  long n = 1;
  for (long d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

// ---- Tensor ----

Tensor Tensor::from(Shape shape, std::vector<double> data) {
  if (static_cast<long>(data.size()) != shape_size(shape))
    throw ShapeError("tensor: data size " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  auto n = std::make_shared<detail::TensorNode>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  return Tensor(std::move(n));
}

Tensor Tensor::zeros(Shape shape) {
  std::vector<double> d(static_cast<std::size_t>(shape_size(shape)), 0.0);
  return from(std::move(shape), std::move(d));
}

Tensor Tensor::full(Shape shape, double v) {
  std::vector<double> d(static_cast<std::size_t>(shape_size(shape)), v);
  return from(std::move(shape), std::move(d));
}

Tensor Tensor::scalar(double v) { return from({}, {v}); }

Tensor Tensor::leaf(Shape shape, std::vector<double> data) {
  Tensor t = from(std::move(shape), std::move(data));
  t.node_->requires_grad = true;
  return t;
}

const Shape& Tensor::shape() const { return node_->shape; }
long Tensor::rank() const { return static_cast<long>(node_->shape.size()); }
long Tensor::size() const { return static_cast<long>(node_->data.size()); }
const std::vector<double>& Tensor::data() const { return node_->data; }

double Tensor::value() const {
  if (!node_ || node_->data.size() != 1 || !node_->shape.empty())
    throw ContractError("value(): tensor is not a scalar");
  return node_->data[0];
}

double Tensor::at(long i) const { return node_->data[static_cast<std::size_t>(i)]; }

double Tensor::at(long i, long j) const {
  return node_->data[static_cast<std::size_t>(i * node_->shape[1] + j)];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

const std::vector<double>& Tensor::grad() const {
  if (!has_grad())
    throw ContractError("grad(): no gradient has been accumulated for this tensor");
  return node_->grad;
}

void Tensor::zero_grad() const {
  if (node_) node_->grad.clear();
}

void Tensor::set_data(const std::vector<double>& v) const {
  if (v.size() != node_->data.size())
    throw ShapeError("set_data: size " + std::to_string(v.size()) +
                     " does not match tensor size " + std::to_string(node_->data.size()));
  node_->data = v;
}

// ---- Tape ----

Tape::Tape() {
  prev_ = g_current_tape;
  g_current_tape = this;
}

Tape::~Tape() { g_current_tape = prev_; }

Tape* Tape::current() { return g_current_tape; }

TapeSuspend::TapeSuspend() : saved_(g_current_tape) { g_current_tape = nullptr; }
TapeSuspend::~TapeSuspend() { g_current_tape = saved_; }

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || !loss.shape().empty())
    throw ContractError("backward: loss must be a scalar tensor");
  if (!loss.requires_grad())
    throw ContractError("backward: loss is not connected to any recorded op");
  loss.node()->grad.assign(1, 1.0);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    detail::TensorNode* n = it->get();
    if (n->backprop && !n->grad.empty()) n->backprop(*n);
  }
  nodes_.clear();
}

// ---- op machinery ----

Tensor make_op_result(const char* op, Shape shape, std::vector<double> data,
                      const std::vector<Tensor>& inputs,
                      std::function<void(detail::TensorNode&)> backprop) {
  if (!all_finite(data))
    throw NumericError(std::string(op) + ": produced a non-finite value");
  auto n = std::make_shared<detail::TensorNode>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->op = op;
  Tape* tape = Tape::current();
  bool any_grad = false;
  for (const auto& t : inputs) any_grad = any_grad || t.requires_grad();
  if (tape && any_grad) {
    n->requires_grad = true;
    n->backprop = std::move(backprop);
    tape->nodes_.push_back(n);
  }
  Tensor out;
  out = Tensor(n);
  return out;
}

namespace {

// Same-shape elementwise binary op.
Tensor ew_binary(const char* op, const Tensor& a, const Tensor& b,
                 double (*f)(double, double),
                 void (*df)(double g, double av, double bv, double yv, double* da, double* db)) {
  check_same_shape(op, a, b);
  const auto& ad = a.data();
  const auto& bd = b.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = f(ad[i], bd[i]);
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return make_op_result(op, a.shape(), std::move(out), {a, b},
                        [an, bn, df](detail::TensorNode& self) {
                          const bool ga = an->requires_grad;
                          const bool gb = bn->requires_grad;
                          if (ga) ensure_grad(an.get());
                          if (gb) ensure_grad(bn.get());
                          for (std::size_t i = 0; i < self.data.size(); ++i) {
                            double da = 0.0, db = 0.0;
                            df(self.grad[i], an->data[i], bn->data[i], self.data[i], &da, &db);
                            if (ga) an->grad[i] += da;
                            if (gb) bn->grad[i] += db;
                          }
                        });
}

Tensor ew_unary(const char* op, const Tensor& a, double (*f)(double),
                double (*df)(double g, double x, double y)) {
  const auto& ad = a.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = f(ad[i]);
  auto an = a.node_ptr();
  return make_op_result(op, a.shape(), std::move(out), {a},
                        [an, df](detail::TensorNode& self) {
                          if (!an->requires_grad) return;
                          ensure_grad(an.get());
                          for (std::size_t i = 0; i < self.data.size(); ++i)
                            an->grad[i] += df(self.grad[i], an->data[i], self.data[i]);
                        });
}

// Ops that are pure index relocations: out[i] = in[map[i]].
Tensor index_map_op(const char* op, const Tensor& a, Shape out_shape, std::vector<long> map) {
  const auto& ad = a.data();
  std::vector<double> out(map.size());
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = ad[static_cast<std::size_t>(map[i])];
  auto an = a.node_ptr();
  auto shared_map = std::make_shared<std::vector<long>>(std::move(map));
  return make_op_result(op, std::move(out_shape), std::move(out), {a},
                        [an, shared_map](detail::TensorNode& self) {
                          if (!an->requires_grad) return;
                          ensure_grad(an.get());
                          const auto& m = *shared_map;
                          for (std::size_t i = 0; i < m.size(); ++i)
                            an->grad[static_cast<std::size_t>(m[i])] += self.grad[i];
                        });
}

}  // namespace

// ---- elementwise ----

Tensor add(const Tensor& a, const Tensor& b) {
  return ew_binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double g, double, double, double, double* da, double* db) {
        *da = g;
        *db = g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return ew_binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double g, double, double, double, double* da, double* db) {
        *da = g;
        *db = -g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return ew_binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double g, double av, double bv, double, double* da, double* db) {
        *da = g * bv;
        *db = g * av;
      });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return ew_binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double g, double, double bv, double yv, double* da, double* db) {
        *da = g / bv;
        *db = -g * yv / bv;
      });
}

Tensor add_scalar(const Tensor& a, double s) {
  std::vector<double> out(a.data());
  for (auto& v : out) v += s;
  auto an = a.node_ptr();
  return make_op_result("add_scalar", a.shape(), std::move(out), {a},
                        [an](detail::TensorNode& self) {
                          if (!an->requires_grad) return;
                          ensure_grad(an.get());
                          for (std::size_t i = 0; i < self.data.size(); ++i)
                            an->grad[i] += self.grad[i];
                        });
}

Tensor mul_scalar(const Tensor& a, double s) {
  std::vector<double> out(a.data());
  for (auto& v : out) v *= s;
  auto an = a.node_ptr();
  return make_op_result("mul_scalar", a.shape(), std::move(out), {a},
                        [an, s](detail::TensorNode& self) {
                          if (!an->requires_grad) return;
                          ensure_grad(an.get());
                          for (std::size_t i = 0; i < self.data.size(); ++i)
                            an->grad[i] += self.grad[i] * s;
                        });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor exp(const Tensor& a) {
  return ew_unary(
      "exp", a, [](double x) { return std::exp(x); },
      [](double g, double, double y) { return g * y; });
}

Tensor log(const Tensor& a) {
  return ew_unary(
      "log", a, [](double x) { return std::log(x); },
      [](double g, double x, double) { return g / x; });
}

Tensor sqrt(const Tensor& a) {
  return ew_unary(
      "sqrt", a, [](double x) { return std::sqrt(x); },
      [](double g, double, double y) { return g / (2.0 * y); });
}

Tensor square(const Tensor& a) {
  return ew_unary(
      "square", a, [](double x) { return x * x; },
      [](double g, double x, double) { return 2.0 * g * x; });
}

Tensor abs(const Tensor& a) {
  return ew_unary(
      "abs", a, [](double x) { return std::abs(x); },
      [](double g, double x, double) { return x > 0.0 ? g : (x < 0.0 ? -g : 0.0); });
}

Tensor tanh(const Tensor& a) {
  return ew_unary(
      "tanh", a, [](double x) { return std::tanh(x); },
      [](double g, double, double y) { return g * (1.0 - y * y); });
}

Tensor sigmoid(const Tensor& a) {
  return ew_unary(
      "sigmoid", a, [](double x) { return stable_sigmoid(x); },
      [](double g, double, double y) { return g * y * (1.0 - y); });
}

Tensor softplus(const Tensor& a) {
  return ew_unary(
      "softplus", a, [](double x) { return stable_softplus(x); },
      [](double g, double x, double) { return g * stable_sigmoid(x); });
}

Tensor relu(const Tensor& a) {
  return ew_unary(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double g, double x, double) { return x > 0.0 ? g : 0.0; });
}

Tensor leaky_relu(const Tensor& a, double slope) {
  const auto& ad = a.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] > 0.0 ? ad[i] : slope * ad[i];
  auto an = a.node_ptr();
  return make_op_result("leaky_relu", a.shape(), std::move(out), {a},
                        [an, slope](detail::TensorNode& self) {
                          if (!an->requires_grad) return;
                          ensure_grad(an.get());
                          for (std::size_t i = 0; i < self.data.size(); ++i)
                            an->grad[i] += self.grad[i] * (an->data[i] > 0.0 ? 1.0 : slope);
                        });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  if (lo > hi) throw ContractError("clamp: lo > hi");
  const auto& ad = a.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = std::min(std::max(ad[i], lo), hi);
  auto an = a.node_ptr();
  return make_op_result("clamp", a.shape(), std::move(out), {a},
                        [an, lo, hi](detail::TensorNode& self) {
                          if (!an->requires_grad) return;
                          ensure_grad(an.get());
                          for (std::size_t i = 0; i < self.data.size(); ++i) {
                            const double x = an->data[i];
                            if (x >= lo && x <= hi) an->grad[i] += self.grad[i];
                          }
                        });
}

// ---- linear algebra ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    shape_fail("matmul", "expects two matrices, got " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
  const long m = a.shape()[0], k = a.shape()[1], k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2)
    shape_fail("matmul", "inner dimensions differ: " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
  std::vector<double> out(static_cast<std::size_t>(m * n));
  {
    MapCMat A(a.data().data(), m, k), B(b.data().data(), k, n);
    MapMat C(out.data(), m, n);
    C.noalias() = A * B;
  }
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return make_op_result(
      "matmul", {m, n}, std::move(out), {a, b}, [an, bn, m, k, n](detail::TensorNode& self) {
        MapCMat G(self.grad.data(), m, n);
        MapCMat A(an->data.data(), m, k), B(bn->data.data(), k, n);
        if (an->requires_grad) {
          ensure_grad(an.get());
          MapMat dA(an->grad.data(), m, k);
          dA.noalias() += G * B.transpose();
        }
        if (bn->requires_grad) {
          ensure_grad(bn.get());
          MapMat dB(bn->grad.data(), k, n);
          dB.noalias() += A.transpose() * G;
        }
      });
}

Tensor matvec(const Tensor& a, const Tensor& x) {
  if (a.rank() != 2 || x.rank() != 1 || a.shape()[1] != x.shape()[0])
    shape_fail("matvec", shape_str(a.shape()) + " cannot multiply " + shape_str(x.shape()));
  const long m = a.shape()[0], n = a.shape()[1];
  std::vector<double> out(static_cast<std::size_t>(m));
  {
    MapCMat A(a.data().data(), m, n);
    Eigen::Map<const Eigen::VectorXd> X(x.data().data(), n);
    Eigen::Map<Eigen::VectorXd> Y(out.data(), m);
    Y.noalias() = A * X;
  }
  auto an = a.node_ptr();
  auto xn = x.node_ptr();
  return make_op_result(
      "matvec", {m}, std::move(out), {a, x}, [an, xn, m, n](detail::TensorNode& self) {
        Eigen::Map<const Eigen::VectorXd> G(self.grad.data(), m);
        MapCMat A(an->data.data(), m, n);
        Eigen::Map<const Eigen::VectorXd> X(xn->data.data(), n);
        if (an->requires_grad) {
          ensure_grad(an.get());
          MapMat dA(an->grad.data(), m, n);
          dA.noalias() += G * X.transpose();
        }
        if (xn->requires_grad) {
          ensure_grad(xn.get());
          Eigen::Map<Eigen::VectorXd> dX(xn->grad.data(), n);
          dX.noalias() += A.transpose() * G;
        }
      });
}

Tensor vecmat(const Tensor& x, const Tensor& a) {
  if (x.rank() != 1 || a.rank() != 2 || x.shape()[0] != a.shape()[0])
    shape_fail("vecmat", shape_str(x.shape()) + " cannot multiply " + shape_str(a.shape()));
  const long m = a.shape()[0], n = a.shape()[1];
  std::vector<double> out(static_cast<std::size_t>(n));
  {
    MapCMat A(a.data().data(), m, n);
    Eigen::Map<const Eigen::VectorXd> X(x.data().data(), m);
    Eigen::Map<Eigen::VectorXd> Y(out.data(), n);
    Y.noalias() = A.transpose() * X;
  }
  auto an = a.node_ptr();
  auto xn = x.node_ptr();
  return make_op_result(
      "vecmat", {n}, std::move(out), {x, a}, [an, xn, m, n](detail::TensorNode& self) {
        Eigen::Map<const Eigen::VectorXd> G(self.grad.data(), n);
        MapCMat A(an->data.data(), m, n);
        Eigen::Map<const Eigen::VectorXd> X(xn->data.data(), m);
        if (xn->requires_grad) {
          ensure_grad(xn.get());
          Eigen::Map<Eigen::VectorXd> dX(xn->grad.data(), m);
          dX.noalias() += A * G;
        }
        if (an->requires_grad) {
          ensure_grad(an.get());
          MapMat dA(an->grad.data(), m, n);
          dA.noalias() += X * G.transpose();
        }
      });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) shape_fail("transpose", "expects a matrix, got " + shape_str(a.shape()));
  const long m = a.shape()[0], n = a.shape()[1];
  std::vector<long> map(static_cast<std::size_t>(m * n));
  for (long j = 0; j < n; ++j)
    for (long i = 0; i < m; ++i) map[static_cast<std::size_t>(j * m + i)] = i * n + j;
  return index_map_op("transpose", a, {n, m}, std::move(map));
}

Tensor outer(const Tensor& x, const Tensor& y) {
  if (x.rank() != 1 || y.rank() != 1)
    shape_fail("outer", "expects two vectors, got " + shape_str(x.shape()) + " and " +
                            shape_str(y.shape()));
  const long m = x.shape()[0], n = y.shape()[0];
  std::vector<double> out(static_cast<std::size_t>(m * n));
  for (long i = 0; i < m; ++i)
    for (long j = 0; j < n; ++j)
      out[static_cast<std::size_t>(i * n + j)] = x.at(i) * y.at(j);
  auto xn = x.node_ptr();
  auto yn = y.node_ptr();
  return make_op_result(
      "outer", {m, n}, std::move(out), {x, y}, [xn, yn, m, n](detail::TensorNode& self) {
        if (xn->requires_grad) {
          ensure_grad(xn.get());
          for (long i = 0; i < m; ++i) {
            double s = 0.0;
            for (long j = 0; j < n; ++j)
              s += self.grad[static_cast<std::size_t>(i * n + j)] * yn->data[static_cast<std::size_t>(j)];
            xn->grad[static_cast<std::size_t>(i)] += s;
          }
        }
        if (yn->requires_grad) {
          ensure_grad(yn.get());
          for (long j = 0; j < n; ++j) {
            double s = 0.0;
            for (long i = 0; i < m; ++i)
              s += self.grad[static_cast<std::size_t>(i * n + j)] * xn->data[static_cast<std::size_t>(i)];
            yn->grad[static_cast<std::size_t>(j)] += s;
          }
        }
      });
}

// ---- reductions ----

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  auto an = a.node_ptr();
  return make_op_result("sum", {}, {s}, {a}, [an](detail::TensorNode& self) {
    if (!an->requires_grad) return;
    ensure_grad(an.get());
    for (auto& g : an->grad) g += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ContractError("mean: empty tensor");
  double s = 0.0;
  for (double v : a.data()) s += v;
  const double inv = 1.0 / static_cast<double>(a.size());
  auto an = a.node_ptr();
  return make_op_result("mean", {}, {s * inv}, {a}, [an, inv](detail::TensorNode& self) {
    if (!an->requires_grad) return;
    ensure_grad(an.get());
    for (auto& g : an->grad) g += self.grad[0] * inv;
  });
}

Tensor dot(const Tensor& a, const Tensor& b) {
  check_same_shape("dot", a, b);
  double s = 0.0;
  for (std::size_t i = 0; i < a.data().size(); ++i) s += a.data()[i] * b.data()[i];
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return make_op_result("dot", {}, {s}, {a, b}, [an, bn](detail::TensorNode& self) {
    const double g = self.grad[0];
    if (an->requires_grad) {
      ensure_grad(an.get());
      for (std::size_t i = 0; i < an->data.size(); ++i) an->grad[i] += g * bn->data[i];
    }
    if (bn->requires_grad) {
      ensure_grad(bn.get());
      for (std::size_t i = 0; i < bn->data.size(); ++i) bn->grad[i] += g * an->data[i];
    }
  });
}

// ---- shape ----

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size())
    shape_fail("reshape", "cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  std::vector<long> map(static_cast<std::size_t>(a.size()));
  for (long i = 0; i < a.size(); ++i) map[static_cast<std::size_t>(i)] = i;
  return index_map_op("reshape", a, std::move(shape), std::move(map));
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const long rank = parts[0].rank();
  if (rank == 0 || rank > 2) shape_fail("concat", "expects vectors or matrices");
  if (axis < 0 || axis >= rank) shape_fail("concat", "axis out of range");
  for (const auto& p : parts) {
    if (p.rank() != rank) shape_fail("concat", "mixed ranks");
    for (long d = 0; d < rank; ++d)
      if (d != axis && p.shape()[d] != parts[0].shape()[d])
        shape_fail("concat", "shapes incompatible along non-concat axis: " +
                                 shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
  }
  Shape out_shape = parts[0].shape();
  long total = 0;
  for (const auto& p : parts) total += p.shape()[axis];
  out_shape[axis] = total;

  std::vector<double> out(static_cast<std::size_t>(shape_size(out_shape)));
  // offsets[i] = start of part i along the concat axis
  std::vector<long> offsets(parts.size());
  {
    long off = 0;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      offsets[i] = off;
      off += parts[i].shape()[axis];
    }
  }
  const long rows = rank == 2 ? out_shape[0] : 1;
  const long cols = rank == 2 ? out_shape[1] : out_shape[0];
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const auto& p = parts[pi];
    if (rank == 1 || axis == 0) {
      // contiguous block
      const long base = offsets[pi] * (rank == 2 ? out_shape[1] : 1);
      std::copy(p.data().begin(), p.data().end(), out.begin() + base);
    } else {
      const long pc = p.shape()[1];
      for (long r = 0; r < rows; ++r)
        for (long c = 0; c < pc; ++c)
          out[static_cast<std::size_t>(r * cols + offsets[pi] + c)] =
              p.data()[static_cast<std::size_t>(r * pc + c)];
    }
  }

  std::vector<std::shared_ptr<detail::TensorNode>> pnodes;
  pnodes.reserve(parts.size());
  for (const auto& p : parts) pnodes.push_back(p.node_ptr());
  auto shapes = std::make_shared<std::vector<Shape>>();
  for (const auto& p : parts) shapes->push_back(p.shape());
  auto offs = std::make_shared<std::vector<long>>(std::move(offsets));

  return make_op_result(
      "concat", out_shape, std::move(out), parts,
      [pnodes, shapes, offs, rank, axis, rows, cols](detail::TensorNode& self) {
        for (std::size_t pi = 0; pi < pnodes.size(); ++pi) {
          auto& pn = pnodes[pi];
          if (!pn->requires_grad) continue;
          ensure_grad(pn.get());
          const Shape& ps = (*shapes)[pi];
          if (rank == 1 || axis == 0) {
            const long base = (*offs)[pi] * (rank == 2 ? cols : 1);
            for (std::size_t i = 0; i < pn->data.size(); ++i)
              pn->grad[i] += self.grad[static_cast<std::size_t>(base) + i];
          } else {
            const long pc = ps[1];
            for (long r = 0; r < rows; ++r)
              for (long c = 0; c < pc; ++c)
                pn->grad[static_cast<std::size_t>(r * pc + c)] +=
                    self.grad[static_cast<std::size_t>(r * cols + (*offs)[pi] + c)];
          }
        }
      });
}

Tensor slice(const Tensor& a, int axis, long start, long len) {
  const long rank = a.rank();
  if (rank == 0 || rank > 2) shape_fail("slice", "expects a vector or matrix");
  if (axis < 0 || axis >= rank) shape_fail("slice", "axis out of range");
  if (start < 0 || len < 0 || start + len > a.shape()[axis])
    shape_fail("slice", "range [" + std::to_string(start) + "," + std::to_string(start + len) +
                            ") out of bounds for " + shape_str(a.shape()));
  Shape out_shape = a.shape();
  out_shape[axis] = len;
  std::vector<long> map(static_cast<std::size_t>(shape_size(out_shape)));
  if (rank == 1) {
    for (long i = 0; i < len; ++i) map[static_cast<std::size_t>(i)] = start + i;
  } else if (axis == 0) {
    const long cols = a.shape()[1];
    for (long r = 0; r < len; ++r)
      for (long c = 0; c < cols; ++c)
        map[static_cast<std::size_t>(r * cols + c)] = (start + r) * cols + c;
  } else {
    const long cols = a.shape()[1], rows = a.shape()[0];
    for (long r = 0; r < rows; ++r)
      for (long c = 0; c < len; ++c)
        map[static_cast<std::size_t>(r * len + c)] = r * cols + start + c;
  }
  return index_map_op("slice", a, std::move(out_shape), std::move(map));
}

std::vector<Tensor> split(const Tensor& a, int axis, const std::vector<long>& sizes) {
  long total = 0;
  for (long s : sizes) total += s;
  if (a.rank() == 0 || axis >= a.rank() || total != a.shape()[axis])
    shape_fail("split", "sizes do not cover axis: " + shape_str(a.shape()));
  std::vector<Tensor> out;
  long off = 0;
  for (long s : sizes) {
    out.push_back(slice(a, axis, off, s));
    off += s;
  }
  return out;
}

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  if (a.shape() == shape) return a;
  const long out_size = shape_size(shape);
  std::vector<long> map(static_cast<std::size_t>(out_size));
  const Shape& as = a.shape();
  bool ok = false;
  if (as.empty()) {
    std::fill(map.begin(), map.end(), 0L);
    ok = true;
  } else if (shape.size() == 2 && as.size() == 1 && as[0] == shape[1]) {
    // row vector replicated down the rows
    for (long r = 0; r < shape[0]; ++r)
      for (long c = 0; c < shape[1]; ++c) map[static_cast<std::size_t>(r * shape[1] + c)] = c;
    ok = true;
  } else if (shape.size() == 2 && as.size() == 2 && as[0] == 1 && as[1] == shape[1]) {
    for (long r = 0; r < shape[0]; ++r)
      for (long c = 0; c < shape[1]; ++c) map[static_cast<std::size_t>(r * shape[1] + c)] = c;
    ok = true;
  } else if (shape.size() == 2 && as.size() == 2 && as[1] == 1 && as[0] == shape[0]) {
    for (long r = 0; r < shape[0]; ++r)
      for (long c = 0; c < shape[1]; ++c) map[static_cast<std::size_t>(r * shape[1] + c)] = r;
    ok = true;
  } else if (shape.size() == 1 && as.size() == 1 && as[0] == 1) {
    std::fill(map.begin(), map.end(), 0L);
    ok = true;
  }
  if (!ok)
    shape_fail("broadcast_to", shape_str(as) + " does not broadcast to " + shape_str(shape));
  return index_map_op("broadcast_to", a, shape, std::move(map));
}

Tensor reverse(const Tensor& a) {
  if (a.rank() != 1) shape_fail("reverse", "expects a vector, got " + shape_str(a.shape()));
  const long n = a.shape()[0];
  std::vector<long> map(static_cast<std::size_t>(n));
  for (long i = 0; i < n; ++i) map[static_cast<std::size_t>(i)] = n - 1 - i;
  return index_map_op("reverse", a, a.shape(), std::move(map));
}

// ---- indexed ----

Tensor embedding_lookup(const Tensor& table, const std::vector<long>& ids) {
  if (table.rank() != 2) shape_fail("embedding_lookup", "table must be [V,e]");
  const long V = table.shape()[0], e = table.shape()[1];
  for (long id : ids)
    if (id < 0 || id >= V)
      throw ContractError("embedding_lookup: id " + std::to_string(id) +
                          " out of range for table with " + std::to_string(V) + " rows");
  const long n = static_cast<long>(ids.size());
  std::vector<long> map(static_cast<std::size_t>(n * e));
  for (long i = 0; i < n; ++i)
    for (long j = 0; j < e; ++j) map[static_cast<std::size_t>(i * e + j)] = ids[static_cast<std::size_t>(i)] * e + j;
  return index_map_op("embedding_lookup", table, {n, e}, std::move(map));
}

Tensor gather_cols(const Tensor& a, const std::vector<long>& cols) {
  if (a.rank() != 2) shape_fail("gather_cols", "expects a matrix");
  const long n = a.shape()[0], V = a.shape()[1];
  if (static_cast<long>(cols.size()) != n)
    shape_fail("gather_cols", "need one column index per row");
  std::vector<long> map(static_cast<std::size_t>(n));
  for (long i = 0; i < n; ++i) {
    const long c = cols[static_cast<std::size_t>(i)];
    if (c < 0 || c >= V)
      throw ContractError("gather_cols: column " + std::to_string(c) + " out of range");
    map[static_cast<std::size_t>(i)] = i * V + c;
  }
  return index_map_op("gather_cols", a, {n}, std::move(map));
}

// ---- neural ----

namespace {

// Treat rank-1 as a single row; returns (rows, cols).
std::pair<long, long> rows_cols(const char* op, const Tensor& a) {
  if (a.rank() == 1) return {1, a.shape()[0]};
  if (a.rank() == 2) return {a.shape()[0], a.shape()[1]};
  shape_fail(op, "expects a vector or matrix, got " + shape_str(a.shape()));
}

}  // namespace

Tensor softmax(const Tensor& a) {
  auto [rows, cols] = rows_cols("softmax", a);
  std::vector<double> out(a.data().size());
  for (long r = 0; r < rows; ++r) {
    const double* x = a.data().data() + r * cols;
    double* y = out.data() + r * cols;
    double mx = x[0];
    for (long c = 1; c < cols; ++c) mx = std::max(mx, x[c]);
    double z = 0.0;
    for (long c = 0; c < cols; ++c) {
      y[c] = std::exp(x[c] - mx);
      z += y[c];
    }
    for (long c = 0; c < cols; ++c) y[c] /= z;
  }
  auto an = a.node_ptr();
  return make_op_result("softmax", a.shape(), std::move(out), {a},
                        [an, rows = rows, cols = cols](detail::TensorNode& self) {
                          if (!an->requires_grad) return;
                          ensure_grad(an.get());
                          for (long r = 0; r < rows; ++r) {
                            const double* y = self.data.data() + r * cols;
                            const double* g = self.grad.data() + r * cols;
                            double gy = 0.0;
                            for (long c = 0; c < cols; ++c) gy += g[c] * y[c];
                            for (long c = 0; c < cols; ++c)
                              an->grad[static_cast<std::size_t>(r * cols + c)] += y[c] * (g[c] - gy);
                          }
                        });
}

Tensor log_softmax(const Tensor& a) {
  auto [rows, cols] = rows_cols("log_softmax", a);
  std::vector<double> out(a.data().size());
  for (long r = 0; r < rows; ++r) {
    const double* x = a.data().data() + r * cols;
    double* y = out.data() + r * cols;
    double mx = x[0];
    for (long c = 1; c < cols; ++c) mx = std::max(mx, x[c]);
    double z = 0.0;
    for (long c = 0; c < cols; ++c) z += std::exp(x[c] - mx);
    const double lz = mx + std::log(z);
    for (long c = 0; c < cols; ++c) y[c] = x[c] - lz;
  }
  auto an = a.node_ptr();
  return make_op_result("log_softmax", a.shape(), std::move(out), {a},
                        [an, rows = rows, cols = cols](detail::TensorNode& self) {
                          if (!an->requires_grad) return;
                          ensure_grad(an.get());
                          for (long r = 0; r < rows; ++r) {
                            const double* y = self.data.data() + r * cols;
                            const double* g = self.grad.data() + r * cols;
                            double gs = 0.0;
                            for (long c = 0; c < cols; ++c) gs += g[c];
                            for (long c = 0; c < cols; ++c)
                              an->grad[static_cast<std::size_t>(r * cols + c)] +=
                                  g[c] - std::exp(y[c]) * gs;
                          }
                        });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  auto [rows, cols] = rows_cols("layer_norm", x);
  if (gamma.rank() != 1 || gamma.shape()[0] != cols || beta.rank() != 1 ||
      beta.shape()[0] != cols)
    shape_fail("layer_norm", "gamma/beta must be vectors of width " + std::to_string(cols));
  std::vector<double> out(x.data().size());
  for (long r = 0; r < rows; ++r) {
    const double* xr = x.data().data() + r * cols;
    double* yr = out.data() + r * cols;
    double mu = 0.0;
    for (long c = 0; c < cols; ++c) mu += xr[c];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (long c = 0; c < cols; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<double>(cols);
    const double inv_s = 1.0 / std::sqrt(var + eps);
    for (long c = 0; c < cols; ++c)
      yr[c] = gamma.data()[static_cast<std::size_t>(c)] * (xr[c] - mu) * inv_s +
              beta.data()[static_cast<std::size_t>(c)];
  }
  auto xn = x.node_ptr();
  auto gn = gamma.node_ptr();
  auto bn = beta.node_ptr();
  return make_op_result(
      "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
      [xn, gn, bn, rows = rows, cols = cols, eps](detail::TensorNode& self) {
        const double inv_d = 1.0 / static_cast<double>(cols);
        std::vector<double> xh(static_cast<std::size_t>(cols));
        for (long r = 0; r < rows; ++r) {
          const double* xr = xn->data.data() + r * cols;
          const double* g = self.grad.data() + r * cols;
          double mu = 0.0;
          for (long c = 0; c < cols; ++c) mu += xr[c];
          mu *= inv_d;
          double var = 0.0;
          for (long c = 0; c < cols; ++c) var += (xr[c] - mu) * (xr[c] - mu);
          var *= inv_d;
          const double inv_s = 1.0 / std::sqrt(var + eps);
          for (long c = 0; c < cols; ++c) xh[static_cast<std::size_t>(c)] = (xr[c] - mu) * inv_s;
          if (gn->requires_grad) {
            ensure_grad(gn.get());
            for (long c = 0; c < cols; ++c)
              gn->grad[static_cast<std::size_t>(c)] += g[c] * xh[static_cast<std::size_t>(c)];
          }
          if (bn->requires_grad) {
            ensure_grad(bn.get());
            for (long c = 0; c < cols; ++c) bn->grad[static_cast<std::size_t>(c)] += g[c];
          }
          if (xn->requires_grad) {
            ensure_grad(xn.get());
            double m1 = 0.0, m2 = 0.0;  // mean(dxh), mean(dxh*xh)
            std::vector<double> dxh(static_cast<std::size_t>(cols));
            for (long c = 0; c < cols; ++c) {
              dxh[static_cast<std::size_t>(c)] = g[c] * gn->data[static_cast<std::size_t>(c)];
              m1 += dxh[static_cast<std::size_t>(c)];
              m2 += dxh[static_cast<std::size_t>(c)] * xh[static_cast<std::size_t>(c)];
            }
            m1 *= inv_d;
            m2 *= inv_d;
            for (long c = 0; c < cols; ++c)
              xn->grad[static_cast<std::size_t>(r * cols + c)] +=
                  inv_s * (dxh[static_cast<std::size_t>(c)] - m1 -
                           xh[static_cast<std::size_t>(c)] * m2);
          }
        }
      });
}

Tensor dropout(const Tensor& x, double p, Rng& rng, bool training) {
  if (p < 0.0 || p >= 1.0)
    throw ContractError("dropout: rate must be in [0,1), got " + std::to_string(p));
  if (!training || p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  auto mask = std::make_shared<std::vector<double>>(x.data().size());
  std::vector<double> out(x.data().size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = rng.uniform() >= p ? keep_scale : 0.0;
    out[i] = x.data()[i] * (*mask)[i];
  }
  auto xnode = x.node_ptr();
  return make_op_result("dropout", x.shape(), std::move(out), {x},
                        [xnode, mask](detail::TensorNode& self) {
                          if (!xnode->requires_grad) return;
                          ensure_grad(xnode.get());
                          for (std::size_t i = 0; i < self.data.size(); ++i)
                            xnode->grad[i] += self.grad[i] * (*mask)[i];
                        });
}

}  // namespace flowvi

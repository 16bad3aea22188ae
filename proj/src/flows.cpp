#include "flowvi/flows.hpp"

#include <Eigen/Core>
#include <Eigen/LU>
#include <cmath>

namespace flowvi {

namespace {

constexpr double kMinBinFrac = 1e-3;
constexpr double kMinDeriv = 1e-3;

// softplus(0 + shift) + kMinDeriv == 1 exactly, so zero conditioner output
// gives unit knot derivatives (identity-like spline).
const double kDerivShift = std::log(std::exp(1.0 - kMinDeriv) - 1.0);

Tensor scale_vec(const Tensor& s, const Tensor& v) {
  return mul(broadcast_to(s, v.shape()), v);
}

// h'(a) as a tape expression. For tanh the second derivative exists and the
// expression stays differentiable; for (leaky) relu the derivative is a step
// function, constant almost everywhere, so a value-level constant is exact.
Tensor hprime(Activation act, const Tensor& a, const Tensor& h, double slope) {
  switch (act) {
    case Activation::tanh_fn:
      return add_scalar(neg(square(h)), 1.0);
    case Activation::relu_fn:
    case Activation::leaky_relu_fn: {
      std::vector<double> d(a.data().size());
      const double lo = act == Activation::relu_fn ? 0.0 : slope;
      for (std::size_t i = 0; i < d.size(); ++i) d[i] = a.data()[i] > 0.0 ? 1.0 : lo;
      return Tensor::from(a.shape(), std::move(d));
    }
  }
  throw ContractError("hprime: bad activation");
}

void check_point(const char* family, const FlowLayer& layer, const Tensor& z) {
  if (z.rank() != 1 || z.shape()[0] != layer.dim())
    throw ShapeError(std::string(family) + ": expected a vector of dim " +
                     std::to_string(layer.dim()) + ", got " + shape_str(z.shape()));
}

// out[pos[i]] = src[i], everything else zero; gradient gathers back.
Tensor scatter_vals(Shape out_shape, const std::vector<long>& pos, const Tensor& src) {
  std::vector<double> out(static_cast<std::size_t>(shape_size(out_shape)), 0.0);
  for (std::size_t i = 0; i < pos.size(); ++i)
    out[static_cast<std::size_t>(pos[i])] = src.data()[i];
  auto sn = src.node_ptr();
  auto p = std::make_shared<std::vector<long>>(pos);
  return make_op_result("scatter", std::move(out_shape), std::move(out), {src},
                        [sn, p](detail::TensorNode& self) {
                          if (!sn->requires_grad) return;
                          if (sn->grad.empty()) sn->grad.assign(sn->data.size(), 0.0);
                          for (std::size_t i = 0; i < p->size(); ++i)
                            sn->grad[i] += self.grad[static_cast<std::size_t>((*p)[i])];
                        });
}

Tensor pick(const Tensor& v, long i) { return reshape(slice(v, 0, i, 1), {}); }

std::vector<long> iota_ids(long n) {
  std::vector<long> v(static_cast<std::size_t>(n));
  for (long i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = i;
  return v;
}

void scale_final_layer(Mlp& mlp, double init_scale, Rng& rng) {
  Linear& last = mlp.layers.back();
  std::vector<double> w(static_cast<std::size_t>(last.W.size()));
  for (auto& v : w) v = rng.normal() * init_scale;
  last.W.set_data(w);
  if (last.b.defined())
    last.b.set_data(std::vector<double>(static_cast<std::size_t>(last.b.size()), 0.0));
}

}  // namespace

FlowKind flow_kind_from_string(const std::string& s) {
  if (s == "planar") return FlowKind::planar;
  if (s == "radial") return FlowKind::radial;
  if (s == "sylvester") return FlowKind::sylvester;
  if (s == "realnvp") return FlowKind::realnvp;
  if (s == "maf") return FlowKind::maf;
  if (s == "iaf") return FlowKind::iaf;
  if (s == "rlnsf") return FlowKind::rlnsf;
  if (s == "rqnsf") return FlowKind::rqnsf;
  throw ValidationError("unknown flow kind '" + s +
                        "' (expected planar|radial|sylvester|realnvp|maf|iaf|rlnsf|rqnsf)");
}

std::string flow_kind_name(FlowKind k) {
  switch (k) {
    case FlowKind::planar: return "planar";
    case FlowKind::radial: return "radial";
    case FlowKind::sylvester: return "sylvester";
    case FlowKind::realnvp: return "realnvp";
    case FlowKind::maf: return "maf";
    case FlowKind::iaf: return "iaf";
    case FlowKind::rlnsf: return "rlnsf";
    case FlowKind::rqnsf: return "rqnsf";
  }
  return "?";
}

bool flow_kind_invertible(FlowKind k) {
  switch (k) {
    case FlowKind::realnvp:
    case FlowKind::maf:
    case FlowKind::iaf:
    case FlowKind::rlnsf:
    case FlowKind::rqnsf:
      return true;
    default:
      return false;
  }
}

FlowResult FlowLayer::forward(const Tensor& z) const {
  const std::string name = flow_kind_name(kind());
  if (z.rank() != 1 || z.shape()[0] != dim())
    throw ShapeError(name + " flow: expected a vector of dim " + std::to_string(dim()) +
                     ", got " + shape_str(z.shape()));
  try {
    return do_forward(z);
  } catch (const NumericError& e) {
    throw NumericError(name + " flow: " + e.what());
  }
}

Tensor FlowLayer::inverse(const Tensor&) const {
  throw CapabilityError(flow_kind_name(kind()) +
                        " flow is not invertible in closed form");
}

// ---- planar: f(z) = z + u_hat * h(wᵀz + b) ----

PlanarFlow::PlanarFlow(long d, Activation a, Rng& rng, double slope)
    : act(a), leaky_slope(slope) {
  if (d < 1) throw ContractError("planar flow: dim must be >= 1");
  if (activation_deriv_sup(a, slope) > 1.0)
    throw ContractError("planar flow: activation derivative sup must be <= 1");
  u = init_normal({d}, 0.1, rng);
  w = init_normal({d}, 0.1, rng);
  b = init_zeros({});
}

FlowResult PlanarFlow::do_forward(const Tensor& z) const {
  Tensor uh = u_hat_expr();
  Tensor a = add(dot(w, z), b);
  Tensor h = apply_activation(act, a, leaky_slope);
  Tensor out = add(z, scale_vec(h, uh));
  Tensor hp = hprime(act, a, h, leaky_slope);
  Tensor logdet = log(add_scalar(mul(hp, dot(w, uh)), 1.0));
  return {out, logdet};
}

// Invertibility needs wᵀu_hat > -1. Reprojecting onto the softplus floor
// m(wᵀu) = -1 + softplus(wᵀu) only when u violates it keeps u_hat = u for
// already-valid parameters (so u = 0 is an exact identity layer) while the
// repaired value still satisfies wᵀu_hat = m(wᵀu) > -1. The two branches
// meet where wᵀu = m(wᵀu), so the map stays continuous in the parameters.
Tensor PlanarFlow::u_hat_expr() const {
  Tensor wTw = dot(w, w);
  if (wTw.value() < 1e-12)
    throw NumericError("direction w is numerically zero (degenerate)");
  Tensor wTu = dot(w, u);
  Tensor floor = add_scalar(softplus(wTu), -1.0);
  if (wTu.value() >= floor.value()) return u;
  Tensor coef = div(sub(floor, wTu), wTw);
  return add(u, scale_vec(coef, w));
}

Tensor PlanarFlow::u_hat() const {
  TapeSuspend guard;
  return u_hat_expr();
}

double PlanarFlow::w_dot_u_hat() const {
  TapeSuspend guard;
  return dot(w, u_hat()).value();
}

void PlanarFlow::collect(const std::string& prefix, ParamList& out) const {
  out.add(prefix + ".u", u);
  out.add(prefix + ".w", w);
  out.add(prefix + ".b", b);
}

// ---- radial: f(z) = z + beta * h(alpha, r) * (z - z_ref), h = 1/(alpha+r) ----

RadialFlow::RadialFlow(long d, Rng& rng) {
  if (d < 1) throw ContractError("radial flow: dim must be >= 1");
  z_ref = init_normal({d}, 0.1, rng);
  alpha_raw = init_normal({}, 0.1, rng);
  beta_raw = init_normal({}, 0.1, rng);
}

FlowResult RadialFlow::do_forward(const Tensor& z) const {
  const long d = dim();
  Tensor alpha = softplus(alpha_raw);
  Tensor beta = add(neg(alpha), softplus(beta_raw));  // beta > -alpha
  Tensor diff = sub(z, z_ref);
  Tensor r = sqrt(dot(diff, diff));
  Tensor hv = div(Tensor::scalar(1.0), add(alpha, r));
  Tensor out = add(z, scale_vec(mul(beta, hv), diff));
  // det J = (1 + beta h)^(d-1) (1 + alpha beta h^2); both factors positive
  Tensor t1 = mul_scalar(log(add_scalar(mul(beta, hv), 1.0)), static_cast<double>(d - 1));
  Tensor t2 = log(add_scalar(mul(mul(alpha, beta), square(hv)), 1.0));
  return {out, add(t1, t2)};
}

double RadialFlow::alpha_value() const {
  TapeSuspend guard;
  return softplus(alpha_raw).value();
}

double RadialFlow::beta_value() const {
  TapeSuspend guard;
  return -softplus(alpha_raw).value() + softplus(beta_raw).value();
}

void RadialFlow::collect(const std::string& prefix, ParamList& out) const {
  out.add(prefix + ".z_ref", z_ref);
  out.add(prefix + ".alpha_raw", alpha_raw);
  out.add(prefix + ".beta_raw", beta_raw);
}

// ---- sylvester: f(z) = z + Q R h(R~ Qᵀ z + b) ----

SylvesterFlow::SylvesterFlow(long d, long units, Activation a, Rng& rng, double slope)
    : dim_(d), units_(units), act(a), leaky_slope(slope) {
  if (d < 1) throw ContractError("sylvester flow: dim must be >= 1");
  if (units < 1 || units > d)
    throw ContractError("sylvester flow: units must be in [1, dim], got " +
                        std::to_string(units));
  if (activation_deriv_sup(a, slope) > 1.0)
    throw ContractError("sylvester flow: activation derivative sup must be <= 1");
  for (long i = 0; i < units; ++i) house_v.push_back(init_normal({d}, 1.0, rng));
  r_diag_raw = init_normal({units}, 0.1, rng);
  rt_diag_raw = init_normal({units}, 0.1, rng);
  const long n_off = units * (units - 1) / 2;
  if (n_off > 0) {
    r_off_raw = init_normal({n_off}, 0.01, rng);
    rt_off_raw = init_normal({n_off}, 0.01, rng);
  }
  bias = init_zeros({units});
}

Tensor SylvesterFlow::build_r(const Tensor& diag_raw, const Tensor& off_raw) const {
  const long M = units_;
  std::vector<long> diag_pos(static_cast<std::size_t>(M));
  for (long i = 0; i < M; ++i) diag_pos[static_cast<std::size_t>(i)] = i * M + i;
  // |diag| < 1 via tanh keeps every det factor 1 + h' R~ii Rii positive
  Tensor r = scatter_vals({M, M}, diag_pos, tanh(diag_raw));
  if (off_raw.defined() && off_raw.size() > 0) {
    std::vector<long> off_pos;
    for (long i = 0; i < M; ++i)
      for (long j = i + 1; j < M; ++j) off_pos.push_back(i * M + j);
    r = add(r, scatter_vals({M, M}, off_pos, off_raw));
  }
  return r;
}

FlowResult SylvesterFlow::do_forward(const Tensor& z) const {
  const long d = dim_, M = units_;
  // Q: product of Householder reflections applied to the first M identity
  // columns -> exactly orthonormal columns for any parameter values.
  std::vector<double> e(static_cast<std::size_t>(d * M), 0.0);
  for (long i = 0; i < M; ++i) e[static_cast<std::size_t>(i * M + i)] = 1.0;
  Tensor Q = Tensor::from({d, M}, std::move(e));
  for (const auto& v : house_v) {
    Tensor vTv = dot(v, v);
    if (vTv.value() < 1e-24)
      throw NumericError("Householder vector is numerically zero");
    Tensor vTQ = vecmat(v, Q);
    Tensor upd = outer(v, vTQ);
    Q = sub(Q, mul(broadcast_to(div(Tensor::scalar(2.0), vTv), upd.shape()), upd));
  }
  Tensor R = build_r(r_diag_raw, r_off_raw);
  Tensor Rt = build_r(rt_diag_raw, rt_off_raw);
  Tensor zq = vecmat(z, Q);                 // Qᵀz
  Tensor a = add(matvec(Rt, zq), bias);
  Tensor h = apply_activation(act, a, leaky_slope);
  Tensor out = add(z, matvec(Q, matvec(R, h)));
  Tensor hp = hprime(act, a, h, leaky_slope);
  Tensor diag_prod = mul(gather_cols(Rt, iota_ids(M)), gather_cols(R, iota_ids(M)));
  Tensor logdet = sum(log(add_scalar(mul(hp, diag_prod), 1.0)));
  return {out, logdet};
}

Tensor SylvesterFlow::orthonormal_q() const {
  TapeSuspend guard;
  std::vector<double> e(static_cast<std::size_t>(dim_ * units_), 0.0);
  for (long i = 0; i < units_; ++i) e[static_cast<std::size_t>(i * units_ + i)] = 1.0;
  Tensor Q = Tensor::from({dim_, units_}, std::move(e));
  for (const auto& v : house_v) {
    Tensor vTv = dot(v, v);
    Tensor vTQ = vecmat(v, Q);
    Tensor upd = outer(v, vTQ);
    Q = sub(Q, mul(broadcast_to(div(Tensor::scalar(2.0), vTv), upd.shape()), upd));
  }
  return Q;
}

double SylvesterFlow::orthonormality_error() const {
  TapeSuspend guard;
  Tensor Q = orthonormal_q();
  Tensor gram = matmul(transpose(Q), Q);
  double worst = 0.0;
  for (long i = 0; i < units_; ++i)
    for (long j = 0; j < units_; ++j)
      worst = std::max(worst, std::abs(gram.at(i, j) - (i == j ? 1.0 : 0.0)));
  return worst;
}

void SylvesterFlow::collect(const std::string& prefix, ParamList& out) const {
  for (std::size_t i = 0; i < house_v.size(); ++i)
    out.add(prefix + ".v" + std::to_string(i), house_v[i]);
  out.add(prefix + ".r_diag", r_diag_raw);
  out.add(prefix + ".rt_diag", rt_diag_raw);
  if (r_off_raw.defined()) {
    out.add(prefix + ".r_off", r_off_raw);
    out.add(prefix + ".rt_off", rt_off_raw);
  }
  out.add(prefix + ".b", bias);
}

// ---- realnvp affine coupling ----

AffineCouplingFlow::AffineCouplingFlow(long d, long hidden, bool rev, double init_scale,
                                       Rng& rng)
    : dim_(d), keep_(d / 2), reversed(rev) {
  if (d < 2) throw ContractError("realnvp flow: dim must be >= 2");
  conditioner = Mlp(keep_, {hidden}, 2 * (d - keep_), Activation::tanh_fn, 0.0, rng);
  scale_final_layer(conditioner, init_scale, rng);
}

FlowResult AffineCouplingFlow::do_forward(const Tensor& z0) const {
  Tensor zin = reversed ? reverse(z0) : z0;
  const long nb = dim_ - keep_;
  Tensor za = slice(zin, 0, 0, keep_);
  Tensor zb = slice(zin, 0, keep_, nb);
  Tensor st = conditioner.forward(za, {});
  Tensor s = slice(st, 0, 0, nb);
  Tensor t = slice(st, 0, nb, nb);
  Tensor zb2 = add(mul(zb, exp(s)), t);
  return {concat({za, zb2}, 0), sum(s)};
}

Tensor AffineCouplingFlow::inverse(const Tensor& x) const {
  check_point("realnvp", *this, x);
  TapeSuspend guard;
  const long nb = dim_ - keep_;
  Tensor xa = slice(x, 0, 0, keep_);
  Tensor xb = slice(x, 0, keep_, nb);
  Tensor st = conditioner.forward(xa, {});
  Tensor s = slice(st, 0, 0, nb);
  Tensor t = slice(st, 0, nb, nb);
  Tensor zb = mul(sub(xb, t), exp(neg(s)));
  Tensor z = concat({xa, zb}, 0);
  return reversed ? reverse(z) : z;
}

void AffineCouplingFlow::collect(const std::string& prefix, ParamList& out) const {
  conditioner.collect(prefix + ".cond", out);
}

// ---- MADE conditioner shared by maf/iaf ----

MadeNet::MadeNet(long d, long h, double init_scale, Rng& rng) : dim(d), hidden(h) {
  if (d < 2) throw ContractError("autoregressive flow: dim must be >= 2");
  if (h < 1) throw ContractError("autoregressive flow: hidden width must be >= 1");
  W1 = init_xavier(d, h, rng);
  b1 = init_zeros({h});
  Wmu = init_normal({h, d}, init_scale, rng);
  bmu = init_zeros({d});
  Wa = init_normal({h, d}, init_scale, rng);
  ba = init_zeros({d});
  // degrees: input i+1; hidden cycles 1..d-1; output j+1 with strict masks
  std::vector<double> m1(static_cast<std::size_t>(d * h));
  std::vector<double> m2(static_cast<std::size_t>(h * d));
  for (long i = 0; i < d; ++i)
    for (long t = 0; t < h; ++t)
      m1[static_cast<std::size_t>(i * h + t)] = (t % (d - 1)) + 1 >= i + 1 ? 1.0 : 0.0;
  for (long t = 0; t < h; ++t)
    for (long j = 0; j < d; ++j)
      m2[static_cast<std::size_t>(t * d + j)] = j + 1 > (t % (d - 1)) + 1 ? 1.0 : 0.0;
  mask1 = Tensor::from({d, h}, std::move(m1));
  mask2 = Tensor::from({h, d}, std::move(m2));
}

std::pair<Tensor, Tensor> MadeNet::forward(const Tensor& x) const {
  Tensor hmid = tanh(add(vecmat(x, mul(W1, mask1)), b1));
  Tensor mu = add(vecmat(hmid, mul(Wmu, mask2)), bmu);
  Tensor alpha_raw = add(vecmat(hmid, mul(Wa, mask2)), ba);
  // bounded log-scale keeps exp() tame; the transform and its log-det use
  // the same clamped value, so the density stays exact
  return {mu, clamp(alpha_raw, -10.0, 10.0)};
}

void MadeNet::collect(const std::string& prefix, ParamList& out) const {
  out.add(prefix + ".W1", W1);
  out.add(prefix + ".b1", b1);
  out.add(prefix + ".Wmu", Wmu);
  out.add(prefix + ".bmu", bmu);
  out.add(prefix + ".Wa", Wa);
  out.add(prefix + ".ba", ba);
}

// ---- maf ----

MafFlow::MafFlow(long d, long h, double init_scale, Rng& rng)
    : made(d, h, init_scale, rng) {}

FlowResult MafFlow::do_forward(const Tensor& z) const {
  const long d = made.dim;
  // x_i depends on x_{<i}: build sequentially, one masked pass per coordinate
  // (suffix positions are zero padding; the masks make them irrelevant).
  std::vector<Tensor> xs, alphas;
  for (long i = 0; i < d; ++i) {
    Tensor xfull;
    if (i == 0) {
      xfull = Tensor::zeros({d});
    } else {
      std::vector<Tensor> parts(xs.begin(), xs.end());
      parts.push_back(Tensor::zeros({d - i}));
      xfull = concat(parts, 0);
    }
    auto [mu, alpha] = made.forward(xfull);
    Tensor a_i = slice(alpha, 0, i, 1);
    Tensor x_i = add(mul(slice(z, 0, i, 1), exp(a_i)), slice(mu, 0, i, 1));
    xs.push_back(x_i);
    alphas.push_back(a_i);
  }
  return {concat(xs, 0), sum(concat(alphas, 0))};
}

Tensor MafFlow::inverse(const Tensor& x) const {
  check_point("maf", *this, x);
  TapeSuspend guard;
  auto [mu, alpha] = made.forward(x);
  return mul(sub(x, mu), exp(neg(alpha)));
}

void MafFlow::collect(const std::string& prefix, ParamList& out) const {
  made.collect(prefix + ".made", out);
}

// ---- iaf ----

IafFlow::IafFlow(long d, long h, double init_scale, Rng& rng)
    : made(d, h, init_scale, rng) {}

FlowResult IafFlow::do_forward(const Tensor& z) const {
  auto [mu, alpha] = made.forward(z);
  return {add(mul(z, exp(alpha)), mu), sum(alpha)};
}

Tensor IafFlow::inverse(const Tensor& x) const {
  check_point("iaf", *this, x);
  TapeSuspend guard;
  const long d = made.dim;
  std::vector<double> u = x.data();
  for (long i = 0; i < d; ++i) {
    // coordinates < i are already final; outputs at i only read those
    auto [mu, alpha] = made.forward(Tensor::from({d}, u));
    u[static_cast<std::size_t>(i)] =
        (x.at(i) - mu.at(i)) * std::exp(-alpha.at(i));
  }
  return Tensor::from({d}, std::move(u));
}

void IafFlow::collect(const std::string& prefix, ParamList& out) const {
  made.collect(prefix + ".made", out);
}

// ---- monotone spline couplings (rational-quadratic / rational-linear) ----

namespace {

struct ScalarKnots {
  Tensor widths, heights;  // [K], positive, each summing to 2B
  Tensor derivs;           // [K+1], boundary entries fixed to 1
  Tensor lambdas;          // [K] in (0,1); rational-linear only
};

Tensor positive_partition(const Tensor& raw, long K, double B) {
  Tensor sm = softmax(raw);
  return mul_scalar(
      add_scalar(mul_scalar(sm, 1.0 - static_cast<double>(K) * kMinBinFrac), kMinBinFrac),
      2.0 * B);
}

ScalarKnots build_knots(const Tensor& raw, long K, double B, bool with_lambda) {
  ScalarKnots kn;
  kn.widths = positive_partition(slice(raw, 0, 0, K), K, B);
  kn.heights = positive_partition(slice(raw, 0, K, K), K, B);
  Tensor interior =
      add_scalar(softplus(add_scalar(slice(raw, 0, 2 * K, K - 1), kDerivShift)), kMinDeriv);
  Tensor one = Tensor::from({1}, {1.0});
  kn.derivs = concat({one, interior, one}, 0);
  if (with_lambda)
    kn.lambdas = add_scalar(mul_scalar(sigmoid(slice(raw, 0, 3 * K - 1, K)), 0.95), 0.025);
  return kn;
}

long find_bin(const std::vector<double>& widths, double B, double v) {
  double edge = -B;
  const long K = static_cast<long>(widths.size());
  for (long k = 0; k < K; ++k) {
    edge += widths[static_cast<std::size_t>(k)];
    if (v < edge) return k;
  }
  return K - 1;  // v == B (or a hair over from roundoff)
}

Tensor knot_pos(const Tensor& sizes, long k, double B) {
  if (k == 0) return Tensor::scalar(-B);
  return add_scalar(sum(slice(sizes, 0, 0, k)), -B);
}

// Rational-quadratic piece on bin k; z is a scalar tensor inside the bin.
std::pair<Tensor, Tensor> rq_piece(const Tensor& z, const ScalarKnots& kn, long k, double B) {
  Tensor xk = knot_pos(kn.widths, k, B);
  Tensor yk = knot_pos(kn.heights, k, B);
  Tensor wk = pick(kn.widths, k);
  Tensor hk = pick(kn.heights, k);
  Tensor d0 = pick(kn.derivs, k);
  Tensor d1 = pick(kn.derivs, k + 1);
  Tensor s = div(hk, wk);
  Tensor xi = div(sub(z, xk), wk);
  Tensor xi1 = sub(Tensor::scalar(1.0), xi);
  Tensor q = mul(xi, xi1);
  Tensor denom = add(s, mul(sub(add(d1, d0), mul_scalar(s, 2.0)), q));
  Tensor y = add(yk, div(mul(hk, add(mul(s, square(xi)), mul(d0, q))), denom));
  Tensor num = mul(square(s),
                   add(add(mul(d1, square(xi)), mul_scalar(mul(s, q), 2.0)),
                       mul(d0, square(xi1))));
  return {y, log(div(num, square(denom)))};
}

// Rational-linear piece: two linear-rational segments joined at lambda with
// matched value and derivative; endpoint values/derivatives hit the knots.
std::pair<Tensor, Tensor> rl_piece(const Tensor& z, const ScalarKnots& kn, long k, double B) {
  Tensor one = Tensor::scalar(1.0);
  Tensor xk = knot_pos(kn.widths, k, B);
  Tensor yk = knot_pos(kn.heights, k, B);
  Tensor wk = pick(kn.widths, k);
  Tensor hk = pick(kn.heights, k);
  Tensor d0 = pick(kn.derivs, k);
  Tensor d1 = pick(kn.derivs, k + 1);
  Tensor lam = pick(kn.lambdas, k);
  Tensor s = div(hk, wk);
  Tensor w1 = sqrt(div(d0, d1));  // w0 = 1
  Tensor wm = div(add(mul(lam, d0), mul(mul(sub(one, lam), w1), d1)), s);
  Tensor yk1 = add(yk, hk);
  Tensor wsum = add(sub(one, lam), mul(lam, w1));
  Tensor ym = div(add(mul(sub(one, lam), yk), mul(mul(lam, w1), yk1)), wsum);
  Tensor phi = div(sub(z, xk), wk);
  if (phi.value() <= lam.value()) {
    Tensor D = add(sub(lam, phi), mul(wm, phi));
    Tensor y = div(add(mul(sub(lam, phi), yk), mul(mul(wm, phi), ym)), D);
    Tensor deriv = div(mul(mul(wm, lam), sub(ym, yk)), mul(square(D), wk));
    return {y, log(deriv)};
  }
  Tensor D = add(mul(wm, sub(one, phi)), mul(w1, sub(phi, lam)));
  Tensor y = div(add(mul(mul(wm, sub(one, phi)), ym), mul(mul(w1, sub(phi, lam)), yk1)), D);
  Tensor deriv = div(mul(mul(mul(wm, w1), sub(one, lam)), sub(yk1, ym)), mul(square(D), wk));
  return {y, log(deriv)};
}

// Value-level knot table for the inverse path.
struct KnotVals {
  std::vector<double> xs, ys, d, lam, w, h;
};

KnotVals knot_values(const ScalarKnots& kn, double B) {
  KnotVals kv;
  kv.w = kn.widths.data();
  kv.h = kn.heights.data();
  kv.d = kn.derivs.data();
  if (kn.lambdas.defined()) kv.lam = kn.lambdas.data();
  kv.xs.push_back(-B);
  for (double w : kv.w) kv.xs.push_back(kv.xs.back() + w);
  kv.ys.push_back(-B);
  for (double h : kv.h) kv.ys.push_back(kv.ys.back() + h);
  return kv;
}

long find_bin_y(const KnotVals& kv, double y) {
  const long K = static_cast<long>(kv.h.size());
  for (long k = 0; k < K; ++k)
    if (y < kv.ys[static_cast<std::size_t>(k + 1)]) return k;
  return K - 1;
}

double rq_invert_coord(const KnotVals& kv, double y) {
  const long k = find_bin_y(kv, y);
  const double w = kv.w[static_cast<std::size_t>(k)], h = kv.h[static_cast<std::size_t>(k)];
  const double d0 = kv.d[static_cast<std::size_t>(k)], d1 = kv.d[static_cast<std::size_t>(k + 1)];
  const double s = h / w;
  const double yhat = y - kv.ys[static_cast<std::size_t>(k)];
  const double dd = d1 + d0 - 2.0 * s;
  const double a = h * (s - d0) + yhat * dd;
  const double b = h * d0 - yhat * dd;
  const double c = -s * yhat;
  const double disc = std::max(b * b - 4.0 * a * c, 0.0);
  const double xi = 2.0 * c / (-b - std::sqrt(disc));
  return kv.xs[static_cast<std::size_t>(k)] + xi * w;
}

double rl_invert_coord(const KnotVals& kv, double y) {
  const long k = find_bin_y(kv, y);
  const double w = kv.w[static_cast<std::size_t>(k)], h = kv.h[static_cast<std::size_t>(k)];
  const double d0 = kv.d[static_cast<std::size_t>(k)], d1 = kv.d[static_cast<std::size_t>(k + 1)];
  const double lam = kv.lam[static_cast<std::size_t>(k)];
  const double s = h / w;
  const double w1 = std::sqrt(d0 / d1);
  const double wm = (lam * d0 + (1.0 - lam) * w1 * d1) / s;
  const double y0 = kv.ys[static_cast<std::size_t>(k)], y1 = kv.ys[static_cast<std::size_t>(k + 1)];
  const double wsum = (1.0 - lam) + lam * w1;
  const double ym = ((1.0 - lam) * y0 + lam * w1 * y1) / wsum;
  double phi;
  if (y <= ym)
    phi = lam * (y - y0) / ((y - y0) + wm * (ym - y));
  else
    phi = (wm * (y - ym) + lam * w1 * (y1 - y)) / (wm * (y - ym) + w1 * (y1 - y));
  return kv.xs[static_cast<std::size_t>(k)] + phi * w;
}

}  // namespace

SplineCouplingFlow::SplineCouplingFlow(FlowKind k, long d, long bins, double bound,
                                       long hidden, bool rev, double init_scale, Rng& rng)
    : kind_(k), dim_(d), keep_(d / 2), bins_(bins), bound_(bound), reversed(rev) {
  if (k != FlowKind::rqnsf && k != FlowKind::rlnsf)
    throw ContractError("spline coupling: kind must be rqnsf or rlnsf");
  if (d < 2) throw ContractError("spline coupling: dim must be >= 2");
  if (bins < 2) throw ContractError("spline coupling: need at least 2 bins");
  if (bound <= 0.0) throw ContractError("spline coupling: bound must be positive");
  conditioner = Mlp(keep_, {hidden, hidden}, (d - keep_) * params_per_coord(),
                    Activation::tanh_fn, 0.0, rng);
  scale_final_layer(conditioner, init_scale, rng);
}

long SplineCouplingFlow::params_per_coord() const {
  // widths + heights + interior derivatives (+ lambdas for rational-linear)
  return kind_ == FlowKind::rlnsf ? 4 * bins_ - 1 : 3 * bins_ - 1;
}

FlowResult SplineCouplingFlow::do_forward(const Tensor& z0) const {
  Tensor zin = reversed ? reverse(z0) : z0;
  const long nb = dim_ - keep_;
  const long ppc = params_per_coord();
  Tensor za = slice(zin, 0, 0, keep_);
  Tensor zb = slice(zin, 0, keep_, nb);
  Tensor theta = conditioner.forward(za, {});
  std::vector<Tensor> outs;
  Tensor logdet = Tensor::scalar(0.0);
  const bool rl = kind_ == FlowKind::rlnsf;
  for (long j = 0; j < nb; ++j) {
    Tensor zj = pick(zb, j);
    const double v = zj.value();
    if (v < -bound_ || v > bound_) {
      outs.push_back(reshape(zj, {1}));  // identity tail, log-derivative 0
      continue;
    }
    ScalarKnots kn = build_knots(slice(theta, 0, j * ppc, ppc), bins_, bound_, rl);
    const long k = find_bin(kn.widths.data(), bound_, v);
    auto [y, ld] = rl ? rl_piece(zj, kn, k, bound_) : rq_piece(zj, kn, k, bound_);
    outs.push_back(reshape(y, {1}));
    logdet = add(logdet, ld);
  }
  return {concat({za, concat(outs, 0)}, 0), logdet};
}

Tensor SplineCouplingFlow::inverse(const Tensor& x) const {
  check_point("spline coupling", *this, x);
  TapeSuspend guard;
  const long nb = dim_ - keep_;
  const long ppc = params_per_coord();
  Tensor xa = slice(x, 0, 0, keep_);
  Tensor theta = conditioner.forward(xa, {});
  const bool rl = kind_ == FlowKind::rlnsf;
  std::vector<double> z(xa.data());
  z.reserve(static_cast<std::size_t>(dim_));
  for (long j = 0; j < nb; ++j) {
    const double y = x.at(keep_ + j);
    if (y < -bound_ || y > bound_) {
      z.push_back(y);
      continue;
    }
    ScalarKnots kn = build_knots(slice(theta, 0, j * ppc, ppc), bins_, bound_, rl);
    KnotVals kv = knot_values(kn, bound_);
    z.push_back(rl ? rl_invert_coord(kv, y) : rq_invert_coord(kv, y));
  }
  Tensor zt = Tensor::from({dim_}, std::move(z));
  return reversed ? reverse(zt) : zt;
}

void SplineCouplingFlow::collect(const std::string& prefix, ParamList& out) const {
  conditioner.collect(prefix + ".cond", out);
}

// ---- factory / stack ----

std::unique_ptr<FlowLayer> make_flow_layer(const FlowConfig& cfg, int layer_index, Rng& rng) {
  if (cfg.dim < 1) throw ContractError("flow config: dim must be >= 1");
  const bool rev = layer_index % 2 == 1;
  switch (cfg.kind) {
    case FlowKind::planar:
      return std::make_unique<PlanarFlow>(cfg.dim, cfg.activation, rng, cfg.leaky_slope);
    case FlowKind::radial:
      return std::make_unique<RadialFlow>(cfg.dim, rng);
    case FlowKind::sylvester: {
      const long m = cfg.sylvester_units > 0 ? cfg.sylvester_units : cfg.dim;
      return std::make_unique<SylvesterFlow>(cfg.dim, m, cfg.activation, rng,
                                             cfg.leaky_slope);
    }
    case FlowKind::realnvp: {
      const long h = cfg.coupling_hidden > 0 ? cfg.coupling_hidden : 10 * cfg.dim;
      return std::make_unique<AffineCouplingFlow>(cfg.dim, h, rev, cfg.init_scale, rng);
    }
    case FlowKind::maf: {
      const long h = cfg.made_hidden > 0 ? cfg.made_hidden : 3 * cfg.dim + 1;
      return std::make_unique<MafFlow>(cfg.dim, h, cfg.init_scale, rng);
    }
    case FlowKind::iaf: {
      const long h = cfg.made_hidden > 0 ? cfg.made_hidden : 3 * cfg.dim + 1;
      return std::make_unique<IafFlow>(cfg.dim, h, cfg.init_scale, rng);
    }
    case FlowKind::rlnsf:
    case FlowKind::rqnsf: {
      const long h = cfg.spline_hidden > 0 ? cfg.spline_hidden : cfg.dim;
      return std::make_unique<SplineCouplingFlow>(cfg.kind, cfg.dim, cfg.spline_bins,
                                                  cfg.spline_bound, h, rev, cfg.init_scale,
                                                  rng);
    }
  }
  throw ContractError("flow config: bad kind");
}

FlowStack::FlowStack(const FlowConfig& cfg, long n_layers, Rng& rng) {
  if (n_layers < 0) throw ContractError("flow stack: layer count must be >= 0");
  for (long k = 0; k < n_layers; ++k)
    layers_.push_back(make_flow_layer(cfg, static_cast<int>(k), rng));
}

FlowStack::Result FlowStack::forward(const Tensor& z0) const {
  Result res;
  res.z = z0;
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    try {
      FlowResult r = layers_[k]->forward(res.z);
      res.z = r.z;
      res.log_dets.push_back(r.log_det);
    } catch (const NumericError& e) {
      throw NumericError("flow stack layer " + std::to_string(k) + ": " + e.what());
    } catch (const ShapeError& e) {
      throw ShapeError("flow stack layer " + std::to_string(k) + ": " + e.what());
    }
  }
  return res;
}

Tensor FlowStack::inverse(const Tensor& zK) const {
  TapeSuspend guard;
  Tensor z = zK;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) z = (*it)->inverse(z);
  return z;
}

void FlowStack::collect(const std::string& prefix, ParamList& out) const {
  for (std::size_t i = 0; i < layers_.size(); ++i)
    layers_[i]->collect(prefix + ".f" + std::to_string(i), out);
}

long FlowStack::dim() const {
  return layers_.empty() ? 0 : layers_.front()->dim();
}

bool FlowStack::invertible() const {
  for (const auto& l : layers_)
    if (!flow_kind_invertible(l->kind())) return false;
  return true;
}

FlowResult flow_forward(const FlowLayer& layer, const Tensor& z) { return layer.forward(z); }

Tensor flow_inverse(const FlowLayer& layer, const Tensor& x) { return layer.inverse(x); }

FlowStack::Result stack_forward(const FlowStack& stack, const Tensor& z0) {
  return stack.forward(z0);
}

std::vector<double> flow_apply_values(const FlowLayer& layer, const std::vector<double>& z) {
  TapeSuspend guard;
  return layer.forward(Tensor::from({static_cast<long>(z.size())}, z)).z.data();
}

std::vector<double> stack_apply_values(const FlowStack& stack, const std::vector<double>& z) {
  TapeSuspend guard;
  return stack.forward(Tensor::from({static_cast<long>(z.size())}, z)).z.data();
}

double numeric_logdet_oracle(
    const std::function<std::vector<double>(const std::vector<double>&)>& f,
    const std::vector<double>& z, double h) {
  const long n = static_cast<long>(z.size());
  if (n == 0) throw ContractError("numeric_logdet_oracle: empty point");
  Eigen::MatrixXd J(n, n);
  for (long j = 0; j < n; ++j) {
    std::vector<double> zp = z, zm = z;
    zp[static_cast<std::size_t>(j)] += h;
    zm[static_cast<std::size_t>(j)] -= h;
    const std::vector<double> fp = f(zp), fm = f(zm);
    if (static_cast<long>(fp.size()) != n || static_cast<long>(fm.size()) != n)
      throw ContractError("numeric_logdet_oracle: map must preserve dimension");
    for (long i = 0; i < n; ++i)
      J(i, j) = (fp[static_cast<std::size_t>(i)] - fm[static_cast<std::size_t>(i)]) /
                (2.0 * h);
  }
  Eigen::FullPivLU<Eigen::MatrixXd> lu(J);
  const double det = lu.determinant();
  if (!std::isfinite(det) || std::abs(det) < 1e-300 || !lu.isInvertible())
    throw NumericError("numeric_logdet_oracle: Jacobian is numerically singular");
  return std::log(std::abs(det));
}

double numeric_logdet_oracle(const FlowLayer& layer, const std::vector<double>& z, double h) {
  return numeric_logdet_oracle(
      [&layer](const std::vector<double>& p) { return flow_apply_values(layer, p); }, z, h);
}

double numeric_logdet_oracle(const FlowStack& stack, const std::vector<double>& z, double h) {
  return numeric_logdet_oracle(
      [&stack](const std::vector<double>& p) { return stack_apply_values(stack, p); }, z, h);
}

}  // namespace flowvi

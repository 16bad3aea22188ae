#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "flowvi/nn.hpp"
#include "flowvi/rng.hpp"
#include "flowvi/tensor.hpp"

namespace flowvi {

enum class FlowKind { planar, radial, sylvester, realnvp, maf, iaf, rlnsf, rqnsf };

FlowKind flow_kind_from_string(const std::string& s);
std::string flow_kind_name(FlowKind k);
// True for the families with a tractable exact inverse.
bool flow_kind_invertible(FlowKind k);

struct FlowResult {
  Tensor z;        // transformed point, same shape as the input
  Tensor log_det;  // scalar log|det J| at the input point
};

// One invertible-map layer z -> f(z). forward() is differentiable through
// the tape (including the log-det); inverse() is a value-level computation.
class FlowLayer {
 public:
  virtual ~FlowLayer() = default;
  virtual FlowKind kind() const = 0;
  virtual long dim() const = 0;
  // Validates the input shape, runs the transform, and prefixes any numeric
  // failure with the layer kind so callers can see where it happened.
  FlowResult forward(const Tensor& z) const;
  virtual Tensor inverse(const Tensor& x) const;  // CapabilityError by default
  virtual void collect(const std::string& prefix, ParamList& out) const = 0;

 protected:
  virtual FlowResult do_forward(const Tensor& z) const = 0;
};

struct FlowConfig {
  FlowKind kind = FlowKind::planar;
  long dim = 0;
  Activation activation = Activation::tanh_fn;  // planar/radial/sylvester h(·)
  double leaky_slope = 0.01;
  long sylvester_units = 0;    // M; 0 -> dim
  long coupling_hidden = 0;    // realnvp conditioner width; 0 -> 10*dim
  long made_hidden = 0;        // maf/iaf hidden width; 0 -> 3*dim+1
  long spline_bins = 4;        // rqnsf/rlnsf
  double spline_bound = 3.0;   // transforms act on [-B, B], identity outside
  long spline_hidden = 0;      // spline conditioner width per layer; 0 -> dim
  double init_scale = 0.01;    // final conditioner-layer weight scale
};

// layer_index alternates the coupling-input reversal (odd layers reversed).
std::unique_ptr<FlowLayer> make_flow_layer(const FlowConfig& cfg, int layer_index, Rng& rng);

// z0 -> z1 -> ... -> zK with one log-det per layer. Empty stack is identity.
class FlowStack {
 public:
  FlowStack() = default;
  FlowStack(const FlowConfig& cfg, long n_layers, Rng& rng);

  struct Result {
    Tensor z;
    std::vector<Tensor> log_dets;  // one scalar per layer
  };
  Result forward(const Tensor& z0) const;
  Tensor inverse(const Tensor& zK) const;
  void collect(const std::string& prefix, ParamList& out) const;
  long size() const { return static_cast<long>(layers_.size()); }
  long dim() const;
  bool invertible() const;
  const FlowLayer& layer(long i) const { return *layers_[static_cast<std::size_t>(i)]; }

  std::vector<std::unique_ptr<FlowLayer>> layers_;
};

// ---- concrete families ----

class PlanarFlow : public FlowLayer {
 public:
  PlanarFlow(long dim, Activation act, Rng& rng, double leaky_slope = 0.01);
  FlowKind kind() const override { return FlowKind::planar; }
  long dim() const override { return u.shape()[0]; }
  void collect(const std::string& prefix, ParamList& out) const override;
  // Constrained direction vector and its alignment with w (must be > -1).
  Tensor u_hat() const;
  double w_dot_u_hat() const;

  Tensor u, w, b;  // raw parameters; u is reprojected to u_hat when needed
  Activation act;
  double leaky_slope;

 protected:
  FlowResult do_forward(const Tensor& z) const override;

 private:
  Tensor u_hat_expr() const;  // tape-friendly constrained direction
};

class RadialFlow : public FlowLayer {
 public:
  RadialFlow(long dim, Rng& rng);
  FlowKind kind() const override { return FlowKind::radial; }
  long dim() const override { return z_ref.shape()[0]; }
  void collect(const std::string& prefix, ParamList& out) const override;
  double alpha_value() const;  // softplus(alpha_raw) > 0
  double beta_value() const;   // -alpha + softplus(beta_raw) > -alpha

  Tensor z_ref, alpha_raw, beta_raw;

 protected:
  FlowResult do_forward(const Tensor& z) const override;
};

class SylvesterFlow : public FlowLayer {
 public:
  SylvesterFlow(long dim, long units, Activation act, Rng& rng, double leaky_slope = 0.01);
  FlowKind kind() const override { return FlowKind::sylvester; }
  long dim() const override { return dim_; }
  void collect(const std::string& prefix, ParamList& out) const override;
  Tensor orthonormal_q() const;        // [dim, units], QᵀQ = I by construction
  double orthonormality_error() const; // max |QᵀQ - I|

  long dim_ = 0, units_ = 0;
  std::vector<Tensor> house_v;              // Householder vectors building Q
  Tensor r_diag_raw, rt_diag_raw;           // tanh-constrained diagonals
  Tensor r_off_raw, rt_off_raw;             // strict upper triangles, flattened
  Tensor bias;
  Activation act;
  double leaky_slope;

 private:
  Tensor build_r(const Tensor& diag_raw, const Tensor& off_raw) const;

 protected:
  FlowResult do_forward(const Tensor& z) const override;
};

class AffineCouplingFlow : public FlowLayer {
 public:
  AffineCouplingFlow(long dim, long hidden, bool reversed, double init_scale, Rng& rng);
  FlowKind kind() const override { return FlowKind::realnvp; }
  long dim() const override { return dim_; }
  Tensor inverse(const Tensor& x) const override;
  void collect(const std::string& prefix, ParamList& out) const override;

  long dim_ = 0, keep_ = 0;
  bool reversed = false;
  Mlp conditioner;  // keep -> hidden -> 2*(dim-keep), outputs [s, t]

 protected:
  FlowResult do_forward(const Tensor& z) const override;
};

// Masked autoregressive conditioner: outputs (mu, alpha) where coordinate i
// depends only on inputs 0..i-1 (coordinate 0 gets bias-only outputs).
class MadeNet {
 public:
  MadeNet() = default;
  MadeNet(long dim, long hidden, double init_scale, Rng& rng);
  std::pair<Tensor, Tensor> forward(const Tensor& x) const;  // (mu, alpha), alpha clamped
  void collect(const std::string& prefix, ParamList& out) const;

  long dim = 0, hidden = 0;
  Tensor W1, b1, Wmu, bmu, Wa, ba;
  Tensor mask1, mask2;  // constants
};

class MafFlow : public FlowLayer {
 public:
  MafFlow(long dim, long hidden, double init_scale, Rng& rng);
  FlowKind kind() const override { return FlowKind::maf; }
  long dim() const override { return made.dim; }
  Tensor inverse(const Tensor& x) const override;  // one parallel pass
  void collect(const std::string& prefix, ParamList& out) const override;

  MadeNet made;

 protected:
  FlowResult do_forward(const Tensor& z) const override;
};

class IafFlow : public FlowLayer {
 public:
  IafFlow(long dim, long hidden, double init_scale, Rng& rng);
  FlowKind kind() const override { return FlowKind::iaf; }
  long dim() const override { return made.dim; }
  Tensor inverse(const Tensor& x) const override;  // sequential
  void collect(const std::string& prefix, ParamList& out) const override;

  MadeNet made;

 protected:
  FlowResult do_forward(const Tensor& z) const override;
};

// Coupling layer whose per-coordinate transform is a monotone spline on
// [-B, B] (identity outside): rational-quadratic or rational-linear pieces.
class SplineCouplingFlow : public FlowLayer {
 public:
  SplineCouplingFlow(FlowKind kind, long dim, long bins, double bound, long hidden,
                     bool reversed, double init_scale, Rng& rng);
  FlowKind kind() const override { return kind_; }
  long dim() const override { return dim_; }
  Tensor inverse(const Tensor& x) const override;
  void collect(const std::string& prefix, ParamList& out) const override;
  long params_per_coord() const;

  FlowKind kind_ = FlowKind::rqnsf;
  long dim_ = 0, keep_ = 0, bins_ = 0;
  double bound_ = 3.0;
  bool reversed = false;
  Mlp conditioner;  // keep -> hidden -> hidden -> (dim-keep)*params_per_coord

 protected:
  FlowResult do_forward(const Tensor& z) const override;
};

// ---- free-function views used throughout training and tests ----
FlowResult flow_forward(const FlowLayer& layer, const Tensor& z);
Tensor flow_inverse(const FlowLayer& layer, const Tensor& x);
FlowStack::Result stack_forward(const FlowStack& stack, const Tensor& z0);

// Value-level application of a layer or a stack (no tape), for oracles and
// diagnostics.
std::vector<double> flow_apply_values(const FlowLayer& layer, const std::vector<double>& z);
std::vector<double> stack_apply_values(const FlowStack& stack, const std::vector<double>& z);

// Reference log|det J| by central-difference Jacobian + exact determinant.
// Throws NumericError when the numeric Jacobian is singular to working
// precision. Arbitrates every analytic log-det in the test suite.
double numeric_logdet_oracle(
    const std::function<std::vector<double>(const std::vector<double>&)>& f,
    const std::vector<double>& z, double h = 1e-5);
double numeric_logdet_oracle(const FlowLayer& layer, const std::vector<double>& z,
                             double h = 1e-5);
double numeric_logdet_oracle(const FlowStack& stack, const std::vector<double>& z,
                             double h = 1e-5);

}  // namespace flowvi

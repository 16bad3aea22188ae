#pragma once

#include <utility>
#include <vector>

#include "flowvi/flows.hpp"
#include "flowvi/nn.hpp"
#include "flowvi/rng.hpp"
#include "flowvi/tensor.hpp"

namespace flowvi {

// Amortized posterior q0(z0 | x_bar): a feedforward net mapping the averaged
// input embedding to (mu0, log_sigma0). log_sigma0 is clamped to [-10, 10].
class InferenceNet {
 public:
  static constexpr double kLogSigmaMin = -10.0;
  static constexpr double kLogSigmaMax = 10.0;

  InferenceNet() = default;
  // input_dim -> three tanh hidden layers of hidden_dim (dropout 0.1 when
  // training) -> 2*latent_dim, split into mu0 | log_sigma0.
  InferenceNet(long input_dim, long hidden_dim, long latent_dim, Rng& rng);

  std::pair<Tensor, Tensor> forward(const Tensor& x_bar, const ForwardCtx& ctx) const;
  void collect(const std::string& prefix, ParamList& out) const;
  long latent_dim() const { return latent_dim_; }
  long input_dim() const;

  Mlp net;

 private:
  long latent_dim_ = 0;
};

// One reparameterized posterior draw, before and after flow transport.
struct LatentSample {
  Tensor z0;                    // mu0 + sigma0 * eps
  Tensor zK;                    // flow-transported draw
  std::vector<Tensor> log_dets; // one scalar per flow layer
  Tensor mu0;
  Tensor log_sigma0;
};

// z0 = mu0 + exp(log_sigma0) * eps with eps ~ N(0, I) held constant on the
// tape; zK and log_dets come from the stack. Gradients reach mu0, log_sigma0,
// and the flow parameters.
LatentSample sample_latent(const Tensor& mu0, const Tensor& log_sigma0,
                           const FlowStack& stack, Rng& rng);

// Differentiable log N(x; mu, exp(log_sigma)^2) with diagonal covariance.
Tensor gaussian_log_pdf(const Tensor& x, const Tensor& mu, const Tensor& log_sigma);
// Differentiable log N(x; 0, I).
Tensor std_normal_log_pdf(const Tensor& x);

// Single-draw Monte-Carlo KL term: log q0(z0) - sum_k log_dets[k] - log p(zK)
// with p = N(0, I). Returns a scalar expression on the tape.
Tensor kl_monte_carlo(const LatentSample& sample);

// Exact density of the pushforward of N(mu, diag sigma^2) through the stack,
// evaluated at x via the inverse path (value-level; no tape).
// log p_x(x) = log p_base(f^-1(x)) - sum_k log|det J_k| at f^-1(x).
double log_density(const FlowStack& stack, const Tensor& mu, const Tensor& sigma,
                   const Tensor& x);

}  // namespace flowvi

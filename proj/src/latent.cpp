#include "flowvi/latent.hpp"

#include <cmath>

namespace flowvi {

namespace {
const double kLog2Pi = std::log(2.0 * std::acos(-1.0));
}

InferenceNet::InferenceNet(long input_dim, long hidden_dim, long latent_dim, Rng& rng)
    : latent_dim_(latent_dim) {
  if (input_dim < 1 || hidden_dim < 1 || latent_dim < 1)
    throw ContractError("inference net: input, hidden, and latent dims must be >= 1");
  net = Mlp(input_dim, {hidden_dim, hidden_dim, hidden_dim}, 2 * latent_dim,
            Activation::tanh_fn, 0.1, rng);
}

long InferenceNet::input_dim() const {
  return net.layers.empty() ? 0 : net.layers.front().in_dim();
}

std::pair<Tensor, Tensor> InferenceNet::forward(const Tensor& x_bar,
                                                const ForwardCtx& ctx) const {
  if (x_bar.rank() != 1 || x_bar.shape()[0] != input_dim())
    throw ShapeError("inference net: expected input of dim " +
                     std::to_string(input_dim()) + ", got " + shape_str(x_bar.shape()));
  Tensor out = net.forward(x_bar, ctx);
  Tensor mu0 = slice(out, 0, 0, latent_dim_);
  Tensor log_sigma0 = clamp(slice(out, 0, latent_dim_, latent_dim_),
                            kLogSigmaMin, kLogSigmaMax);
  return {mu0, log_sigma0};
}

void InferenceNet::collect(const std::string& prefix, ParamList& out) const {
  net.collect(prefix, out);
}

LatentSample sample_latent(const Tensor& mu0, const Tensor& log_sigma0,
                           const FlowStack& stack, Rng& rng) {
  if (mu0.rank() != 1 || log_sigma0.rank() != 1 ||
      mu0.shape()[0] != log_sigma0.shape()[0])
    throw ShapeError("sample_latent: mu0 " + shape_str(mu0.shape()) +
                     " and log_sigma0 " + shape_str(log_sigma0.shape()) +
                     " must be vectors of equal length");
  const long l = mu0.shape()[0];
  if (stack.size() > 0 && stack.dim() != l)
    throw ShapeError("sample_latent: flow stack dim " + std::to_string(stack.dim()) +
                     " does not match latent dim " + std::to_string(l));
  Tensor eps = Tensor::from({l}, rng.normal_vec(l));  // constant w.r.t. the tape
  Tensor z0 = add(mu0, mul(exp(log_sigma0), eps));
  auto r = stack.forward(z0);
  return {z0, r.z, std::move(r.log_dets), mu0, log_sigma0};
}

Tensor gaussian_log_pdf(const Tensor& x, const Tensor& mu, const Tensor& log_sigma) {
  if (x.shape() != mu.shape() || x.shape() != log_sigma.shape())
    throw ShapeError("gaussian_log_pdf: x " + shape_str(x.shape()) + ", mu " +
                     shape_str(mu.shape()) + ", log_sigma " +
                     shape_str(log_sigma.shape()) + " must all match");
  const double d = static_cast<double>(x.size());
  Tensor zscore = mul(sub(x, mu), exp(neg(log_sigma)));
  Tensor per = add(log_sigma, mul_scalar(square(zscore), 0.5));
  return add_scalar(neg(sum(per)), -0.5 * kLog2Pi * d);
}

Tensor std_normal_log_pdf(const Tensor& x) {
  const double d = static_cast<double>(x.size());
  return add_scalar(neg(sum(mul_scalar(square(x), 0.5))), -0.5 * kLog2Pi * d);
}

Tensor kl_monte_carlo(const LatentSample& sample) {
  Tensor kl = sub(gaussian_log_pdf(sample.z0, sample.mu0, sample.log_sigma0),
                  std_normal_log_pdf(sample.zK));
  for (const auto& ld : sample.log_dets) kl = sub(kl, ld);
  return kl;
}

double log_density(const FlowStack& stack, const Tensor& mu, const Tensor& sigma,
                   const Tensor& x) {
  if (x.rank() != 1 || mu.shape() != x.shape() || sigma.shape() != x.shape())
    throw ShapeError("log_density: x, mu, sigma must be vectors of equal length");
  for (long i = 0; i < sigma.size(); ++i)
    if (!(sigma.at(i) > 0.0))
      throw ContractError("log_density: sigma must be strictly positive");
  TapeSuspend guard;
  Tensor z = stack.inverse(x);  // CapabilityError when a layer lacks an inverse
  auto r = stack.forward(z);
  double log_det = 0.0;
  for (const auto& ld : r.log_dets) log_det += ld.value();
  double lp = 0.0;
  for (long i = 0; i < x.size(); ++i) {
    const double s = sigma.at(i);
    const double u = (z.at(i) - mu.at(i)) / s;
    lp += -0.5 * kLog2Pi - std::log(s) - 0.5 * u * u;
  }
  return lp - log_det;
}

}  // namespace flowvi

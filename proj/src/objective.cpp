#include "flowvi/objective.hpp"

#include <cmath>
#include <string>

#include "flowvi/errors.hpp"

namespace flowvi {

CeResult cross_entropy(const Tensor& logits, const std::vector<long>& targets,
                       const std::vector<int>& pad_mask) {
  if (logits.rank() != 2)
    throw ShapeError("cross_entropy: logits must be [positions, vocab], got rank " +
                     std::to_string(logits.rank()));
  const long n = logits.shape()[0];
  if (static_cast<long>(targets.size()) != n ||
      static_cast<long>(pad_mask.size()) != n)
    throw ShapeError("cross_entropy: need one target id and one mask entry per "
                     "logit row (" +
                     std::to_string(n) + " rows, " + std::to_string(targets.size()) +
                     " targets, " + std::to_string(pad_mask.size()) + " mask entries)");

  long n_tokens = 0;
  std::vector<double> mask(static_cast<std::size_t>(n), 0.0);
  for (long i = 0; i < n; ++i) {
    if (pad_mask[static_cast<std::size_t>(i)] != 0) {
      mask[static_cast<std::size_t>(i)] = 1.0;
      ++n_tokens;
    }
  }
  if (n_tokens == 0)
    throw ContractError("cross_entropy: every target position is padding "
                        "(empty target)");

  Tensor picked = gather_cols(log_softmax(logits), targets);
  Tensor masked = mul(picked, Tensor::from({n}, mask));
  return {neg(sum(masked)), n_tokens};
}

Tensor vi_loss(const LatentSample& sample) { return kl_monte_carlo(sample); }

namespace {

void check_beta_c(double beta, double c) {
  if (!(beta >= 0.0))
    throw ContractError("beta_c_transform: beta must be >= 0, got " +
                        std::to_string(beta));
  if (!(c >= 0.0))
    throw ContractError("beta_c_transform: C must be >= 0, got " +
                        std::to_string(c));
}

}  // namespace

double beta_c_transform(double vi, double beta, double c) {
  check_beta_c(beta, c);
  return beta * std::abs(vi - c);
}

Tensor beta_c_transform(const Tensor& vi, double beta, double c) {
  check_beta_c(beta, c);
  if (vi.size() != 1)
    throw ShapeError("beta_c_transform: vi must be a scalar");
  return mul_scalar(abs(add_scalar(vi, -c)), beta);
}

double elbo_estimate(double ce, double vi) { return -(ce + vi); }

double perplexity(double ce_sum, long n_tokens) {
  if (n_tokens < 1)
    throw ContractError("perplexity: need at least one token, got " +
                        std::to_string(n_tokens));
  return std::exp(ce_sum / static_cast<double>(n_tokens));
}

LossBreakdown make_loss_breakdown(double ce, double vi, double beta, double c) {
  LossBreakdown b;
  b.ce = ce;
  b.vi = vi;
  b.kl_estimate = vi;
  b.vi_transformed = beta_c_transform(vi, beta, c);
  b.total = ce + b.vi_transformed;
  auto require_finite = [](double v, const char* name) {
    if (!std::isfinite(v))
      throw NumericError(std::string("loss breakdown: ") + name +
                         " is not finite");
  };
  require_finite(b.ce, "ce");
  require_finite(b.vi, "vi");
  require_finite(b.vi_transformed, "vi_transformed");
  require_finite(b.total, "total");
  return b;
}

Tensor total_loss(const Tensor& ce_sum, const Tensor& vi, double beta, double c) {
  return add(ce_sum, beta_c_transform(vi, beta, c));
}

}  // namespace flowvi

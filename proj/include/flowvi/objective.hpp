#pragma once

// Training losses: token-level cross-entropy, the variational (KL) term, the
// beta/C transformation of the KL, the combined loss, and the single-sample
// ELBO estimate.

#include <vector>

#include "flowvi/latent.hpp"
#include "flowvi/tensor.hpp"

namespace flowvi {

// Cross-entropy of one decoded sequence. `sum` is the differentiable scalar
// -sum over non-pad positions of log p(target_t); `n_tokens` counts the
// non-pad positions so callers can form per-token means (perplexity).
struct CeResult {
  Tensor sum;
  long n_tokens = 0;
};

// logits: [T, V] (one row of vocabulary scores per target position);
// targets: [T] token ids; pad_mask: [T], nonzero = real token, zero = padding.
// Throws ContractError when every position is padding.
CeResult cross_entropy(const Tensor& logits, const std::vector<long>& targets,
                       const std::vector<int>& pad_mask);

// The variational term of the loss for one posterior draw. Single source of
// truth: this is kl_monte_carlo re-exported under the loss-facing name.
Tensor vi_loss(const LatentSample& sample);

// beta * |vi - c|. Requires beta >= 0 and c >= 0.
double beta_c_transform(double vi, double beta, double c);
Tensor beta_c_transform(const Tensor& vi, double beta, double c);

// Single-sample evidence lower bound estimate: -(ce + vi).
double elbo_estimate(double ce, double vi);

// exp(mean per-token cross-entropy). Requires n_tokens >= 1.
double perplexity(double ce_sum, long n_tokens);

struct LossBreakdown {
  double ce = 0.0;              // token-sum cross-entropy, nats
  double vi = 0.0;              // variational term, nats
  double vi_transformed = 0.0;  // beta * |vi - c|
  double total = 0.0;           // ce + vi_transformed
  double kl_estimate = 0.0;     // alias of vi, reported for monitoring
};

// Assembles the breakdown and enforces its invariants (total additivity,
// finiteness). Throws NumericError naming the non-finite term.
LossBreakdown make_loss_breakdown(double ce, double vi, double beta, double c);

// Differentiable combined loss: ce_sum + beta * |vi - c|.
Tensor total_loss(const Tensor& ce_sum, const Tensor& vi, double beta, double c);

}  // namespace flowvi

#pragma once

// Optimization loop: bias-corrected Adam, linear warmup/decay learning-rate
// schedule, global-norm gradient clipping, early stopping on validation
// perplexity, the alternating aggressive schedule over the posterior/generator
// parameter partition, and posterior-collapse monitoring.

#include <cstdint>
#include <string>
#include <vector>

#include "flowvi/model.hpp"
#include "flowvi/nn.hpp"
#include "flowvi/rng.hpp"

namespace flowvi {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected Adam over a fixed parameter set. Moment buffers are owned
// here and live as long as the optimizer — they are never reset between
// schedule phases, so a parameter set that pauses (the generator during
// aggressive training) resumes from its accumulated state.
class Adam {
 public:
  explicit Adam(ParamList params, AdamConfig cfg = {});

  // One update using the gradients currently stored on the parameters.
  // A parameter with no accumulated gradient counts as zero gradient (its
  // moments still decay). Any non-finite gradient aborts the step, naming
  // the offending parameter.
  void step(double lr);

  long step_count() const { return t_; }
  const ParamList& params() const { return params_; }

 private:
  ParamList params_;
  AdamConfig cfg_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Linear 0 -> base_lr over [0, warmup_steps], then linear base_lr -> 0 over
// [warmup_steps, total_steps]. Continuous, maximal at the warmup boundary.
double lr_schedule(long step, long warmup_steps, long total_steps, double base_lr);

// Scales every gradient in place so the global L2 norm (over all listed
// parameters together) is at most max_norm; a no-op when already within.
// Returns the pre-clip global norm. Parameters without gradients count as
// zero-gradient.
double clip_gradients(const ParamList& params, double max_norm);

void zero_gradients(const ParamList& params);

struct TrainConfig {
  std::string strategy = "standard";  // "standard" | "beta_c" | "caat"
  double beta = 1.0;                  // beta_c transform coefficients
  double c = 0.1;
  long n_agg = 0;    // aggressive steps (caat only; standard/beta_c require 0)
  long n_alt = 15;   // every n_alt-th aggressive step updates all parameters
  long n_max = 300;  // total optimization steps
  double lr = 5e-5;
  AdamConfig adam;
  double warmup_fraction = 0.1;  // of n_max, rounded down to whole steps
  double clip_norm = 1.0;
  long batch_size = 8;
  long eval_interval = 50;  // steps between validation evaluations
  long patience = 8;        // evals without improvement before stopping
  std::uint64_t seed = 0;
  // Consumed at model-construction time by the harness; carried here so one
  // config names the whole training setup.
  std::string gate_init = "standard";
};

// ContractError on any violated invariant (strategy membership, n_alt >= 1,
// 0 <= n_agg <= n_max, patience >= 1, positive lr/clip/batch/interval,
// warmup_fraction in [0,1], beta/c >= 0, gate_init membership).
void validate_train_config(const TrainConfig& cfg);

struct StepLog {
  long step = 0;
  std::string phase;  // "agg_psi" | "agg_all" | "joint"
  double lr = 0.0;
  double ce = 0.0;              // batch-mean token-sum cross entropy
  double vi = 0.0;              // batch-mean MC KL estimate (kl_estimate)
  double vi_transformed = 0.0;  // batch-mean VI term as optimized
  double total = 0.0;
  double grad_norm_pre_clip = 0.0;
};

std::string step_log_header();
std::string to_csv(const StepLog& log);

// True iff there are more than `patience` entries and the last `patience`
// of them are all >= the best (minimum) value seen before them.
bool early_stop_check(const std::vector<double>& ppl_history, long patience);

struct CollapseReport {
  bool collapsed = false;
  double final_window_mean = 0.0;  // mean KL over the final window
  long window = 0;                 // actual window used (<= requested)
  double threshold = 0.0;
};

// Flags posterior collapse when the mean KL estimate (the `vi` column) over
// the final `window` steps falls strictly below `threshold`.
CollapseReport collapse_monitor(const std::vector<StepLog>& logs, long window = 50,
                                double threshold = 0.02);

struct TrainResult {
  std::vector<StepLog> logs;
  std::vector<double> val_perplexities;
  long steps_run = 0;
  bool stopped_early = false;
};

// Step-at-a-time training engine. Exposed as a class so tests and tools can
// inspect parameters between individual steps; caat_train/standard_train
// below drive it to completion. Single-threaded; all randomness (minibatch
// sampling, dropout, posterior noise) comes from one seeded stream, so a
// fixed seed gives a bit-identical trajectory.
class Trainer {
 public:
  Trainer(SumModel& model, std::vector<Example> train_data,
          std::vector<Example> val_data, TrainConfig cfg);

  // Runs one optimization step (forward, backward, clip, update, log, and a
  // validation evaluation on interval boundaries). Returns true while more
  // steps remain, false once n_max is reached or early stopping fired.
  bool step();

  // Eval-mode perplexity over the validation split: exp(sum CE / sum tokens)
  // with the deterministic (eps = 0) latent and dropout off.
  double validation_perplexity() const;

  const std::vector<StepLog>& logs() const { return logs_; }
  const std::vector<double>& val_perplexities() const { return val_ppl_; }
  bool stopped_early() const { return stopped_; }
  long steps_done() const { return step_; }
  TrainResult result() const;

 private:
  SumModel& model_;
  std::vector<Example> train_, val_;
  TrainConfig cfg_;
  Rng rng_;
  ParamList psi_, theta_, all_;
  Adam psi_adam_, theta_adam_;
  std::vector<StepLog> logs_;
  std::vector<double> val_ppl_;
  long warmup_steps_ = 0;
  long step_ = 0;
  bool stopped_ = false;
};

// Alternating aggressive schedule (strategy "caat"): for steps i <= n_agg,
// every n_alt-th step updates all parameters and the rest update only the
// posterior side; afterwards joint updates with early stopping.
TrainResult caat_train(SumModel& model, const std::vector<Example>& train_data,
                       const std::vector<Example>& val_data, const TrainConfig& cfg);

// Joint updates every step (strategies "standard" and "beta_c"; the latter
// only changes the loss, not the schedule).
TrainResult standard_train(SumModel& model, const std::vector<Example>& train_data,
                           const std::vector<Example>& val_data, const TrainConfig& cfg);

// The aggressive stage is counted in steps; the paper's experiment tables
// speak in epochs. ceil(epochs * n_examples / batch_size).
long epochs_to_steps(double epochs, long n_examples, long batch_size);

}  // namespace flowvi

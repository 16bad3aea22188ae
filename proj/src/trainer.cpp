#include "flowvi/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>
#include <utility>

#include "flowvi/errors.hpp"
#include "flowvi/objective.hpp"
#include "flowvi/tensor.hpp"

namespace flowvi {

// ---- Adam ----

Adam::Adam(ParamList params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  if (!(cfg_.beta1 >= 0.0 && cfg_.beta1 < 1.0) || !(cfg_.beta2 >= 0.0 && cfg_.beta2 < 1.0))
    throw ContractError("adam: beta coefficients must lie in [0, 1)");
  if (!(cfg_.eps > 0.0)) throw ContractError("adam: eps must be positive");
  m_.reserve(params_.count());
  v_.reserve(params_.count());
  for (const NamedParam& p : params_.items()) {
    const std::size_t n = static_cast<std::size_t>(p.tensor.size());
    m_.emplace_back(n, 0.0);
    v_.emplace_back(n, 0.0);
  }
}

void Adam::step(double lr) {
  if (!std::isfinite(lr) || lr < 0.0)
    throw ContractError("adam: learning rate must be finite and non-negative");
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.count(); ++i) {
    const NamedParam& p = params_.items()[i];
    detail::TensorNode* node = p.tensor.node();
    const bool has_grad = p.tensor.has_grad();
    std::vector<double>& m = m_[i];
    std::vector<double>& v = v_[i];
    for (std::size_t j = 0; j < node->data.size(); ++j) {
      const double g = has_grad ? node->grad[j] : 0.0;
      if (!std::isfinite(g))
        throw NumericError("adam: non-finite gradient in parameter '" + p.name + "'");
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      node->data[j] -= lr * m_hat / (std::sqrt(v_hat) + cfg_.eps);
    }
  }
}

// ---- schedule / clipping ----

double lr_schedule(long step, long warmup_steps, long total_steps, double base_lr) {
  if (total_steps < 1) throw ContractError("lr schedule: total_steps must be >= 1");
  if (warmup_steps < 0 || warmup_steps > total_steps)
    throw ContractError("lr schedule: warmup_steps must lie in [0, total_steps]");
  if (step < 0 || step > total_steps)
    throw ContractError("lr schedule: step must lie in [0, total_steps]");
  if (!(base_lr >= 0.0)) throw ContractError("lr schedule: base_lr must be non-negative");
  if (step <= warmup_steps) {
    if (warmup_steps == 0) return base_lr;
    return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  }
  return base_lr * static_cast<double>(total_steps - step) /
         static_cast<double>(total_steps - warmup_steps);
}

double clip_gradients(const ParamList& params, double max_norm) {
  if (!(max_norm > 0.0)) throw ContractError("gradient clipping: max_norm must be positive");
  double sq = 0.0;
  for (const NamedParam& p : params.items()) {
    if (!p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm))
    throw NumericError("gradient clipping: global gradient norm is not finite");
  if (norm <= max_norm) return norm;
  const double scale = max_norm / norm;
  for (const NamedParam& p : params.items()) {
    if (!p.tensor.has_grad()) continue;
    for (double& g : p.tensor.node()->grad) g *= scale;
  }
  return norm;
}

void zero_gradients(const ParamList& params) {
  for (const NamedParam& p : params.items()) p.tensor.zero_grad();
}

// ---- config ----

void validate_train_config(const TrainConfig& cfg) {
  if (cfg.strategy != "standard" && cfg.strategy != "beta_c" && cfg.strategy != "caat")
    throw ContractError("train config: unknown strategy '" + cfg.strategy +
                        "' (expected standard, beta_c, or caat)");
  if (cfg.n_alt < 1) throw ContractError("train config: n_alt must be >= 1");
  if (cfg.n_agg < 0) throw ContractError("train config: n_agg must be >= 0");
  if (cfg.n_max < 1) throw ContractError("train config: n_max must be >= 1");
  if (cfg.n_agg > cfg.n_max) throw ContractError("train config: n_agg must be <= n_max");
  if (cfg.strategy != "caat" && cfg.n_agg != 0)
    throw ContractError("train config: aggressive steps require strategy caat");
  if (!(cfg.lr > 0.0) || !std::isfinite(cfg.lr))
    throw ContractError("train config: lr must be positive and finite");
  if (!(cfg.warmup_fraction >= 0.0 && cfg.warmup_fraction <= 1.0))
    throw ContractError("train config: warmup_fraction must lie in [0, 1]");
  if (!(cfg.clip_norm > 0.0)) throw ContractError("train config: clip_norm must be positive");
  if (cfg.batch_size < 1) throw ContractError("train config: batch_size must be >= 1");
  if (cfg.eval_interval < 1) throw ContractError("train config: eval_interval must be >= 1");
  if (cfg.patience < 1) throw ContractError("train config: patience must be >= 1");
  if (!(cfg.beta >= 0.0) || !(cfg.c >= 0.0))
    throw ContractError("train config: beta and c must be non-negative");
  if (cfg.gate_init != "standard" && cfg.gate_init != "near_zero")
    throw ContractError("train config: gate_init must be standard or near_zero");
}

// ---- logging ----

std::string step_log_header() {
  return "step,phase,lr,ce,vi,vi_transformed,total,grad_norm_pre_clip";
}

namespace {

std::string fmt_g17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

std::string to_csv(const StepLog& log) {
  std::ostringstream out;
  out << log.step << ',' << log.phase << ',' << fmt_g17(log.lr) << ',' << fmt_g17(log.ce)
      << ',' << fmt_g17(log.vi) << ',' << fmt_g17(log.vi_transformed) << ','
      << fmt_g17(log.total) << ',' << fmt_g17(log.grad_norm_pre_clip);
  return out.str();
}

// ---- early stopping / collapse ----

bool early_stop_check(const std::vector<double>& ppl_history, long patience) {
  if (patience < 1) throw ContractError("early stopping: patience must be >= 1");
  const long n = static_cast<long>(ppl_history.size());
  if (n <= patience) return false;
  double best_before = ppl_history[0];
  for (long i = 1; i < n - patience; ++i)
    best_before = std::min(best_before, ppl_history[static_cast<std::size_t>(i)]);
  for (long i = n - patience; i < n; ++i)
    if (ppl_history[static_cast<std::size_t>(i)] < best_before) return false;
  return true;
}

CollapseReport collapse_monitor(const std::vector<StepLog>& logs, long window,
                                double threshold) {
  if (window < 1) throw ContractError("collapse monitor: window must be >= 1");
  if (logs.empty()) throw ContractError("collapse monitor: no step logs");
  const long w = std::min<long>(window, static_cast<long>(logs.size()));
  double total = 0.0;
  for (std::size_t i = logs.size() - static_cast<std::size_t>(w); i < logs.size(); ++i)
    total += logs[i].vi;
  const double mean = total / static_cast<double>(w);
  return {mean < threshold, mean, w, threshold};
}

// ---- training engine ----

Trainer::Trainer(SumModel& model, std::vector<Example> train_data,
                 std::vector<Example> val_data, TrainConfig cfg)
    : model_(model),
      train_(std::move(train_data)),
      val_(std::move(val_data)),
      cfg_(std::move(cfg)),
      rng_(cfg_.seed),
      psi_([&] {
        ParamList p;
        model.collect_posterior("model", p);
        return p;
      }()),
      theta_([&] {
        ParamList p;
        model.collect_generator("model", p);
        return p;
      }()),
      all_([&] {
        ParamList p;
        model.collect("model", p);
        return p;
      }()),
      psi_adam_(psi_, cfg_.adam),
      theta_adam_(theta_, cfg_.adam) {
  validate_train_config(cfg_);
  if (train_.empty()) throw ContractError("trainer: training split is empty");
  if (val_.empty()) throw ContractError("trainer: validation split is empty");
  warmup_steps_ =
      static_cast<long>(cfg_.warmup_fraction * static_cast<double>(cfg_.n_max));
}

bool Trainer::step() {
  if (stopped_ || step_ >= cfg_.n_max) return false;
  ++step_;
  const bool aggressive = step_ <= cfg_.n_agg;
  const bool update_all = !aggressive || (step_ % cfg_.n_alt == 0);
  const std::string phase = aggressive ? (update_all ? "agg_all" : "agg_psi") : "joint";

  StepLog log;
  log.step = step_;
  log.phase = phase;
  log.lr = lr_schedule(step_, warmup_steps_, cfg_.n_max, cfg_.lr);

  try {
    ForwardCtx ctx{true, &rng_};
    const double inv_b = 1.0 / static_cast<double>(cfg_.batch_size);
    Tape tape;
    Tensor total_acc, ce_acc, vi_acc, vt_acc;
    for (long b = 0; b < cfg_.batch_size; ++b) {
      const long idx = rng_.uniform_int(0, static_cast<long>(train_.size()) - 1);
      const Example& ex = train_[static_cast<std::size_t>(idx)];
      LatentSample sample = model_.sample_posterior(ex, ctx, rng_);
      Tensor logits = model_.forward(ex, sample, ctx);
      CeResult ce = cross_entropy(logits, ex.target_ids, ex.target_mask);
      Tensor vi = vi_loss(sample);
      // The per-example |vi - C| transform is applied before batch averaging;
      // standard and caat optimize the untransformed VI term.
      Tensor contrib =
          cfg_.strategy == "beta_c" ? beta_c_transform(vi, cfg_.beta, cfg_.c) : vi;
      Tensor ex_total = add(ce.sum, contrib);
      total_acc = b == 0 ? ex_total : add(total_acc, ex_total);
      ce_acc = b == 0 ? ce.sum : add(ce_acc, ce.sum);
      vi_acc = b == 0 ? vi : add(vi_acc, vi);
      vt_acc = b == 0 ? contrib : add(vt_acc, contrib);
    }
    Tensor total = mul_scalar(total_acc, inv_b);
    log.ce = ce_acc.value() * inv_b;
    log.vi = vi_acc.value() * inv_b;
    log.vi_transformed = vt_acc.value() * inv_b;
    log.total = total.value();
    tape.backward(total);

    const ParamList& updated = update_all ? all_ : psi_;
    log.grad_norm_pre_clip = clip_gradients(updated, cfg_.clip_norm);
    if (update_all) {
      theta_adam_.step(log.lr);
      psi_adam_.step(log.lr);
    } else {
      psi_adam_.step(log.lr);
    }
    zero_gradients(all_);
  } catch (const NumericError& e) {
    throw NumericError("training step " + std::to_string(step_) + " (" + phase +
                       "): " + e.what());
  }
  logs_.push_back(std::move(log));

  if (step_ % cfg_.eval_interval == 0) {
    val_ppl_.push_back(validation_perplexity());
    // Alg. 1 applies the stopping criterion only in the joint stage.
    if (step_ > cfg_.n_agg && early_stop_check(val_ppl_, cfg_.patience)) stopped_ = true;
  }
  return !stopped_ && step_ < cfg_.n_max;
}

double Trainer::validation_perplexity() const {
  TapeSuspend guard;
  ForwardCtx eval;
  double ce_total = 0.0;
  long n_total = 0;
  for (const Example& ex : val_) {
    LatentSample sample = model_.deterministic_latent(ex);
    Tensor logits = model_.forward(ex, sample, eval);
    CeResult ce = cross_entropy(logits, ex.target_ids, ex.target_mask);
    ce_total += ce.sum.value();
    n_total += ce.n_tokens;
  }
  return perplexity(ce_total, n_total);
}

TrainResult Trainer::result() const {
  return {logs_, val_ppl_, step_, stopped_};
}

namespace {

TrainResult run_to_completion(SumModel& model, const std::vector<Example>& train_data,
                              const std::vector<Example>& val_data,
                              const TrainConfig& cfg) {
  Trainer trainer(model, train_data, val_data, cfg);
  while (trainer.step()) {
  }
  return trainer.result();
}

}  // namespace

TrainResult caat_train(SumModel& model, const std::vector<Example>& train_data,
                       const std::vector<Example>& val_data, const TrainConfig& cfg) {
  if (cfg.strategy != "caat")
    throw ContractError("caat_train: strategy must be caat, got '" + cfg.strategy + "'");
  return run_to_completion(model, train_data, val_data, cfg);
}

TrainResult standard_train(SumModel& model, const std::vector<Example>& train_data,
                           const std::vector<Example>& val_data, const TrainConfig& cfg) {
  if (cfg.strategy != "standard" && cfg.strategy != "beta_c")
    throw ContractError("standard_train: strategy must be standard or beta_c, got '" +
                        cfg.strategy + "'");
  return run_to_completion(model, train_data, val_data, cfg);
}

long epochs_to_steps(double epochs, long n_examples, long batch_size) {
  if (!(epochs > 0.0)) throw ContractError("epochs_to_steps: epochs must be positive");
  if (n_examples < 1) throw ContractError("epochs_to_steps: n_examples must be >= 1");
  if (batch_size < 1) throw ContractError("epochs_to_steps: batch_size must be >= 1");
  return static_cast<long>(std::ceil(epochs * static_cast<double>(n_examples) /
                                     static_cast<double>(batch_size)));
}

}  // namespace flowvi

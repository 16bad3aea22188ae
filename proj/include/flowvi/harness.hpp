#pragma once
// Experiment harness: run-configuration files, corpus I/O, the synthetic
// copy-task generator, the end-to-end experiment driver, parameter
// persistence, latent dumps, and the command-line entry point.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "flowvi/metrics.hpp"
#include "flowvi/model.hpp"
#include "flowvi/tokenizer.hpp"
#include "flowvi/trainer.hpp"

namespace flowvi {

// ---------------------------------------------------------------------------
// Run configuration
//
// Flat `key = value` text. `#` starts a comment, blank lines are ignored,
// every key is optional (absent keys keep their defaults), unknown or
// duplicated keys are rejected with the file name and 1-based line number.
// After a file is loaded, any environment variable named FLOWVI_<KEY>
// (upper-cased key) overrides that key. serialize_run_config emits every key
// in a fixed order so that parse(serialize(cfg)) reproduces cfg exactly.

struct RunConfig {
  // paths
  std::string data_dir;  // holds train.jsonl / val.jsonl / test.jsonl
  std::string out_dir;   // run directory created by `train`

  // example construction
  long max_source = 64;  // encoder token budget per document
  long max_target = 24;  // decoder budget per summary, end token included
  long max_vocab = 250;  // tokenizer cap, reserved ids included

  // synthetic data generator (`gen-data`)
  long synthetic_vocab = 200;     // word types, marker included
  long synthetic_max_doc = 64;    // document tokens, markers included
  long synthetic_max_summary = 16;
  long synthetic_train = 1000;
  long synthetic_val = 100;
  long synthetic_test = 100;

  // model dimensions
  long embed_dim = 64;
  long model_dim = 64;
  long n_heads = 4;
  long enc_layers = 2;
  long dec_layers = 2;
  long ffn_dim = 0;        // 0 -> 4 * model_dim
  long latent_dim = 16;
  long infer_hidden = 64;
  long max_positions = 128;
  double dropout = 0.1;
  std::string gate_init = "standard";  // "standard" | "near_zero"

  // posterior flow
  std::string flow_kind = "planar";
  long n_flows = 2;
  std::string flow_activation = "tanh";  // "tanh" | "relu" | "leakyrelu"
  double leaky_slope = 0.01;
  long sylvester_units = 0;   // 0 -> latent_dim
  long coupling_hidden = 0;   // 0 -> 10 * latent_dim
  long made_hidden = 0;       // 0 -> 3 * latent_dim + 1
  long spline_bins = 4;
  double spline_bound = 3.0;
  long spline_hidden = 0;     // 0 -> latent_dim
  double flow_init_scale = 0.01;

  // training
  std::string strategy = "standard";  // "standard" | "beta_c" | "caat"
  double beta = 1.0;
  double c = 0.1;
  long n_agg = 0;
  long n_alt = 15;
  long n_max = 300;
  double lr = 5e-5;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double warmup_fraction = 0.1;
  double clip_norm = 1.0;
  long batch_size = 8;
  long eval_interval = 50;
  long patience = 8;
  std::uint64_t seed = 0;

  // decoding and metrics
  long beam_size = 4;
  double length_penalty = 2.0;
  long max_decode_len = 16;
  long rep_window = 16;
};

// Parse config text; `origin` names the source in error messages.
RunConfig parse_run_config(const std::string& text,
                           const std::string& origin = "<string>");
// Canonical text form: every key, fixed order, values that round-trip.
std::string serialize_run_config(const RunConfig& cfg);
// Read a file, then apply FLOWVI_* environment overrides when requested.
RunConfig load_run_config(const std::string& path, bool apply_env = true);
void apply_env_overrides(RunConfig& cfg);
// The documented key set in canonical (serialization) order.
std::vector<std::string> run_config_keys();
// Semantic checks (enum membership, dimension positivity, budget sanity,
// plus the trainer's own config validation). Throws ValidationError.
void validate_run_config(const RunConfig& cfg);

TrainConfig train_config_from(const RunConfig& cfg);
ModelConfig model_config_from(const RunConfig& cfg, long vocab_size);

// ---------------------------------------------------------------------------
// Corpus

struct CorpusEntry {
  std::string document;
  std::string summary;
};

struct Corpus {
  std::vector<CorpusEntry> entries;
  std::string provenance;  // source files, or "synthetic(seed=N)"
};

// JSONL: one {"document": ..., "summary": ...} object per line. Blank lines
// are skipped. A line that is not a JSON object, lacks either key, holds a
// non-string value, or carries an empty/whitespace document raises
// ValidationError naming the file and 1-based line. Multiple files
// concatenate in argument order.
Corpus load_corpus(const std::string& path);
Corpus load_corpus(const std::vector<std::string>& paths);
void save_corpus(const Corpus& corpus, const std::string& path);

// ---------------------------------------------------------------------------
// Synthetic copy task
//
// Documents are word sequences over a closed vocabulary ("w0", "w1", ...)
// in which a marker token "<m>" flags the word right after it as salient;
// the summary is exactly the salient words in document order. The summary is
// a pure function of the document, every summary word appears in the
// document (copy rate 1.0), and the three splits share no document.

struct SyntheticConfig {
  long vocab = 200;        // word types, marker included (so vocab-1 content words)
  long max_doc = 64;       // document length cap, markers included
  long max_summary = 16;   // salient words per document
  long n_train = 1000;
  long n_val = 100;
  long n_test = 100;
};

struct SyntheticSplits {
  Corpus train, val, test;
};

SyntheticSplits gen_synthetic(const SyntheticConfig& cfg, std::uint64_t seed);

// The marker rule as a standalone function: the summary implied by a
// document's markers. gen_synthetic output always satisfies
// salient_summary(doc) == summary.
std::string salient_summary(const std::string& document);

// ---------------------------------------------------------------------------
// Parameter persistence (little-endian binary; name -> shaped double payload)

void save_params(const ParamList& params, const std::string& path);
// Loads into an existing list; the stored set must match by name and shape
// exactly, in both directions.
void load_params(const ParamList& params, const std::string& path);

// ---------------------------------------------------------------------------
// Evaluation helpers

// Encodes every corpus entry with the tokenizer and applies the configured
// source/target truncation budgets.
std::vector<Example> examples_from(const Corpus& corpus, const Tokenizer& tok,
                                   const RunConfig& cfg);

// Teacher-forced argmax accuracy over real target positions, eval mode with
// the deterministic latent.
double token_accuracy(const SumModel& model, const std::vector<Example>& examples);

// Beam-decode every example; candidates[i] pairs with references[i] (encoded
// from the raw summary text, untruncated).
struct DecodedSet {
  std::vector<std::vector<long>> candidates;
  std::vector<std::vector<long>> references;
  std::vector<std::string> decoded_text;  // one line per example
};
DecodedSet decode_corpus(const SumModel& model, const Tokenizer& tok,
                         const Corpus& corpus, const RunConfig& cfg);

// ---------------------------------------------------------------------------
// Latent dumps

// CSV rows doc_id,sample_id,z0_0..z0_{l-1},zK_0..zK_{l-1}; n_samples posterior
// draws per example from a stream seeded with `seed`. Returns rows written
// (= examples.size() * n_samples). With no flow layers the z0 and zK columns
// coincide bitwise.
long dump_latents(const SumModel& model, const std::vector<Example>& examples,
                  long n_samples, std::uint64_t seed, const std::string& path);

// ---------------------------------------------------------------------------
// Experiment driver
//
// run_experiment creates cfg.out_dir and writes:
//   config.resolved.cfg   canonical config after environment overrides
//   vocab.txt             tokenizer built from the training split
//   steplog.csv           one row per optimizer step
//   train_summary.json    steps, early-stop flag, validation perplexities,
//                         collapse report, test token accuracy
//   params.bin            final parameters
//   eval_report.json      test-split metrics
//   decoded.txt           decoded test summaries, one per line
// On failure the partial artifacts stay put, error.json records
// {stage, error_type, message}, and the exception is rethrown. A rerun with
// the same config and seed reproduces steplog.csv byte for byte.

struct ExperimentArtifacts {
  std::string run_dir;
  TrainResult train;
  CollapseReport collapse;
  EvalReport eval;
  double test_token_accuracy = 0.0;
};

ExperimentArtifacts run_experiment(const RunConfig& cfg);
ExperimentArtifacts run_experiment_file(const std::string& config_path,
                                        bool apply_env = true);

// `gen-data`: writes train.jsonl / val.jsonl / test.jsonl into cfg.data_dir
// from the synthetic_* keys and seed. Returns the three entry counts.
struct GenDataResult {
  std::string data_dir;
  long n_train = 0, n_val = 0, n_test = 0;
};
GenDataResult run_gen_data(const RunConfig& cfg);

// Rebuild the model a finished run directory describes (resolved config +
// vocab.txt + params.bin).
struct LoadedRun {
  RunConfig cfg;
  Tokenizer tokenizer;
  std::unique_ptr<SumModel> model;
};
LoadedRun load_run(const std::string& run_dir);

// Self-contained finite-difference gradient audit on a small model; `ok`
// means every parameter's relative error stayed within `tolerance`.
struct GradCheckSummary {
  bool ok = false;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  long n_params = 0;
  std::string worst_param;
};
GradCheckSummary run_builtin_grad_check();

// ---------------------------------------------------------------------------
// Command line
//
//   flowvi train <config>
//   flowvi evaluate <run-dir> <corpus.jsonl>...
//   flowvi gen-data <config>
//   flowvi sample-latents <run-dir> <corpus.jsonl> <n-samples>
//   flowvi grad-check
//
// `args` excludes the program name. Returns the process exit code: 0 on
// success, 1 on validation or usage errors, 2 on numeric failure.
int cli_main(const std::vector<std::string>& args);

}  // namespace flowvi

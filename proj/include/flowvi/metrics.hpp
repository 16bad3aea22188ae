#pragma once

// Summary-quality metrics: clipped n-gram ROUGE F1, summary-level LCS ROUGE-L,
// the windowed repetition rate rep-w, and average summary length. All scoring
// is over raw token ids from the shared tokenizer — no stemming, no stopword
// removal — and every report declares that.

#include <string>
#include <vector>

namespace flowvi {

// Clipped n-gram overlap F1 for n in {1, 2}. Returns 0 when either side has
// no n-grams (input shorter than n). Symmetric in its arguments.
double rouge_n(const std::vector<long>& candidate, const std::vector<long>& reference,
               int n);

// Longest-common-subsequence F1 over the whole summary (summary-level LCS):
// P = LCS/|candidate|, R = LCS/|reference|. Returns 0 when either side is
// empty.
double rouge_l(const std::vector<long>& candidate, const std::vector<long>& reference);

// Windowed repetition rate of one sequence:
//   (1/|s|) * sum_{t=2}^{|s|} 1[s_t appears in s_{max(t-w,1)..t-1}].
// Requires a nonempty sequence and w >= 1; a single token scores 0.
double rep_w(const std::vector<long>& tokens, long w);

// Mean token count per summary, excluding pad/bos/eos. Requires a nonempty
// set of summaries.
double avg_length(const std::vector<std::vector<long>>& summaries);

struct ExampleScores {
  long index = 0;
  double rouge1 = 0.0;
  double rouge2 = 0.0;
  double rougeL = 0.0;
  double rep_w = 0.0;
  long length = 0;                // tokens after stripping pad/bos/eos
  bool empty_candidate = false;   // candidate had no real tokens; scores are 0
};

struct EvalReport {
  static constexpr int kSchemaVersion = 1;
  // Corpus scores are unweighted means of the per-example scores.
  double rouge1 = 0.0;
  double rouge2 = 0.0;
  double rougeL = 0.0;
  double rep_w = 0.0;
  double avg_length = 0.0;
  long rep_window = 16;
  long n_examples = 0;
  std::vector<ExampleScores> examples;
};

// Scores candidate summaries against single references, position by position.
// pad/bos/eos ids are stripped from both sides before scoring.
EvalReport evaluate_summaries(const std::vector<std::vector<long>>& candidates,
                              const std::vector<std::vector<long>>& references,
                              long rep_window = 16);

// JSON with a schema_version field and the raw-token scoring declaration.
std::string to_json(const EvalReport& report);

}  // namespace flowvi

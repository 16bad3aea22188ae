#include "flowvi/metrics.hpp"

#include <algorithm>
#include <map>
#include <nlohmann/json.hpp>

#include "flowvi/errors.hpp"
#include "flowvi/tokenizer.hpp"

namespace flowvi {

namespace {

std::vector<long> strip_specials(const std::vector<long>& ids) {
  std::vector<long> out;
  out.reserve(ids.size());
  for (long id : ids)
    if (id != Tokenizer::kPad && id != Tokenizer::kBos && id != Tokenizer::kEos)
      out.push_back(id);
  return out;
}

std::map<std::vector<long>, long> ngram_counts(const std::vector<long>& tokens, int n) {
  std::map<std::vector<long>, long> counts;
  if (static_cast<long>(tokens.size()) < n) return counts;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= tokens.size(); ++i) {
    std::vector<long> gram(tokens.begin() + static_cast<long>(i),
                           tokens.begin() + static_cast<long>(i) + n);
    ++counts[gram];
  }
  return counts;
}

double f1(double precision, double recall) {
  if (precision + recall == 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

long lcs_length(const std::vector<long>& a, const std::vector<long>& b) {
  const std::size_t m = a.size(), n = b.size();
  std::vector<long> prev(n + 1, 0), cur(n + 1, 0);
  for (std::size_t i = 1; i <= m; ++i) {
    for (std::size_t j = 1; j <= n; ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[n];
}

}  // namespace

double rouge_n(const std::vector<long>& candidate, const std::vector<long>& reference,
               int n) {
  if (n != 1 && n != 2) throw ContractError("rouge_n: n must be 1 or 2");
  const auto cand = ngram_counts(candidate, n);
  const auto ref = ngram_counts(reference, n);
  long cand_total = 0, ref_total = 0, clipped = 0;
  for (const auto& [gram, count] : cand) {
    cand_total += count;
    const auto it = ref.find(gram);
    if (it != ref.end()) clipped += std::min(count, it->second);
  }
  for (const auto& [gram, count] : ref) ref_total += count;
  if (cand_total == 0 || ref_total == 0 || clipped == 0) return 0.0;
  const double precision = static_cast<double>(clipped) / static_cast<double>(cand_total);
  const double recall = static_cast<double>(clipped) / static_cast<double>(ref_total);
  return f1(precision, recall);
}

double rouge_l(const std::vector<long>& candidate, const std::vector<long>& reference) {
  if (candidate.empty() || reference.empty()) return 0.0;
  const long lcs = lcs_length(candidate, reference);
  if (lcs == 0) return 0.0;
  const double precision = static_cast<double>(lcs) / static_cast<double>(candidate.size());
  const double recall = static_cast<double>(lcs) / static_cast<double>(reference.size());
  return f1(precision, recall);
}

double rep_w(const std::vector<long>& tokens, long w) {
  if (tokens.empty()) throw ContractError("rep_w: sequence must be nonempty");
  if (w < 1) throw ContractError("rep_w: window must be >= 1");
  const long len = static_cast<long>(tokens.size());
  long hits = 0;
  for (long t = 2; t <= len; ++t) {  // 1-based positions, as in the definition
    const long lo = std::max<long>(t - w, 1);
    for (long i = lo; i <= t - 1; ++i) {
      if (tokens[static_cast<std::size_t>(i - 1)] == tokens[static_cast<std::size_t>(t - 1)]) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(len);
}

double avg_length(const std::vector<std::vector<long>>& summaries) {
  if (summaries.empty()) throw ContractError("avg_length: empty summary set");
  double total = 0.0;
  for (const auto& s : summaries) total += static_cast<double>(strip_specials(s).size());
  return total / static_cast<double>(summaries.size());
}

EvalReport evaluate_summaries(const std::vector<std::vector<long>>& candidates,
                              const std::vector<std::vector<long>>& references,
                              long rep_window) {
  if (candidates.size() != references.size())
    throw ContractError("evaluate_summaries: " + std::to_string(candidates.size()) +
                        " candidates vs " + std::to_string(references.size()) +
                        " references");
  if (candidates.empty()) throw ContractError("evaluate_summaries: empty corpus");
  if (rep_window < 1) throw ContractError("evaluate_summaries: rep window must be >= 1");

  EvalReport report;
  report.rep_window = rep_window;
  report.n_examples = static_cast<long>(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const std::vector<long> cand = strip_specials(candidates[i]);
    const std::vector<long> ref = strip_specials(references[i]);
    ExampleScores ex;
    ex.index = static_cast<long>(i);
    ex.length = static_cast<long>(cand.size());
    if (cand.empty()) {
      ex.empty_candidate = true;  // all scores stay 0
    } else {
      ex.rouge1 = rouge_n(cand, ref, 1);
      ex.rouge2 = rouge_n(cand, ref, 2);
      ex.rougeL = rouge_l(cand, ref);
      ex.rep_w = flowvi::rep_w(cand, rep_window);
    }
    report.rouge1 += ex.rouge1;
    report.rouge2 += ex.rouge2;
    report.rougeL += ex.rougeL;
    report.rep_w += ex.rep_w;
    report.avg_length += static_cast<double>(ex.length);
    report.examples.push_back(std::move(ex));
  }
  const double inv_n = 1.0 / static_cast<double>(report.n_examples);
  report.rouge1 *= inv_n;
  report.rouge2 *= inv_n;
  report.rougeL *= inv_n;
  report.rep_w *= inv_n;
  report.avg_length *= inv_n;
  return report;
}

std::string to_json(const EvalReport& report) {
  nlohmann::json j;
  j["schema_version"] = EvalReport::kSchemaVersion;
  j["scoring"] = "raw token ids; no stemming, no stopword removal";
  j["rouge1"] = report.rouge1;
  j["rouge2"] = report.rouge2;
  j["rougeL"] = report.rougeL;
  j["rep_w"] = report.rep_w;
  j["rep_window"] = report.rep_window;
  j["avg_length"] = report.avg_length;
  j["n_examples"] = report.n_examples;
  nlohmann::json examples = nlohmann::json::array();
  for (const ExampleScores& ex : report.examples) {
    examples.push_back({{"index", ex.index},
                        {"rouge1", ex.rouge1},
                        {"rouge2", ex.rouge2},
                        {"rougeL", ex.rougeL},
                        {"rep_w", ex.rep_w},
                        {"length", ex.length},
                        {"empty_candidate", ex.empty_candidate}});
  }
  j["examples"] = std::move(examples);
  return j.dump(2);
}

}  // namespace flowvi

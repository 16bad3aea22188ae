// Metrics: hand-computed clipped-count ROUGE-1/2 F1 values, LCS-based
// ROUGE-L, the windowed repetition rate against an independently written
// reference, average length with special-token stripping, corpus aggregation
// as unweighted means, and JSON report round-tripping.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <nlohmann/json.hpp>
#include <set>
#include <vector>

#include "flowvi/errors.hpp"
#include "flowvi/metrics.hpp"
#include "flowvi/rng.hpp"
#include "flowvi/tokenizer.hpp"

using namespace flowvi;

namespace {

std::vector<long> random_tokens(Rng& rng, long len, long alphabet) {
  std::vector<long> out;
  for (long i = 0; i < len; ++i) out.push_back(4 + rng.uniform_int(0, alphabet - 1));
  return out;
}

// Literal transcription of the repetition-rate definition, written separately
// from the production code: 1-based positions, window s_{max(t-w,1)..t-1}.
double rep_w_reference(const std::vector<long>& s, long w) {
  const long n = static_cast<long>(s.size());
  double hits = 0.0;
  for (long t = 2; t <= n; ++t) {
    bool found = false;
    for (long i = std::max<long>(t - w, 1); i <= t - 1 && !found; ++i)
      found = s[static_cast<std::size_t>(i - 1)] == s[static_cast<std::size_t>(t - 1)];
    if (found) hits += 1.0;
  }
  return hits / static_cast<double>(n);
}

}  // namespace

TEST_CASE("metrics: clipped n-gram F1 hand values") {
  SUBCASE("identical nonempty sequences score 1") {
    const std::vector<long> s = {10, 11, 12, 13};
    CHECK(rouge_n(s, s, 1) == 1.0);
    CHECK(rouge_n(s, s, 2) == 1.0);
  }

  SUBCASE("disjoint vocabularies score 0") {
    CHECK(rouge_n({10, 11}, {20, 21}, 1) == 0.0);
    CHECK(rouge_n({10, 11, 12}, {20, 21, 22}, 2) == 0.0);
  }

  SUBCASE("'the cat sat' vs 'the cat'") {
    const std::vector<long> cand = {10, 11, 12};
    const std::vector<long> ref = {10, 11};
    // Unigrams: 2 of 3 candidate tokens match, all 2 reference tokens are
    // covered: P = 2/3, R = 1, F1 = 0.8.
    CHECK(rouge_n(cand, ref, 1) == doctest::Approx(0.8).epsilon(1e-15));
    // Bigrams: candidate {the cat, cat sat}, reference {the cat}:
    // P = 1/2, R = 1, F1 = 2/3.
    CHECK(rouge_n(cand, ref, 2) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  }

  SUBCASE("repeated candidate tokens are clipped to the reference count") {
    // cand 'a a a' vs ref 'a': clipped = min(3,1) = 1 -> P = 1/3, R = 1,
    // F1 = 0.5. Without clipping the precision would be 1.
    CHECK(rouge_n({7, 7, 7}, {7}, 1) == doctest::Approx(0.5).epsilon(1e-15));
    // Clipping acts on both sides' counts: 'a a b' vs 'a b b' matches
    // min(2,1) + min(1,2) = 2 -> P = R = 2/3.
    CHECK(rouge_n({7, 7, 8}, {7, 8, 8}, 1) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  }

  SUBCASE("sides with no n-grams score 0") {
    CHECK(rouge_n({}, {5, 6}, 1) == 0.0);
    CHECK(rouge_n({5, 6}, {}, 1) == 0.0);
    CHECK(rouge_n({5}, {5}, 2) == 0.0);  // single token has no bigrams
  }

  SUBCASE("F1 is symmetric under candidate/reference swap") {
    Rng rng(81);
    for (int rep = 0; rep < 50; ++rep) {
      const std::vector<long> a = random_tokens(rng, 1 + rng.uniform_int(0, 9), 6);
      const std::vector<long> b = random_tokens(rng, 1 + rng.uniform_int(0, 9), 6);
      for (int n = 1; n <= 2; ++n) {
        const double ab = rouge_n(a, b, n);
        CHECK(ab == rouge_n(b, a, n));
        CHECK(ab >= 0.0);
        CHECK(ab <= 1.0);
      }
    }
  }

  SUBCASE("order of n-grams matters for n = 2") {
    // Same unigrams, reversed order: unigram F1 is 1 but bigram F1 is 0.
    CHECK(rouge_n({10, 11, 12}, {12, 11, 10}, 1) == 1.0);
    CHECK(rouge_n({10, 11, 12}, {12, 11, 10}, 2) == 0.0);
  }

  SUBCASE("only n in {1,2} is supported") {
    CHECK_THROWS_AS(rouge_n({5, 6, 7}, {5, 6, 7}, 3), ContractError);
    CHECK_THROWS_AS(rouge_n({5, 6, 7}, {5, 6, 7}, 0), ContractError);
  }
}

TEST_CASE("metrics: LCS F1 hand values and properties") {
  SUBCASE("hand-computed cases") {
    const std::vector<long> abcd = {10, 11, 12, 13};
    CHECK(rouge_l(abcd, abcd) == 1.0);
    // 'a b c d' vs 'a c': LCS 2 -> P = 1/2, R = 1, F1 = 2/3.
    CHECK(rouge_l(abcd, {10, 12}) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
    // Reversal 'c b a' vs 'a b c': LCS 1 -> P = R = 1/3, F1 = 1/3.
    CHECK(rouge_l({12, 11, 10}, {10, 11, 12}) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    // Non-contiguous subsequence: {1 9 2 8 3} vs {1 2 3}: LCS 3 ->
    // P = 3/5, R = 1, F1 = 0.75.
    CHECK(rouge_l({11, 19, 12, 18, 13}, {11, 12, 13}) ==
          doctest::Approx(0.75).epsilon(1e-15));
    // The subsequence must respect order.
    CHECK(rouge_l({10, 11}, {11, 10}) == doctest::Approx(0.5).epsilon(1e-15));
  }

  SUBCASE("empty sides score 0") {
    CHECK(rouge_l({}, {5}) == 0.0);
    CHECK(rouge_l({5}, {}) == 0.0);
  }

  SUBCASE("self-score 1, bounded by 1, symmetric") {
    Rng rng(82);
    for (int rep = 0; rep < 50; ++rep) {
      const std::vector<long> a = random_tokens(rng, 1 + rng.uniform_int(0, 11), 5);
      const std::vector<long> b = random_tokens(rng, 1 + rng.uniform_int(0, 11), 5);
      CHECK(rouge_l(a, a) == 1.0);
      const double ab = rouge_l(a, b);
      CHECK(ab >= 0.0);
      CHECK(ab <= 1.0);
      CHECK(ab == rouge_l(b, a));
    }
  }
}

TEST_CASE("metrics: windowed repetition rate") {
  SUBCASE("hand values") {
    CHECK(rep_w({10, 11, 12, 13}, 4) == 0.0);     // all distinct
    CHECK(rep_w({7, 7, 7, 7}, 4) == 0.75);        // 3 hits / 4 tokens
    CHECK(rep_w({7}, 4) == 0.0);                  // single token: empty sum
    // Window boundary: {a b a} sees the first 'a' only with w >= 2.
    CHECK(rep_w({5, 6, 5}, 1) == 0.0);
    CHECK(rep_w({5, 6, 5}, 2) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  }

  SUBCASE("matches an independent transcription of the definition") {
    Rng rng(83);
    for (int rep = 0; rep < 100; ++rep) {
      const std::vector<long> s = random_tokens(rng, 1 + rng.uniform_int(0, 19), 4);
      const long w = 1 + rng.uniform_int(0, 7);
      CHECK(rep_w(s, w) == rep_w_reference(s, w));
    }
  }

  SUBCASE("non-decreasing in the window size") {
    Rng rng(84);
    for (int rep = 0; rep < 30; ++rep) {
      const std::vector<long> s = random_tokens(rng, 12, 3);
      for (long w = 1; w < 8; ++w) CHECK(rep_w(s, w) <= rep_w(s, w + 1));
    }
  }

  SUBCASE("contract violations") {
    CHECK_THROWS_AS(rep_w({}, 4), ContractError);
    CHECK_THROWS_AS(rep_w({5}, 0), ContractError);
  }
}

TEST_CASE("metrics: average length strips pad/bos/eos") {
  const std::vector<long> ten(10, 9);
  CHECK(avg_length({ten}) == 10.0);
  CHECK(avg_length({ten, std::vector<long>(20, 9)}) == 15.0);
  // 'w w eos pad' counts 2 tokens; unk (id 3) is a real token and counts.
  CHECK(avg_length({{6, 6, Tokenizer::kEos, Tokenizer::kPad}}) == 2.0);
  CHECK(avg_length({{Tokenizer::kBos, 5, Tokenizer::kEos}}) == 1.0);
  CHECK(avg_length({{Tokenizer::kUnk, Tokenizer::kUnk}}) == 2.0);
  CHECK_THROWS_AS(avg_length({}), ContractError);
}

TEST_CASE("metrics: corpus report aggregates unweighted means") {
  const std::vector<std::vector<long>> cands = {
      {10, 11, 12},                       // vs {10, 11}: the hand case above
      {7, 7, 7, 7},                       // repeated token, disjoint from ref
      {Tokenizer::kBos, 10, 12, Tokenizer::kEos},  // specials stripped: {10, 12}
  };
  const std::vector<std::vector<long>> refs = {
      {10, 11},
      {9, 8},
      {10, 11, 12, 13},
  };
  EvalReport report = evaluate_summaries(cands, refs, 4);

  REQUIRE(report.n_examples == 3);
  REQUIRE(report.examples.size() == 3);
  CHECK(report.rep_window == 4);

  // Per-example records equal direct metric calls on the stripped tokens.
  CHECK(report.examples[0].rouge1 == rouge_n({10, 11, 12}, {10, 11}, 1));
  CHECK(report.examples[0].rouge2 == rouge_n({10, 11, 12}, {10, 11}, 2));
  CHECK(report.examples[0].rougeL == rouge_l({10, 11, 12}, {10, 11}));
  CHECK(report.examples[0].rep_w == 0.0);
  CHECK(report.examples[0].length == 3);
  CHECK(report.examples[1].rouge1 == 0.0);
  CHECK(report.examples[1].rep_w == 0.75);
  CHECK(report.examples[2].length == 2);
  CHECK(report.examples[2].rouge1 == rouge_n({10, 12}, {10, 11, 12, 13}, 1));
  CHECK(report.examples[2].rougeL == rouge_l({10, 12}, {10, 11, 12, 13}));

  // Corpus values are the plain means of the per-example columns.
  double r1 = 0, r2 = 0, rl = 0, rw = 0, len = 0;
  for (const ExampleScores& ex : report.examples) {
    r1 += ex.rouge1;
    r2 += ex.rouge2;
    rl += ex.rougeL;
    rw += ex.rep_w;
    len += static_cast<double>(ex.length);
  }
  CHECK(report.rouge1 == doctest::Approx(r1 / 3).epsilon(1e-15));
  CHECK(report.rouge2 == doctest::Approx(r2 / 3).epsilon(1e-15));
  CHECK(report.rougeL == doctest::Approx(rl / 3).epsilon(1e-15));
  CHECK(report.rep_w == doctest::Approx(rw / 3).epsilon(1e-15));
  CHECK(report.avg_length == doctest::Approx(len / 3).epsilon(1e-15));

  SUBCASE("empty candidates are flagged, score 0, and stay in the mean") {
    EvalReport r = evaluate_summaries({{10, 11}, {Tokenizer::kEos}}, {{10, 11}, {10}}, 4);
    CHECK(r.examples[1].empty_candidate);
    CHECK(r.examples[1].rouge1 == 0.0);
    CHECK(r.examples[1].length == 0);
    CHECK(r.rouge1 == doctest::Approx(0.5).epsilon(1e-15));  // (1.0 + 0.0) / 2
    CHECK(r.avg_length == doctest::Approx(1.0).epsilon(1e-15));
  }

  SUBCASE("argument validation") {
    CHECK_THROWS_AS(evaluate_summaries({{5}}, {{5}, {6}}, 4), ContractError);
    CHECK_THROWS_AS(evaluate_summaries({}, {}, 4), ContractError);
    CHECK_THROWS_AS(evaluate_summaries({{5}}, {{5}}, 0), ContractError);
  }
}

TEST_CASE("metrics: JSON report round-trips") {
  EvalReport report = evaluate_summaries({{10, 11, 12}, {7, 7}}, {{10, 11}, {7, 8}}, 16);
  const std::string text = to_json(report);
  const nlohmann::json j = nlohmann::json::parse(text);

  CHECK(j["schema_version"] == EvalReport::kSchemaVersion);
  CHECK(j["rouge1"].get<double>() == report.rouge1);
  CHECK(j["rouge2"].get<double>() == report.rouge2);
  CHECK(j["rougeL"].get<double>() == report.rougeL);
  CHECK(j["rep_w"].get<double>() == report.rep_w);
  CHECK(j["avg_length"].get<double>() == report.avg_length);
  CHECK(j["rep_window"].get<long>() == 16);
  CHECK(j["n_examples"].get<long>() == 2);
  CHECK(j["scoring"].get<std::string>().find("no stemming") != std::string::npos);
  REQUIRE(j["examples"].size() == 2);
  CHECK(j["examples"][0]["rouge1"].get<double>() == report.examples[0].rouge1);
  CHECK(j["examples"][1]["length"].get<long>() == 2);
  CHECK(j["examples"][1]["empty_candidate"].get<bool>() == false);
}

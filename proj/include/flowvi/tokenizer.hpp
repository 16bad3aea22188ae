#pragma once

// Whitespace tokenizer over a fixed vocabulary. Text is lowercased and split
// on whitespace runs; out-of-vocabulary words map to the unknown token. The
// first four vocabulary ids are reserved: pad, bos, eos, unk.

#include <string>
#include <unordered_map>
#include <vector>

namespace flowvi {

class Tokenizer {
 public:
  static constexpr long kPad = 0;
  static constexpr long kBos = 1;
  static constexpr long kEos = 2;
  static constexpr long kUnk = 3;
  static constexpr const char* kReserved[4] = {"<pad>", "<bos>", "<eos>", "<unk>"};

  // `tokens` is the complete vocabulary, one entry per id; the first four
  // entries must be the reserved tokens in order. Duplicates are rejected.
  explicit Tokenizer(std::vector<std::string> tokens);

  // Vocabulary file: one token per line, ids assigned in line order.
  static Tokenizer from_file(const std::string& path);
  void save(const std::string& path) const;

  // Builds a vocabulary from raw texts: reserved tokens first, then words by
  // descending frequency (ties broken lexicographically), at most max_size
  // ids in total.
  static Tokenizer build(const std::vector<std::string>& texts, long max_size);

  long vocab_size() const { return static_cast<long>(tokens_.size()); }
  long id_of(const std::string& token) const;  // kUnk when absent
  const std::string& token_of(long id) const;

  // Lowercase + whitespace split; no bos/eos added.
  std::vector<long> encode(const std::string& text) const;
  // Joins tokens with single spaces; reserved ids are dropped when
  // skip_special is set.
  std::string decode(const std::vector<long>& ids, bool skip_special = true) const;

  static std::vector<std::string> split_lower(const std::string& text);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, long> index_;
};

}  // namespace flowvi

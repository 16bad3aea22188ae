#include "flowvi/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>

#include "flowvi/errors.hpp"

namespace flowvi {

Tokenizer::Tokenizer(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  if (tokens_.size() < 4)
    throw ContractError("tokenizer: vocabulary needs at least the four reserved "
                        "tokens, got " +
                        std::to_string(tokens_.size()));
  for (int i = 0; i < 4; ++i)
    if (tokens_[static_cast<std::size_t>(i)] != kReserved[i])
      throw ContractError("tokenizer: vocabulary entry " + std::to_string(i) +
                          " must be the reserved token " + kReserved[i] + ", got '" +
                          tokens_[static_cast<std::size_t>(i)] + "'");
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (tokens_[i].empty())
      throw ContractError("tokenizer: empty token at id " + std::to_string(i));
    auto [it, inserted] = index_.emplace(tokens_[i], static_cast<long>(i));
    if (!inserted)
      throw ContractError("tokenizer: duplicate token '" + tokens_[i] + "' at ids " +
                          std::to_string(it->second) + " and " + std::to_string(i));
  }
}

Tokenizer Tokenizer::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("tokenizer: cannot open vocabulary file " + path);
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    tokens.push_back(line);
  }
  return Tokenizer(std::move(tokens));
}

void Tokenizer::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw ValidationError("tokenizer: cannot write vocabulary file " + path);
  for (const auto& t : tokens_) out << t << '\n';
  if (!out) throw ValidationError("tokenizer: failed writing vocabulary file " + path);
}

std::vector<std::string> Tokenizer::split_lower(const std::string& text) {
  std::vector<std::string> words;
  std::string cur;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) {
        words.push_back(cur);
        cur.clear();
      }
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!cur.empty()) words.push_back(cur);
  return words;
}

Tokenizer Tokenizer::build(const std::vector<std::string>& texts, long max_size) {
  if (max_size < 4)
    throw ContractError("tokenizer: max_size must leave room for the reserved "
                        "tokens, got " +
                        std::to_string(max_size));
  std::map<std::string, long> counts;
  for (const auto& text : texts)
    for (const auto& w : split_lower(text)) ++counts[w];
  std::vector<std::pair<std::string, long>> by_freq(counts.begin(), counts.end());
  std::sort(by_freq.begin(), by_freq.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  std::vector<std::string> tokens = {kReserved[0], kReserved[1], kReserved[2],
                                     kReserved[3]};
  for (const auto& [word, n] : by_freq) {
    if (static_cast<long>(tokens.size()) >= max_size) break;
    tokens.push_back(word);
  }
  return Tokenizer(std::move(tokens));
}

long Tokenizer::id_of(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Tokenizer::token_of(long id) const {
  if (id < 0 || id >= vocab_size())
    throw ContractError("tokenizer: id " + std::to_string(id) +
                        " outside vocabulary of size " + std::to_string(vocab_size()));
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<long> Tokenizer::encode(const std::string& text) const {
  std::vector<long> ids;
  for (const auto& w : split_lower(text)) ids.push_back(id_of(w));
  return ids;
}

std::string Tokenizer::decode(const std::vector<long>& ids, bool skip_special) const {
  std::string out;
  for (long id : ids) {
    if (skip_special && id < 4) continue;
    const std::string& t = token_of(id);
    if (!out.empty()) out.push_back(' ');
    out += t;
  }
  return out;
}

}  // namespace flowvi

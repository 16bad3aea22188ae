#include "flowvi/harness.hpp"

#include <algorithm>
#include <cctype>
#include <cerrno>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <map>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <variant>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "flowvi/errors.hpp"
#include "flowvi/grad_check.hpp"
#include "flowvi/objective.hpp"

namespace flowvi {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// --------------------------------------------------------------------------
// Config key table

using FieldPtr = std::variant<long RunConfig::*, double RunConfig::*,
                              std::string RunConfig::*, std::uint64_t RunConfig::*>;

struct KeySpec {
  const char* section;
  const char* name;
  FieldPtr field;
};

const std::vector<KeySpec>& key_table() {
  static const std::vector<KeySpec> table = {
      {"paths", "data_dir", &RunConfig::data_dir},
      {"paths", "out_dir", &RunConfig::out_dir},
      {"examples", "max_source", &RunConfig::max_source},
      {"examples", "max_target", &RunConfig::max_target},
      {"examples", "max_vocab", &RunConfig::max_vocab},
      {"synthetic data", "synthetic_vocab", &RunConfig::synthetic_vocab},
      {"synthetic data", "synthetic_max_doc", &RunConfig::synthetic_max_doc},
      {"synthetic data", "synthetic_max_summary", &RunConfig::synthetic_max_summary},
      {"synthetic data", "synthetic_train", &RunConfig::synthetic_train},
      {"synthetic data", "synthetic_val", &RunConfig::synthetic_val},
      {"synthetic data", "synthetic_test", &RunConfig::synthetic_test},
      {"model", "embed_dim", &RunConfig::embed_dim},
      {"model", "model_dim", &RunConfig::model_dim},
      {"model", "n_heads", &RunConfig::n_heads},
      {"model", "enc_layers", &RunConfig::enc_layers},
      {"model", "dec_layers", &RunConfig::dec_layers},
      {"model", "ffn_dim", &RunConfig::ffn_dim},
      {"model", "latent_dim", &RunConfig::latent_dim},
      {"model", "infer_hidden", &RunConfig::infer_hidden},
      {"model", "max_positions", &RunConfig::max_positions},
      {"model", "dropout", &RunConfig::dropout},
      {"model", "gate_init", &RunConfig::gate_init},
      {"flow", "flow_kind", &RunConfig::flow_kind},
      {"flow", "n_flows", &RunConfig::n_flows},
      {"flow", "flow_activation", &RunConfig::flow_activation},
      {"flow", "leaky_slope", &RunConfig::leaky_slope},
      {"flow", "sylvester_units", &RunConfig::sylvester_units},
      {"flow", "coupling_hidden", &RunConfig::coupling_hidden},
      {"flow", "made_hidden", &RunConfig::made_hidden},
      {"flow", "spline_bins", &RunConfig::spline_bins},
      {"flow", "spline_bound", &RunConfig::spline_bound},
      {"flow", "spline_hidden", &RunConfig::spline_hidden},
      {"flow", "flow_init_scale", &RunConfig::flow_init_scale},
      {"training", "strategy", &RunConfig::strategy},
      {"training", "beta", &RunConfig::beta},
      {"training", "c", &RunConfig::c},
      {"training", "n_agg", &RunConfig::n_agg},
      {"training", "n_alt", &RunConfig::n_alt},
      {"training", "n_max", &RunConfig::n_max},
      {"training", "lr", &RunConfig::lr},
      {"training", "adam_beta1", &RunConfig::adam_beta1},
      {"training", "adam_beta2", &RunConfig::adam_beta2},
      {"training", "adam_eps", &RunConfig::adam_eps},
      {"training", "warmup_fraction", &RunConfig::warmup_fraction},
      {"training", "clip_norm", &RunConfig::clip_norm},
      {"training", "batch_size", &RunConfig::batch_size},
      {"training", "eval_interval", &RunConfig::eval_interval},
      {"training", "patience", &RunConfig::patience},
      {"training", "seed", &RunConfig::seed},
      {"decoding and metrics", "beam_size", &RunConfig::beam_size},
      {"decoding and metrics", "length_penalty", &RunConfig::length_penalty},
      {"decoding and metrics", "max_decode_len", &RunConfig::max_decode_len},
      {"decoding and metrics", "rep_window", &RunConfig::rep_window},
  };
  return table;
}

std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

long parse_long_value(const std::string& raw, const std::string& where) {
  const std::string v = trim(raw);
  if (v.empty()) throw ValidationError(where + ": expected an integer, got an empty value");
  errno = 0;
  char* end = nullptr;
  const long out = std::strtol(v.c_str(), &end, 10);
  if (errno == ERANGE) throw ValidationError(where + ": integer out of range: '" + v + "'");
  if (end == v.c_str() || *end != '\0')
    throw ValidationError(where + ": expected an integer, got '" + v + "'");
  return out;
}

std::uint64_t parse_u64_value(const std::string& raw, const std::string& where) {
  const std::string v = trim(raw);
  if (v.empty() || v[0] == '-')
    throw ValidationError(where + ": expected a non-negative integer, got '" + v + "'");
  errno = 0;
  char* end = nullptr;
  const std::uint64_t out = std::strtoull(v.c_str(), &end, 10);
  if (errno == ERANGE) throw ValidationError(where + ": integer out of range: '" + v + "'");
  if (end == v.c_str() || *end != '\0')
    throw ValidationError(where + ": expected a non-negative integer, got '" + v + "'");
  return out;
}

double parse_double_value(const std::string& raw, const std::string& where) {
  const std::string v = trim(raw);
  if (v.empty()) throw ValidationError(where + ": expected a number, got an empty value");
  errno = 0;
  char* end = nullptr;
  const double out = std::strtod(v.c_str(), &end);
  if (end == v.c_str() || *end != '\0')
    throw ValidationError(where + ": expected a number, got '" + v + "'");
  if (!std::isfinite(out))
    throw ValidationError(where + ": value must be finite, got '" + v + "'");
  return out;
}

void assign_key(RunConfig& cfg, const KeySpec& spec, const std::string& raw,
                const std::string& where) {
  if (const auto* p = std::get_if<long RunConfig::*>(&spec.field)) {
    cfg.**p = parse_long_value(raw, where);
  } else if (const auto* p2 = std::get_if<double RunConfig::*>(&spec.field)) {
    cfg.**p2 = parse_double_value(raw, where);
  } else if (const auto* p3 = std::get_if<std::uint64_t RunConfig::*>(&spec.field)) {
    cfg.**p3 = parse_u64_value(raw, where);
  } else {
    cfg.*std::get<std::string RunConfig::*>(spec.field) = trim(raw);
  }
}

std::string read_key(const RunConfig& cfg, const KeySpec& spec) {
  if (const auto* p = std::get_if<long RunConfig::*>(&spec.field)) return std::to_string(cfg.**p);
  if (const auto* p2 = std::get_if<double RunConfig::*>(&spec.field)) return fmt_double(cfg.**p2);
  if (const auto* p3 = std::get_if<std::uint64_t RunConfig::*>(&spec.field))
    return std::to_string(cfg.**p3);
  return cfg.*std::get<std::string RunConfig::*>(spec.field);
}

const KeySpec* find_key(const std::string& name) {
  for (const auto& spec : key_table())
    if (name == spec.name) return &spec;
  return nullptr;
}

std::string upper(std::string s) {
  for (char& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

// --------------------------------------------------------------------------
// Small file helpers

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open file '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write file '" + path + "'");
  out << text;
  if (!out) throw ValidationError("failed while writing '" + path + "'");
}

std::string path_join(const std::string& dir, const std::string& name) {
  return (fs::path(dir) / name).string();
}

std::vector<std::string> split_words(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> words;
  std::string w;
  while (in >> w) words.push_back(w);
  return words;
}

std::string error_kind(const std::exception& e) {
  if (dynamic_cast<const NumericError*>(&e)) return "NumericError";
  if (dynamic_cast<const ValidationError*>(&e)) return "ValidationError";
  if (dynamic_cast<const ContractError*>(&e)) return "ContractError";
  if (dynamic_cast<const ShapeError*>(&e)) return "ShapeError";
  if (dynamic_cast<const CapabilityError*>(&e)) return "CapabilityError";
  if (dynamic_cast<const Error*>(&e)) return "Error";
  return "std::exception";
}

}  // namespace

// --------------------------------------------------------------------------
// Run configuration

RunConfig parse_run_config(const std::string& text, const std::string& origin) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  long line_no = 0;
  std::set<std::string> seen;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string stripped = trim(line);
    if (stripped.empty() || stripped[0] == '#') continue;
    const std::string where = origin + ":" + std::to_string(line_no);
    const std::size_t eq = stripped.find('=');
    if (eq == std::string::npos)
      throw ValidationError(where + ": expected 'key = value', got '" + stripped + "'");
    const std::string key = trim(stripped.substr(0, eq));
    const std::string value = stripped.substr(eq + 1);
    if (key.empty()) throw ValidationError(where + ": missing key before '='");
    const KeySpec* spec = find_key(key);
    if (spec == nullptr) throw ValidationError(where + ": unknown key '" + key + "'");
    if (!seen.insert(key).second)
      throw ValidationError(where + ": duplicate key '" + key + "'");
    assign_key(cfg, *spec, value, where + " (key '" + key + "')");
  }
  return cfg;
}

std::string serialize_run_config(const RunConfig& cfg) {
  std::ostringstream out;
  const char* current_section = "";
  bool first = true;
  for (const auto& spec : key_table()) {
    if (std::string(current_section) != spec.section) {
      if (!first) out << "\n";
      out << "# " << spec.section << "\n";
      current_section = spec.section;
    }
    out << spec.name << " = " << read_key(cfg, spec) << "\n";
    first = false;
  }
  return out.str();
}

RunConfig load_run_config(const std::string& path, bool apply_env) {
  RunConfig cfg = parse_run_config(read_text_file(path), path);
  if (apply_env) apply_env_overrides(cfg);
  return cfg;
}

void apply_env_overrides(RunConfig& cfg) {
  for (const auto& spec : key_table()) {
    const std::string var = "FLOWVI_" + upper(spec.name);
    const char* value = std::getenv(var.c_str());
    if (value == nullptr) continue;
    assign_key(cfg, spec, value, "environment variable " + var);
  }
}

std::vector<std::string> run_config_keys() {
  std::vector<std::string> keys;
  keys.reserve(key_table().size());
  for (const auto& spec : key_table()) keys.emplace_back(spec.name);
  return keys;
}

void validate_run_config(const RunConfig& cfg) {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ValidationError("run config: " + msg);
  };
  require(cfg.max_source >= 1, "max_source must be >= 1");
  require(cfg.max_target >= 2, "max_target must be >= 2 (one token plus the end token)");
  require(cfg.max_vocab >= 5, "max_vocab must be >= 5 (four reserved ids plus one word)");
  require(cfg.synthetic_vocab >= 2, "synthetic_vocab must be >= 2 (marker plus one word)");
  require(cfg.synthetic_max_summary >= 1, "synthetic_max_summary must be >= 1");
  require(cfg.synthetic_max_doc >= cfg.synthetic_max_summary + 4,
          "synthetic_max_doc must be >= synthetic_max_summary + 4");
  require(cfg.synthetic_train >= 1 && cfg.synthetic_val >= 1 && cfg.synthetic_test >= 1,
          "synthetic split sizes must be >= 1");
  require(cfg.embed_dim >= 1, "embed_dim must be >= 1");
  require(cfg.model_dim >= 1, "model_dim must be >= 1");
  require(cfg.n_heads >= 1, "n_heads must be >= 1");
  require(cfg.model_dim % cfg.n_heads == 0, "model_dim must be divisible by n_heads");
  require(cfg.enc_layers >= 1 && cfg.dec_layers >= 1, "encoder and decoder need >= 1 layer");
  require(cfg.ffn_dim >= 0, "ffn_dim must be >= 0 (0 means 4 * model_dim)");
  require(cfg.latent_dim >= 1, "latent_dim must be >= 1");
  require(cfg.infer_hidden >= 1, "infer_hidden must be >= 1");
  require(cfg.dropout >= 0.0 && cfg.dropout < 1.0, "dropout must lie in [0, 1)");
  require(cfg.n_flows >= 0, "n_flows must be >= 0");
  require(cfg.flow_activation == "tanh" || cfg.flow_activation == "relu" ||
              cfg.flow_activation == "leakyrelu",
          "flow_activation must be tanh, relu, or leakyrelu");
  flow_kind_from_string(cfg.flow_kind);  // throws with the accepted list
  require(cfg.max_positions >= cfg.max_source, "max_positions must cover max_source");
  require(cfg.max_positions >= cfg.max_target, "max_positions must cover max_target");
  require(cfg.max_positions >= cfg.max_decode_len + 1,
          "max_positions must cover max_decode_len + 1 (start token plus output)");
  require(cfg.adam_beta1 >= 0.0 && cfg.adam_beta1 < 1.0, "adam_beta1 must lie in [0, 1)");
  require(cfg.adam_beta2 >= 0.0 && cfg.adam_beta2 < 1.0, "adam_beta2 must lie in [0, 1)");
  require(cfg.adam_eps > 0.0, "adam_eps must be > 0");
  require(cfg.beam_size >= 1, "beam_size must be >= 1");
  require(cfg.length_penalty >= 0.0, "length_penalty must be >= 0");
  require(cfg.max_decode_len >= 1, "max_decode_len must be >= 1");
  require(cfg.rep_window >= 1, "rep_window must be >= 1");
  try {
    validate_train_config(train_config_from(cfg));
  } catch (const std::exception& e) {
    throw ValidationError(std::string("run config: ") + e.what());
  }
}

TrainConfig train_config_from(const RunConfig& cfg) {
  TrainConfig t;
  t.strategy = cfg.strategy;
  t.beta = cfg.beta;
  t.c = cfg.c;
  t.n_agg = cfg.n_agg;
  t.n_alt = cfg.n_alt;
  t.n_max = cfg.n_max;
  t.lr = cfg.lr;
  t.adam.beta1 = cfg.adam_beta1;
  t.adam.beta2 = cfg.adam_beta2;
  t.adam.eps = cfg.adam_eps;
  t.warmup_fraction = cfg.warmup_fraction;
  t.clip_norm = cfg.clip_norm;
  t.batch_size = cfg.batch_size;
  t.eval_interval = cfg.eval_interval;
  t.patience = cfg.patience;
  t.seed = cfg.seed;
  t.gate_init = cfg.gate_init;
  return t;
}

ModelConfig model_config_from(const RunConfig& cfg, long vocab_size) {
  ModelConfig m;
  m.vocab_size = vocab_size;
  m.embed_dim = cfg.embed_dim;
  m.model_dim = cfg.model_dim;
  m.n_heads = cfg.n_heads;
  m.enc_layers = cfg.enc_layers;
  m.dec_layers = cfg.dec_layers;
  m.ffn_dim = cfg.ffn_dim;
  m.latent_dim = cfg.latent_dim;
  m.infer_hidden = cfg.infer_hidden;
  m.max_positions = cfg.max_positions;
  m.dropout = cfg.dropout;
  m.gate_init = cfg.gate_init;
  m.n_flows = cfg.n_flows;
  m.flow.kind = flow_kind_from_string(cfg.flow_kind);
  m.flow.dim = cfg.latent_dim;
  if (cfg.flow_activation == "tanh") m.flow.activation = Activation::tanh_fn;
  else if (cfg.flow_activation == "relu") m.flow.activation = Activation::relu_fn;
  else m.flow.activation = Activation::leaky_relu_fn;
  m.flow.leaky_slope = cfg.leaky_slope;
  m.flow.sylvester_units = cfg.sylvester_units;
  m.flow.coupling_hidden = cfg.coupling_hidden;
  m.flow.made_hidden = cfg.made_hidden;
  m.flow.spline_bins = cfg.spline_bins;
  m.flow.spline_bound = cfg.spline_bound;
  m.flow.spline_hidden = cfg.spline_hidden;
  m.flow.init_scale = cfg.flow_init_scale;
  return m;
}

// --------------------------------------------------------------------------
// Corpus

Corpus load_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open corpus file '" + path + "'");
  Corpus corpus;
  corpus.provenance = path;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const std::string where = path + ":" + std::to_string(line_no);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error&) {
      throw ValidationError(where + ": malformed JSON line");
    }
    if (!j.is_object()) throw ValidationError(where + ": expected a JSON object");
    for (const char* key : {"document", "summary"}) {
      if (!j.contains(key))
        throw ValidationError(where + ": missing key \"" + key + "\"");
      if (!j[key].is_string())
        throw ValidationError(where + ": key \"" + key + "\" must be a string");
    }
    CorpusEntry entry{j["document"].get<std::string>(), j["summary"].get<std::string>()};
    if (trim(entry.document).empty())
      throw ValidationError(where + ": empty document");
    corpus.entries.push_back(std::move(entry));
  }
  return corpus;
}

Corpus load_corpus(const std::vector<std::string>& paths) {
  if (paths.empty()) throw ContractError("load_corpus: no files given");
  Corpus merged;
  for (std::size_t i = 0; i < paths.size(); ++i) {
    Corpus part = load_corpus(paths[i]);
    merged.entries.insert(merged.entries.end(),
                          std::make_move_iterator(part.entries.begin()),
                          std::make_move_iterator(part.entries.end()));
    merged.provenance += (i == 0 ? "" : ",") + paths[i];
  }
  return merged;
}

void save_corpus(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write corpus file '" + path + "'");
  for (const auto& entry : corpus.entries) {
    json j;
    j["document"] = entry.document;
    j["summary"] = entry.summary;
    out << j.dump() << "\n";
  }
  if (!out) throw ValidationError("failed while writing '" + path + "'");
}

// --------------------------------------------------------------------------
// Synthetic copy task

namespace {
constexpr const char* kMarker = "<m>";
}

std::string salient_summary(const std::string& document) {
  const std::vector<std::string> words = split_words(document);
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (words[i] != kMarker) continue;
    if (i + 1 >= words.size()) break;
    if (!out.empty()) out += ' ';
    out += words[i + 1];
    ++i;  // the flagged word is consumed, not itself a marker
  }
  return out;
}

SyntheticSplits gen_synthetic(const SyntheticConfig& cfg, std::uint64_t seed) {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ValidationError("gen_synthetic: " + msg);
  };
  require(cfg.vocab >= 2, "vocab must be >= 2 (marker plus one word)");
  require(cfg.max_summary >= 1, "max_summary must be >= 1");
  require(cfg.max_doc >= cfg.max_summary + 4, "max_doc must be >= max_summary + 4");
  require(cfg.n_train >= 1 && cfg.n_val >= 1 && cfg.n_test >= 1, "split sizes must be >= 1");

  const long n_words = cfg.vocab - 1;  // content words; one slot goes to the marker
  std::vector<std::string> words(static_cast<std::size_t>(n_words));
  for (long i = 0; i < n_words; ++i) words[static_cast<std::size_t>(i)] = "w" + std::to_string(i);

  Rng rng(seed);
  const long total = cfg.n_train + cfg.n_val + cfg.n_test;
  const long max_content = cfg.max_doc - cfg.max_summary;
  std::vector<CorpusEntry> all;
  all.reserve(static_cast<std::size_t>(total));
  std::set<std::string> seen;
  while (static_cast<long>(all.size()) < total) {
    const long m = rng.uniform_int(std::min<long>(4, max_content), max_content);
    const long k = rng.uniform_int(1, std::min(cfg.max_summary, m));
    std::vector<long> order(static_cast<std::size_t>(m));
    for (long i = 0; i < m; ++i) order[static_cast<std::size_t>(i)] = i;
    rng.shuffle(order);
    std::set<long> salient(order.begin(), order.begin() + k);

    std::string doc, summary;
    for (long i = 0; i < m; ++i) {
      const std::string& w = words[static_cast<std::size_t>(rng.uniform_int(0, n_words - 1))];
      if (salient.count(i)) {
        if (!doc.empty()) doc += ' ';
        doc += kMarker;
        if (!summary.empty()) summary += ' ';
        summary += w;
      }
      if (!doc.empty()) doc += ' ';
      doc += w;
    }
    if (!seen.insert(doc).second) continue;  // splits stay disjoint by construction
    all.push_back(CorpusEntry{std::move(doc), std::move(summary)});
  }

  const std::string provenance = "synthetic(seed=" + std::to_string(seed) + ")";
  SyntheticSplits splits;
  auto slice = [&](long begin, long count) {
    Corpus c;
    c.provenance = provenance;
    c.entries.assign(all.begin() + begin, all.begin() + begin + count);
    return c;
  };
  splits.train = slice(0, cfg.n_train);
  splits.val = slice(cfg.n_train, cfg.n_val);
  splits.test = slice(cfg.n_train + cfg.n_val, cfg.n_test);
  return splits;
}

// --------------------------------------------------------------------------
// Parameter persistence

namespace {

constexpr char kParamMagic[4] = {'F', 'V', 'P', '1'};

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
void read_pod(std::ifstream& in, T& v, const std::string& path) {
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw ValidationError("corrupt parameter file '" + path + "' (truncated)");
}

}  // namespace

void save_params(const ParamList& params, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write parameter file '" + path + "'");
  out.write(kParamMagic, sizeof kParamMagic);
  write_pod(out, static_cast<std::uint64_t>(params.count()));
  for (const auto& item : params.items()) {
    write_pod(out, static_cast<std::uint32_t>(item.name.size()));
    out.write(item.name.data(), static_cast<std::streamsize>(item.name.size()));
    const auto& shape = item.tensor.shape();
    write_pod(out, static_cast<std::uint32_t>(shape.size()));
    for (long d : shape) write_pod(out, static_cast<std::uint64_t>(d));
    const auto& data = item.tensor.data();
    out.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size() * sizeof(double)));
  }
  if (!out) throw ValidationError("failed while writing '" + path + "'");
}

void load_params(const ParamList& params, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open parameter file '" + path + "'");
  char magic[4];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kParamMagic, sizeof magic) != 0)
    throw ValidationError("'" + path + "' is not a parameter file");
  std::uint64_t count = 0;
  read_pod(in, count, path);

  struct Stored {
    std::vector<long> shape;
    std::vector<double> data;
  };
  std::map<std::string, Stored> stored;
  for (std::uint64_t i = 0; i < count; ++i) {
    std::uint32_t name_len = 0;
    read_pod(in, name_len, path);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in) throw ValidationError("corrupt parameter file '" + path + "' (truncated)");
    std::uint32_t rank = 0;
    read_pod(in, rank, path);
    Stored s;
    std::uint64_t n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      std::uint64_t dim = 0;
      read_pod(in, dim, path);
      s.shape.push_back(static_cast<long>(dim));
      n *= dim;
    }
    s.data.resize(n);
    in.read(reinterpret_cast<char*>(s.data.data()),
            static_cast<std::streamsize>(n * sizeof(double)));
    if (!in) throw ValidationError("corrupt parameter file '" + path + "' (truncated)");
    if (!stored.emplace(std::move(name), std::move(s)).second)
      throw ValidationError("'" + path + "' stores a duplicate parameter name");
  }

  for (const auto& item : params.items()) {
    const auto it = stored.find(item.name);
    if (it == stored.end())
      throw ValidationError("'" + path + "' is missing parameter '" + item.name + "'");
    if (it->second.shape != item.tensor.shape())
      throw ValidationError("parameter '" + item.name + "' in '" + path +
                            "' has a mismatched shape");
    item.tensor.set_data(it->second.data);
    stored.erase(it);
  }
  if (!stored.empty())
    throw ValidationError("'" + path + "' holds a parameter the model does not: '" +
                          stored.begin()->first + "'");
}

// --------------------------------------------------------------------------
// Evaluation helpers

double token_accuracy(const SumModel& model, const std::vector<Example>& examples) {
  if (examples.empty()) throw ContractError("token_accuracy: no examples");
  TapeSuspend guard;
  ForwardCtx ctx;  // eval mode
  long correct = 0, total = 0;
  for (const auto& ex : examples) {
    const LatentSample sample = model.deterministic_latent(ex);
    const Tensor logits = model.forward(ex, sample, ctx);
    const long v = model.config().vocab_size;
    const auto& flat = logits.data();
    for (std::size_t t = 0; t < ex.target_ids.size(); ++t) {
      if (ex.target_mask[t] == 0) continue;
      const double* row = flat.data() + static_cast<std::ptrdiff_t>(t) * v;
      long best = 0;
      for (long j = 1; j < v; ++j)
        if (row[j] > row[best]) best = j;
      correct += (best == ex.target_ids[t]) ? 1 : 0;
      ++total;
    }
  }
  if (total == 0) throw ContractError("token_accuracy: every position is padding");
  return static_cast<double>(correct) / static_cast<double>(total);
}

DecodedSet decode_corpus(const SumModel& model, const Tokenizer& tok,
                         const Corpus& corpus, const RunConfig& cfg) {
  if (corpus.entries.empty()) throw ContractError("decode_corpus: empty corpus");
  TapeSuspend guard;
  DecodedSet out;
  out.candidates.reserve(corpus.entries.size());
  out.references.reserve(corpus.entries.size());
  out.decoded_text.reserve(corpus.entries.size());
  for (const auto& entry : corpus.entries) {
    const std::vector<long> doc_ids = tok.encode(entry.document);
    const std::vector<long> sum_ids = tok.encode(entry.summary);
    const Example ex = make_example(doc_ids, sum_ids, tok.vocab_size(),
                                    cfg.max_source, cfg.max_target);
    const DecodeResult r = beam_search(model, ex, cfg.beam_size, cfg.length_penalty,
                                       cfg.max_decode_len);
    out.candidates.push_back(r.ids);
    out.references.push_back(sum_ids);
    out.decoded_text.push_back(tok.decode(r.ids));
  }
  return out;
}

// --------------------------------------------------------------------------
// Latent dumps

long dump_latents(const SumModel& model, const std::vector<Example>& examples,
                  long n_samples, std::uint64_t seed, const std::string& path) {
  if (examples.empty()) throw ContractError("dump_latents: no examples");
  if (n_samples < 1) throw ContractError("dump_latents: n_samples must be >= 1");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write latent file '" + path + "'");

  TapeSuspend guard;
  ForwardCtx ctx;  // eval mode
  Rng rng(seed);
  const long l = model.config().latent_dim;
  out << "doc_id,sample_id";
  for (long j = 0; j < l; ++j) out << ",z0_" << j;
  for (long j = 0; j < l; ++j) out << ",zK_" << j;
  out << "\n";

  long rows = 0;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    for (long s = 0; s < n_samples; ++s) {
      const LatentSample sample = model.sample_posterior(examples[i], ctx, rng);
      out << i << "," << s;
      for (long j = 0; j < l; ++j) out << "," << fmt_double(sample.z0.at(j));
      for (long j = 0; j < l; ++j) out << "," << fmt_double(sample.zK.at(j));
      out << "\n";
      ++rows;
    }
  }
  if (!out) throw ValidationError("failed while writing '" + path + "'");
  return rows;
}

// --------------------------------------------------------------------------
// Experiment driver

std::vector<Example> examples_from(const Corpus& corpus, const Tokenizer& tok,
                                   const RunConfig& cfg) {
  std::vector<Example> out;
  out.reserve(corpus.entries.size());
  for (const auto& entry : corpus.entries)
    out.push_back(make_example(tok.encode(entry.document), tok.encode(entry.summary),
                               tok.vocab_size(), cfg.max_source, cfg.max_target));
  return out;
}

namespace {

void write_steplog(const std::vector<StepLog>& logs, const std::string& path) {
  std::ostringstream out;
  out << step_log_header() << "\n";
  for (const auto& log : logs) out << to_csv(log) << "\n";
  write_text_file(path, out.str());
}

json collapse_to_json(const CollapseReport& collapse) {
  return json{{"collapsed", collapse.collapsed},
              {"final_window_mean", collapse.final_window_mean},
              {"window", collapse.window},
              {"threshold", collapse.threshold}};
}

void write_error_manifest(const std::string& out_dir, const std::string& stage,
                          const std::exception& e) {
  try {
    json j{{"stage", stage}, {"error_type", error_kind(e)}, {"message", e.what()}};
    write_text_file(path_join(out_dir, "error.json"), j.dump(2) + "\n");
  } catch (...) {
    // the original error is the one worth reporting
  }
}

}  // namespace

ExperimentArtifacts run_experiment(const RunConfig& cfg) {
  validate_run_config(cfg);
  if (cfg.data_dir.empty()) throw ValidationError("run config: data_dir must be set");
  if (cfg.out_dir.empty()) throw ValidationError("run config: out_dir must be set");
  std::error_code ec;
  fs::create_directories(cfg.out_dir, ec);
  if (ec) throw ValidationError("cannot create run directory '" + cfg.out_dir + "'");

  std::string stage = "resolve-config";
  try {
    write_text_file(path_join(cfg.out_dir, "config.resolved.cfg"), serialize_run_config(cfg));

    stage = "load-data";
    const Corpus train_c = load_corpus(path_join(cfg.data_dir, "train.jsonl"));
    const Corpus val_c = load_corpus(path_join(cfg.data_dir, "val.jsonl"));
    const Corpus test_c = load_corpus(path_join(cfg.data_dir, "test.jsonl"));
    if (train_c.entries.empty()) throw ValidationError("training corpus is empty");
    if (val_c.entries.empty()) throw ValidationError("validation corpus is empty");
    if (test_c.entries.empty()) throw ValidationError("test corpus is empty");

    stage = "tokenize";
    std::vector<std::string> texts;
    texts.reserve(2 * train_c.entries.size());
    for (const auto& entry : train_c.entries) {
      texts.push_back(entry.document);
      texts.push_back(entry.summary);
    }
    const Tokenizer tok = Tokenizer::build(texts, cfg.max_vocab);
    tok.save(path_join(cfg.out_dir, "vocab.txt"));

    stage = "build-examples";
    const std::vector<Example> train_ex = examples_from(train_c, tok, cfg);
    const std::vector<Example> val_ex = examples_from(val_c, tok, cfg);
    const std::vector<Example> test_ex = examples_from(test_c, tok, cfg);

    stage = "build-model";
    Rng root(cfg.seed);
    Rng model_rng = root.fork();
    SumModel model(model_config_from(cfg, tok.vocab_size()), model_rng);

    stage = "train";
    const auto t0 = std::chrono::steady_clock::now();
    Trainer trainer(model, train_ex, val_ex, train_config_from(cfg));
    try {
      while (trainer.step()) {
      }
    } catch (...) {
      // keep whatever the run produced before it failed
      write_steplog(trainer.logs(), path_join(cfg.out_dir, "steplog.csv"));
      throw;
    }
    const double train_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    ExperimentArtifacts art;
    art.run_dir = cfg.out_dir;
    art.train = trainer.result();
    art.collapse = collapse_monitor(art.train.logs);

    stage = "write-steplog";
    write_steplog(art.train.logs, path_join(cfg.out_dir, "steplog.csv"));

    stage = "save-params";
    ParamList params;
    model.collect("model", params);
    save_params(params, path_join(cfg.out_dir, "params.bin"));

    stage = "evaluate";
    art.test_token_accuracy = token_accuracy(model, test_ex);
    const DecodedSet decoded = decode_corpus(model, tok, test_c, cfg);
    art.eval = evaluate_summaries(decoded.candidates, decoded.references, cfg.rep_window);

    stage = "write-artifacts";
    write_text_file(path_join(cfg.out_dir, "eval_report.json"), to_json(art.eval) + "\n");
    std::ostringstream lines;
    for (const auto& text : decoded.decoded_text) lines << text << "\n";
    write_text_file(path_join(cfg.out_dir, "decoded.txt"), lines.str());

    json summary{{"steps_run", art.train.steps_run},
                 {"stopped_early", art.train.stopped_early},
                 {"val_perplexities", art.train.val_perplexities},
                 {"collapse", collapse_to_json(art.collapse)},
                 {"test_token_accuracy", art.test_token_accuracy},
                 {"train_wall_seconds", train_seconds}};
    write_text_file(path_join(cfg.out_dir, "train_summary.json"), summary.dump(2) + "\n");
    return art;
  } catch (const std::exception& e) {
    write_error_manifest(cfg.out_dir, stage, e);
    throw;
  }
}

ExperimentArtifacts run_experiment_file(const std::string& config_path, bool apply_env) {
  return run_experiment(load_run_config(config_path, apply_env));
}

GenDataResult run_gen_data(const RunConfig& cfg) {
  validate_run_config(cfg);
  if (cfg.data_dir.empty()) throw ValidationError("run config: data_dir must be set");
  std::error_code ec;
  fs::create_directories(cfg.data_dir, ec);
  if (ec) throw ValidationError("cannot create data directory '" + cfg.data_dir + "'");

  SyntheticConfig sc;
  sc.vocab = cfg.synthetic_vocab;
  sc.max_doc = cfg.synthetic_max_doc;
  sc.max_summary = cfg.synthetic_max_summary;
  sc.n_train = cfg.synthetic_train;
  sc.n_val = cfg.synthetic_val;
  sc.n_test = cfg.synthetic_test;
  const SyntheticSplits splits = gen_synthetic(sc, cfg.seed);
  save_corpus(splits.train, path_join(cfg.data_dir, "train.jsonl"));
  save_corpus(splits.val, path_join(cfg.data_dir, "val.jsonl"));
  save_corpus(splits.test, path_join(cfg.data_dir, "test.jsonl"));

  GenDataResult r;
  r.data_dir = cfg.data_dir;
  r.n_train = static_cast<long>(splits.train.entries.size());
  r.n_val = static_cast<long>(splits.val.entries.size());
  r.n_test = static_cast<long>(splits.test.entries.size());
  return r;
}

LoadedRun load_run(const std::string& run_dir) {
  // The stored config is already resolved; environment overrides do not
  // re-apply when a finished run is reopened.
  RunConfig cfg = load_run_config(path_join(run_dir, "config.resolved.cfg"), false);
  validate_run_config(cfg);
  Tokenizer tok = Tokenizer::from_file(path_join(run_dir, "vocab.txt"));
  Rng rng(cfg.seed);
  auto model = std::make_unique<SumModel>(model_config_from(cfg, tok.vocab_size()), rng);
  ParamList params;
  model->collect("model", params);
  load_params(params, path_join(run_dir, "params.bin"));
  return LoadedRun{std::move(cfg), std::move(tok), std::move(model)};
}

// --------------------------------------------------------------------------
// Built-in gradient audit

GradCheckSummary run_builtin_grad_check() {
  ModelConfig mc;
  mc.vocab_size = 10;
  mc.embed_dim = 8;
  mc.model_dim = 8;
  mc.n_heads = 2;
  mc.enc_layers = 1;
  mc.dec_layers = 1;
  mc.ffn_dim = 8;
  mc.latent_dim = 3;
  mc.infer_hidden = 8;
  mc.max_positions = 16;
  mc.dropout = 0.0;
  mc.flow.kind = FlowKind::planar;
  mc.flow.dim = mc.latent_dim;
  mc.flow.init_scale = 0.1;
  mc.n_flows = 1;

  Rng rng(7);
  SumModel model(mc, rng);
  const Example ex = make_example({4, 5, 6, 7, 8}, {4, 6, 8}, mc.vocab_size, 8, 6);

  ParamList params;
  model.collect("model", params);
  const auto loss_fn = [&]() {
    ForwardCtx ctx;  // eval mode; the deterministic latent keeps reruns identical
    const LatentSample sample = model.deterministic_latent(ex);
    const Tensor logits = model.forward(ex, sample, ctx);
    const CeResult ce = cross_entropy(logits, ex.target_ids, ex.target_mask);
    return add(ce.sum, vi_loss(sample));
  };
  const ParamGradCheckReport report = grad_check_params(loss_fn, params, 1e-5);

  GradCheckSummary out;
  out.tolerance = 1e-3;
  out.max_rel_error = report.max_rel_err;
  out.ok = report.ok(out.tolerance);
  out.n_params = static_cast<long>(params.count());
  out.worst_param = report.worst_param;
  return out;
}

// --------------------------------------------------------------------------
// Command line

namespace {

int dispatch_cli(const std::vector<std::string>& args) {
  CLI::App app{"flowvi: variational summarizer with normalizing-flow posteriors"};
  app.require_subcommand(1);

  std::string config_path;
  auto* cmd_train = app.add_subcommand("train", "run an experiment from a config file");
  cmd_train->add_option("config", config_path, "run config file")->required();

  std::string eval_run_dir;
  std::vector<std::string> eval_corpora;
  auto* cmd_eval =
      app.add_subcommand("evaluate", "decode a corpus with a finished run and score it");
  cmd_eval->add_option("run-dir", eval_run_dir, "run directory")->required();
  cmd_eval->add_option("corpus", eval_corpora, "JSONL corpus file(s)")->required();

  std::string gen_config_path;
  auto* cmd_gen =
      app.add_subcommand("gen-data", "write synthetic train/val/test corpora");
  cmd_gen->add_option("config", gen_config_path, "run config file")->required();

  std::string lat_run_dir, lat_corpus;
  long lat_samples = 0;
  auto* cmd_lat = app.add_subcommand("sample-latents",
                                     "dump posterior draws for a corpus as CSV");
  cmd_lat->add_option("run-dir", lat_run_dir, "run directory")->required();
  cmd_lat->add_option("corpus", lat_corpus, "JSONL corpus file")->required();
  cmd_lat->add_option("n-samples", lat_samples, "draws per document")->required();

  auto* cmd_grad =
      app.add_subcommand("grad-check", "finite-difference audit of the gradients");

  std::vector<const char*> argv;
  argv.push_back("flowvi");
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);  // prints help or the usage error
    return code == 0 ? 0 : 1;
  }

  if (app.got_subcommand(cmd_train)) {
    const ExperimentArtifacts art = run_experiment_file(config_path);
    std::cout << "run directory: " << art.run_dir << "\n"
              << "steps run: " << art.train.steps_run
              << (art.train.stopped_early ? " (stopped early)" : "") << "\n";
    if (!art.train.val_perplexities.empty())
      std::cout << "final validation perplexity: " << art.train.val_perplexities.back()
                << "\n";
    std::cout << "final-window KL mean: " << art.collapse.final_window_mean
              << (art.collapse.collapsed ? " (collapsed)" : "") << "\n"
              << "test token accuracy: " << art.test_token_accuracy << "\n"
              << "test rouge1/rouge2/rougeL: " << art.eval.rouge1 << " / "
              << art.eval.rouge2 << " / " << art.eval.rougeL << "\n";
    return 0;
  }

  if (app.got_subcommand(cmd_eval)) {
    const LoadedRun run = load_run(eval_run_dir);
    const Corpus corpus = load_corpus(eval_corpora);
    const DecodedSet decoded = decode_corpus(*run.model, run.tokenizer, corpus, run.cfg);
    const EvalReport report =
        evaluate_summaries(decoded.candidates, decoded.references, run.cfg.rep_window);
    const std::string text = to_json(report);
    const std::string stem = fs::path(eval_corpora.front()).stem().string();
    const std::string out_path = path_join(eval_run_dir, "eval_" + stem + ".json");
    write_text_file(out_path, text + "\n");
    std::cout << text << "\n";
    std::cerr << "wrote " << out_path << "\n";
    return 0;
  }

  if (app.got_subcommand(cmd_gen)) {
    const GenDataResult r = run_gen_data(load_run_config(gen_config_path));
    std::cout << "wrote " << r.n_train << " train / " << r.n_val << " val / " << r.n_test
              << " test examples under " << r.data_dir << "\n";
    return 0;
  }

  if (app.got_subcommand(cmd_lat)) {
    const LoadedRun run = load_run(lat_run_dir);
    const Corpus corpus = load_corpus(lat_corpus);
    const std::vector<Example> examples = examples_from(corpus, run.tokenizer, run.cfg);
    const std::string out_path = path_join(lat_run_dir, "latents.csv");
    const long rows = dump_latents(*run.model, examples, lat_samples, run.cfg.seed, out_path);
    std::cout << "wrote " << rows << " rows to " << out_path << "\n";
    return 0;
  }

  if (app.got_subcommand(cmd_grad)) {
    const GradCheckSummary s = run_builtin_grad_check();
    std::cout << "checked " << s.n_params << " parameters; max relative error "
              << fmt_double(s.max_rel_error) << " (tolerance " << fmt_double(s.tolerance)
              << ", worst: " << s.worst_param << ")\n"
              << (s.ok ? "PASS" : "FAIL") << "\n";
    return s.ok ? 0 : 2;
  }

  return 1;  // unreachable: require_subcommand(1) guarantees a branch above
}

}  // namespace

int cli_main(const std::vector<std::string>& args) {
  try {
    return dispatch_cli(args);
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace flowvi

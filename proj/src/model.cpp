#include "flowvi/model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "flowvi/errors.hpp"
#include "flowvi/tokenizer.hpp"

namespace flowvi {

namespace {

constexpr double kMaskValue = -1e9;  // additive score for masked attention keys

Tensor maybe_dropout(const Tensor& x, double p, const ForwardCtx& ctx) {
  if (!ctx.training || p <= 0.0) return x;
  if (ctx.rng == nullptr)
    throw ContractError("model: training-mode forward needs an rng for dropout");
  return dropout(x, p, *ctx.rng, true);
}

double logit(double p) { return std::log(p / (1.0 - p)); }

}  // namespace

// ---------------------------------------------------------------- attention

MultiHeadAttention::MultiHeadAttention(long dim, long heads_in, Rng& rng)
    : wq(dim, dim, rng), wk(dim, dim, rng), wv(dim, dim, rng), wo(dim, dim, rng),
      heads(heads_in) {
  if (heads_in < 1 || dim % heads_in != 0)
    throw ContractError("attention: head count " + std::to_string(heads_in) +
                        " must divide the model width " + std::to_string(dim));
}

Tensor MultiHeadAttention::forward(const Tensor& q_in, const Tensor& kv_in,
                                   const std::vector<int>* key_mask,
                                   bool causal) const {
  if (q_in.rank() != 2 || kv_in.rank() != 2)
    throw ShapeError("attention: inputs must be [positions, width] matrices");
  const long d = wq.in_dim();
  if (q_in.shape()[1] != d || kv_in.shape()[1] != d)
    throw ShapeError("attention: input width " + std::to_string(q_in.shape()[1]) +
                     "/" + std::to_string(kv_in.shape()[1]) + " does not match " +
                     std::to_string(d));
  const long tq = q_in.shape()[0];
  const long tk = kv_in.shape()[0];
  if (key_mask != nullptr) {
    if (static_cast<long>(key_mask->size()) != tk)
      throw ShapeError("attention: key mask length " +
                       std::to_string(key_mask->size()) + " does not match " +
                       std::to_string(tk) + " key positions");
    if (std::all_of(key_mask->begin(), key_mask->end(), [](int m) { return m == 0; }))
      throw ContractError("attention: every key position is masked out");
  }

  Tensor q = wq.forward(q_in);
  Tensor k = wk.forward(kv_in);
  Tensor v = wv.forward(kv_in);

  // Additive mask shared across heads; zero means visible.
  std::vector<double> bias(static_cast<std::size_t>(tq * tk), 0.0);
  bool any_masked = false;
  for (long i = 0; i < tq; ++i)
    for (long j = 0; j < tk; ++j) {
      const bool hidden = (causal && j > i) ||
                          (key_mask != nullptr &&
                           (*key_mask)[static_cast<std::size_t>(j)] == 0);
      if (hidden) {
        bias[static_cast<std::size_t>(i * tk + j)] = kMaskValue;
        any_masked = true;
      }
    }
  Tensor bias_t;
  if (any_masked) bias_t = Tensor::from({tq, tk}, bias);

  const long dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> head_outs;
  head_outs.reserve(static_cast<std::size_t>(heads));
  for (long h = 0; h < heads; ++h) {
    Tensor qh = slice(q, 1, h * dh, dh);
    Tensor kh = slice(k, 1, h * dh, dh);
    Tensor vh = slice(v, 1, h * dh, dh);
    Tensor scores = mul_scalar(matmul(qh, transpose(kh)), scale);
    if (any_masked) scores = add(scores, bias_t);
    head_outs.push_back(matmul(softmax(scores), vh));
  }
  return wo.forward(concat(head_outs, 1));
}

void MultiHeadAttention::collect(const std::string& prefix, ParamList& out) const {
  wq.collect(prefix + ".wq", out);
  wk.collect(prefix + ".wk", out);
  wv.collect(prefix + ".wv", out);
  wo.collect(prefix + ".wo", out);
}

// ------------------------------------------------------------- feed-forward

FeedForward::FeedForward(long dim, long hidden, Rng& rng)
    : up(dim, hidden, rng), down(hidden, dim, rng) {}

Tensor FeedForward::forward(const Tensor& x) const {
  return down.forward(relu(up.forward(x)));
}

void FeedForward::collect(const std::string& prefix, ParamList& out) const {
  up.collect(prefix + ".up", out);
  down.collect(prefix + ".down", out);
}

// ------------------------------------------------------------------- blocks

EncoderBlock::EncoderBlock(long dim, long heads, long ffn_dim, Rng& rng)
    : ln1(dim), ln2(dim), attn(dim, heads, rng), ffn(dim, ffn_dim, rng) {}

Tensor EncoderBlock::forward(const Tensor& x, const std::vector<int>& src_mask,
                             double dropout_p, const ForwardCtx& ctx) const {
  Tensor n1 = ln1.forward(x);
  Tensor h = add(x, maybe_dropout(attn.forward(n1, n1, &src_mask, false), dropout_p, ctx));
  Tensor n2 = ln2.forward(h);
  return add(h, maybe_dropout(ffn.forward(n2), dropout_p, ctx));
}

void EncoderBlock::collect(const std::string& prefix, ParamList& out) const {
  ln1.collect(prefix + ".ln1", out);
  attn.collect(prefix + ".attn", out);
  ln2.collect(prefix + ".ln2", out);
  ffn.collect(prefix + ".ffn", out);
}

DecoderBlock::DecoderBlock(long dim, long heads, long ffn_dim, Rng& rng)
    : ln1(dim), ln2(dim), ln3(dim), self_attn(dim, heads, rng),
      cross_attn(dim, heads, rng), ffn(dim, ffn_dim, rng) {}

Tensor DecoderBlock::forward(const Tensor& x, const Tensor& enc,
                             const std::vector<int>& src_mask, double dropout_p,
                             const ForwardCtx& ctx) const {
  Tensor n1 = ln1.forward(x);
  Tensor h = add(x, maybe_dropout(self_attn.forward(n1, n1, nullptr, true),
                                  dropout_p, ctx));
  Tensor n2 = ln2.forward(h);
  h = add(h, maybe_dropout(cross_attn.forward(n2, enc, &src_mask, false),
                           dropout_p, ctx));
  Tensor n3 = ln3.forward(h);
  return add(h, maybe_dropout(ffn.forward(n3), dropout_p, ctx));
}

void DecoderBlock::collect(const std::string& prefix, ParamList& out) const {
  ln1.collect(prefix + ".ln1", out);
  self_attn.collect(prefix + ".self", out);
  ln2.collect(prefix + ".ln2", out);
  cross_attn.collect(prefix + ".cross", out);
  ln3.collect(prefix + ".ln3", out);
  ffn.collect(prefix + ".ffn", out);
}

// ---------------------------------------------------------------- SumModel

SumModel::SumModel(const ModelConfig& cfg, Rng& rng)
    : infer(cfg.embed_dim, cfg.infer_hidden, cfg.latent_dim, rng),
      flows([&] {
        FlowConfig fc = cfg.flow;
        fc.dim = cfg.latent_dim;
        return FlowStack(fc, cfg.n_flows, rng);
      }()),
      cfg_(cfg) {
  if (cfg.vocab_size < 4)
    throw ContractError("model: vocab_size must cover the four reserved ids, got " +
                        std::to_string(cfg.vocab_size));
  if (cfg.embed_dim < 1 || cfg.model_dim < 1 || cfg.latent_dim < 1)
    throw ContractError("model: embed_dim, model_dim, and latent_dim must be >= 1");
  if (cfg.enc_layers < 1 || cfg.dec_layers < 1)
    throw ContractError("model: need at least one encoder and one decoder block");
  if (cfg.max_positions < 2)
    throw ContractError("model: max_positions must be >= 2");
  if (!(cfg.dropout >= 0.0 && cfg.dropout < 1.0))
    throw ContractError("model: dropout must be in [0, 1)");
  if (cfg.gate_init != "standard" && cfg.gate_init != "near_zero")
    throw ContractError("model: gate_init must be 'standard' or 'near_zero', got '" +
                        cfg.gate_init + "'");

  cfg_.ffn_dim = cfg.ffn_dim > 0 ? cfg.ffn_dim : 4 * cfg.model_dim;
  cfg_.flow.dim = cfg.latent_dim;

  const long d = cfg.model_dim;
  embedding = init_normal({cfg.vocab_size, cfg.embed_dim}, 0.1, rng);
  project_ = cfg.embed_dim != d;
  if (project_) {
    enc_proj = Linear(cfg.embed_dim, d, rng);
    dec_proj = Linear(cfg.embed_dim, d, rng);
  }
  for (long i = 0; i < cfg.enc_layers; ++i)
    enc_blocks.emplace_back(d, cfg.n_heads, cfg_.ffn_dim, rng);
  for (long i = 0; i < cfg.dec_layers; ++i)
    dec_blocks.emplace_back(d, cfg.n_heads, cfg_.ffn_dim, rng);
  enc_final = LayerNorm(d);
  dec_final = LayerNorm(d);

  gate_wz = Linear(cfg.latent_dim, d, rng, /*bias=*/false);
  gate_wf = Linear(2 * d, d, rng);
  gate_wr = Linear(2 * d, d, rng);
  // Small gate weights keep the initial preactivation near the bias, so the
  // bias sets the initial opening: 0 -> f ~ 0.5 (standard), logit(0.05) ->
  // f ~ 0.05 (near-zero).
  gate_wf.W = init_normal({2 * d, d}, 0.02, rng);
  gate_wr.W = init_normal({2 * d, d}, 0.02, rng);
  if (cfg.gate_init == "near_zero") gate_wf.b = init_const({d}, logit(0.05));

  lm_head = Linear(d, cfg.vocab_size, rng);

  // Sinusoidal position table, built once as a constant.
  std::vector<double> pe(static_cast<std::size_t>(cfg.max_positions * d));
  for (long pos = 0; pos < cfg.max_positions; ++pos)
    for (long i = 0; i < d; ++i) {
      const double freq =
          std::exp(-std::log(10000.0) * static_cast<double>(2 * (i / 2)) /
                   static_cast<double>(d));
      const double angle = static_cast<double>(pos) * freq;
      pe[static_cast<std::size_t>(pos * d + i)] =
          (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  pos_table_ = Tensor::from({cfg.max_positions, d}, std::move(pe));
}

Tensor SumModel::positions(long len) const {
  if (len > cfg_.max_positions)
    throw ContractError("model: sequence length " + std::to_string(len) +
                        " exceeds max_positions " + std::to_string(cfg_.max_positions));
  return slice(pos_table_, 0, 0, len);
}

Tensor SumModel::embed_sequence(const std::vector<long>& ids, const Linear& proj,
                                bool has_proj) const {
  if (ids.empty()) throw ContractError("model: cannot embed an empty sequence");
  Tensor x = embedding_lookup(embedding, ids);
  if (has_proj) x = proj.forward(x);
  return add(x, positions(static_cast<long>(ids.size())));
}

Tensor SumModel::bow_embedding(const std::vector<double>& bow) const {
  if (static_cast<long>(bow.size()) != cfg_.vocab_size)
    throw ShapeError("bow_embedding: counts length " + std::to_string(bow.size()) +
                     " does not match vocabulary size " +
                     std::to_string(cfg_.vocab_size));
  double total = 0.0;
  for (double c : bow) {
    if (c < 0.0)
      throw ContractError("bow_embedding: negative bag-of-words count");
    total += c;
  }
  if (total <= 0.0)
    throw ContractError("bow_embedding: empty document (bag-of-words sums to zero)");
  return mul_scalar(vecmat(Tensor::from({cfg_.vocab_size}, bow), embedding),
                    1.0 / total);
}

Tensor SumModel::encode(const std::vector<long>& src, const std::vector<int>& src_mask,
                        const ForwardCtx& ctx) const {
  if (src.empty()) throw ContractError("model: empty source sequence");
  if (src_mask.size() != src.size())
    throw ShapeError("model: source mask length " + std::to_string(src_mask.size()) +
                     " does not match source length " + std::to_string(src.size()));
  Tensor x = embed_sequence(src, enc_proj, project_);
  for (const auto& blk : enc_blocks) x = blk.forward(x, src_mask, cfg_.dropout, ctx);
  return enc_final.forward(x);
}

Tensor SumModel::decode(const std::vector<long>& dec_in, const Tensor& enc,
                        const std::vector<int>& src_mask, const ForwardCtx& ctx) const {
  if (enc.rank() != 2 || enc.shape()[1] != cfg_.model_dim)
    throw ShapeError("model: encoder states must be [positions, model_dim]");
  if (static_cast<long>(src_mask.size()) != enc.shape()[0])
    throw ShapeError("model: source mask length does not match encoder positions");
  Tensor x = embed_sequence(dec_in, dec_proj, project_);
  for (const auto& blk : dec_blocks)
    x = blk.forward(x, enc, src_mask, cfg_.dropout, ctx);
  return dec_final.forward(x);
}

GateResult SumModel::gate_fuse(const Tensor& h, const Tensor& zK) const {
  if (h.rank() != 2 || h.shape()[1] != cfg_.model_dim)
    throw ShapeError("gate_fuse: hidden states must be [positions, model_dim]");
  if (zK.rank() != 1 || zK.shape()[0] != cfg_.latent_dim)
    throw ShapeError("gate_fuse: latent must be a vector of length " +
                     std::to_string(cfg_.latent_dim));
  const long n = h.shape()[0];
  Tensor zp = gate_wz.forward(zK);
  Tensor zb = broadcast_to(zp, {n, cfg_.model_dim});
  Tensor hz = concat({h, zb}, 1);
  Tensor f = sigmoid(gate_wf.forward(hz));
  Tensor r = sigmoid(gate_wr.forward(hz));
  Tensor one_minus_f = add_scalar(neg(f), 1.0);
  Tensor g = add(mul(add_scalar(neg(r), 1.0), square(f)),
                 mul(r, add_scalar(neg(square(one_minus_f)), 1.0)));
  Tensor fused = add(mul(add_scalar(neg(g), 1.0), h), mul(g, zb));
  return {fused, g};
}

Tensor SumModel::lm_logits(const Tensor& fused) const {
  return lm_head.forward(fused);
}

Tensor SumModel::forward(const Example& ex, const LatentSample& sample,
                         const ForwardCtx& ctx) const {
  if (ex.target_ids.empty())
    throw ContractError("model: example has an empty target");
  if (ex.target_mask.size() != ex.target_ids.size())
    throw ShapeError("model: target mask length does not match target length");
  std::vector<long> dec_in;
  dec_in.reserve(ex.target_ids.size());
  dec_in.push_back(Tokenizer::kBos);
  dec_in.insert(dec_in.end(), ex.target_ids.begin(), ex.target_ids.end() - 1);
  Tensor enc = encode(ex.source_ids, ex.source_mask, ctx);
  Tensor dec = decode(dec_in, enc, ex.source_mask, ctx);
  GateResult gate = gate_fuse(dec, sample.zK);
  return lm_logits(gate.fused);
}

std::pair<Tensor, Tensor> SumModel::posterior_params(const Example& ex,
                                                     const ForwardCtx& ctx) const {
  return infer.forward(bow_embedding(ex.bow), ctx);
}

LatentSample SumModel::sample_posterior(const Example& ex, const ForwardCtx& ctx,
                                        Rng& noise) const {
  auto [mu0, ls0] = posterior_params(ex, ctx);
  return sample_latent(mu0, ls0, flows, noise);
}

LatentSample SumModel::deterministic_latent(const Example& ex) const {
  auto [mu0, ls0] = posterior_params(ex, {});
  auto r = flows.forward(mu0);
  return {mu0, r.z, std::move(r.log_dets), mu0, ls0};
}

void SumModel::collect(const std::string& prefix, ParamList& out) const {
  collect_generator(prefix, out);
  collect_posterior(prefix, out);
}

void SumModel::collect_generator(const std::string& prefix, ParamList& out) const {
  out.add(prefix + ".embedding", embedding);
  if (project_) {
    enc_proj.collect(prefix + ".enc_proj", out);
    dec_proj.collect(prefix + ".dec_proj", out);
  }
  for (std::size_t i = 0; i < enc_blocks.size(); ++i)
    enc_blocks[i].collect(prefix + ".enc" + std::to_string(i), out);
  enc_final.collect(prefix + ".enc_ln", out);
  for (std::size_t i = 0; i < dec_blocks.size(); ++i)
    dec_blocks[i].collect(prefix + ".dec" + std::to_string(i), out);
  dec_final.collect(prefix + ".dec_ln", out);
  gate_wz.collect(prefix + ".gate.wz", out);
  gate_wf.collect(prefix + ".gate.wf", out);
  gate_wr.collect(prefix + ".gate.wr", out);
  lm_head.collect(prefix + ".lm", out);
}

void SumModel::collect_posterior(const std::string& prefix, ParamList& out) const {
  infer.collect(prefix + ".infer", out);
  flows.collect(prefix + ".flows", out);
}

// ------------------------------------------------------------ make_example

Example make_example(const std::vector<long>& doc, const std::vector<long>& summary,
                     long vocab_size, long max_source, long max_target) {
  if (vocab_size < 4)
    throw ContractError("make_example: vocabulary must cover the reserved ids");
  if (max_source < 1 || max_target < 1)
    throw ContractError("make_example: max_source and max_target must be >= 1");
  if (doc.empty()) throw ContractError("make_example: empty document");
  auto check_ids = [vocab_size](const std::vector<long>& ids, const char* what) {
    for (long id : ids) {
      if (id < 1 || id >= vocab_size)
        throw ContractError(std::string("make_example: ") + what + " token id " +
                            std::to_string(id) + " outside [1, " +
                            std::to_string(vocab_size) + ")");
    }
  };
  check_ids(doc, "document");
  check_ids(summary, "summary");

  Example ex;
  const long m = std::min<long>(static_cast<long>(doc.size()), max_source);
  ex.source_ids.assign(doc.begin(), doc.begin() + m);
  ex.source_mask.assign(static_cast<std::size_t>(m), 1);

  const long raw = std::min<long>(static_cast<long>(summary.size()), max_target - 1);
  ex.target_ids.assign(summary.begin(), summary.begin() + raw);
  ex.target_ids.push_back(Tokenizer::kEos);
  ex.target_mask.assign(ex.target_ids.size(), 1);

  ex.bow.assign(static_cast<std::size_t>(vocab_size), 0.0);
  for (long id : doc) ex.bow[static_cast<std::size_t>(id)] += 1.0;
  return ex;
}

// ------------------------------------------------------------- beam search

DecodeResult beam_search(const SumModel& model, const Example& ex, long beam_size,
                         double length_penalty, long max_len) {
  if (beam_size < 1)
    throw ContractError("beam_search: beam_size must be >= 1");
  if (max_len < 1) throw ContractError("beam_search: max_len must be >= 1");
  if (length_penalty < 0.0)
    throw ContractError("beam_search: length penalty must be >= 0");

  TapeSuspend guard;
  const ForwardCtx eval{};
  LatentSample latent = model.deterministic_latent(ex);
  Tensor enc = model.encode(ex.source_ids, ex.source_mask, eval);
  const long vocab = model.config().vocab_size;

  struct Hyp {
    std::vector<long> ids;
    double logp = 0.0;
  };
  std::vector<Hyp> alive = {Hyp{}};

  bool have_finished = false, have_truncated = false;
  DecodeResult best_finished, best_truncated;

  auto score_of = [length_penalty](double logp, long gen_len) {
    return logp / std::pow(static_cast<double>(gen_len), length_penalty);
  };

  for (long step = 0; step < max_len && !alive.empty(); ++step) {
    struct Cand {
      std::size_t parent;
      long token;
      double logp;
    };
    std::vector<Cand> expansions;
    for (std::size_t pi = 0; pi < alive.size(); ++pi) {
      const Hyp& hyp = alive[pi];
      std::vector<long> dec_in;
      dec_in.reserve(hyp.ids.size() + 1);
      dec_in.push_back(Tokenizer::kBos);
      dec_in.insert(dec_in.end(), hyp.ids.begin(), hyp.ids.end());
      Tensor dec = model.decode(dec_in, enc, ex.source_mask, eval);
      GateResult gate = model.gate_fuse(dec, latent.zK);
      Tensor logits = model.lm_logits(gate.fused);
      Tensor row = log_softmax(
          slice(logits, 0, static_cast<long>(dec_in.size()) - 1, 1));
      for (long v = 0; v < vocab; ++v) {
        if (v == Tokenizer::kPad || v == Tokenizer::kBos) continue;
        expansions.push_back({pi, v, hyp.logp + row.at(0, v)});
      }
    }

    // Every candidate — ending or continuing — competes for a beam slot, so
    // beam_size = 1 is exactly greedy decoding. Winners that emit the end
    // token (or exhaust the budget) leave the beam for the result pools.
    const std::size_t keep = std::min<std::size_t>(
        expansions.size(), static_cast<std::size_t>(beam_size));
    std::partial_sort(expansions.begin(), expansions.begin() + static_cast<long>(keep),
                      expansions.end(), [](const Cand& a, const Cand& b) {
                        if (a.logp != b.logp) return a.logp > b.logp;
                        if (a.parent != b.parent) return a.parent < b.parent;
                        return a.token < b.token;
                      });
    std::vector<Hyp> next;
    next.reserve(keep);
    for (std::size_t i = 0; i < keep; ++i) {
      const Cand& c = expansions[i];
      const Hyp& parent = alive[c.parent];
      const long gen_len = static_cast<long>(parent.ids.size()) + 1;
      if (c.token == Tokenizer::kEos) {
        const double s = score_of(c.logp, gen_len);
        if (!have_finished || s > best_finished.score) {
          best_finished = {parent.ids, s, false};
          have_finished = true;
        }
      } else if (gen_len >= max_len) {
        const double s = score_of(c.logp, gen_len);
        if (!have_truncated || s > best_truncated.score) {
          std::vector<long> ids = parent.ids;
          ids.push_back(c.token);
          best_truncated = {std::move(ids), s, true};
          have_truncated = true;
        }
      } else {
        Hyp h;
        h.ids = parent.ids;
        h.ids.push_back(c.token);
        h.logp = c.logp;
        next.push_back(std::move(h));
      }
    }
    alive = std::move(next);
  }

  if (have_finished) return best_finished;
  if (have_truncated) return best_truncated;
  throw ContractError("beam_search: no hypothesis produced");  // unreachable
}

}  // namespace flowvi

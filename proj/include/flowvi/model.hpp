#pragma once

// Gated encoder-decoder: token embeddings, sinusoidal positions, pre-norm
// transformer encoder/decoder, the refined gate that fuses the transported
// latent into the decoder states, an LM head, and beam-search decoding.
// Forward and decode are const (pure in eval mode), so a read-only model may
// be shared across threads decoding different documents.

#include <string>
#include <utility>
#include <vector>

#include "flowvi/flows.hpp"
#include "flowvi/latent.hpp"
#include "flowvi/nn.hpp"
#include "flowvi/tensor.hpp"

namespace flowvi {

struct ModelConfig {
  long vocab_size = 0;    // V (including the four reserved ids)
  long embed_dim = 64;    // e
  long model_dim = 64;    // d
  long n_heads = 4;
  long enc_layers = 2;
  long dec_layers = 2;
  long ffn_dim = 0;       // 0 -> 4 * model_dim
  long latent_dim = 16;   // l
  long infer_hidden = 64; // inference-net hidden width
  long max_positions = 512;
  double dropout = 0.1;
  std::string gate_init = "standard";  // "standard" | "near_zero"
  FlowConfig flow;        // flow.dim is overwritten with latent_dim
  long n_flows = 2;       // K
};

// One training/eval example. Sources are truncated to the encoder budget but
// the bag-of-words counts always come from the untruncated document, so
// sum(bow) >= number of source tokens, with equality iff nothing was cut.
struct Example {
  std::vector<long> source_ids;
  std::vector<int> source_mask;   // nonzero = real token (pads masked out)
  std::vector<long> target_ids;   // y_1..y_n, ends with eos
  std::vector<int> target_mask;
  std::vector<double> bow;        // length V, counts over the untruncated source
};

Example make_example(const std::vector<long>& doc, const std::vector<long>& summary,
                     long vocab_size, long max_source, long max_target);

// Multi-head attention over one sequence; masks are value-level.
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(long dim, long heads, Rng& rng);
  // q_in: [Tq, d]; kv_in: [Tk, d]. key_mask (optional) zeroes out attention
  // to masked key positions; causal restricts position j to keys <= j.
  Tensor forward(const Tensor& q_in, const Tensor& kv_in,
                 const std::vector<int>* key_mask, bool causal) const;
  void collect(const std::string& prefix, ParamList& out) const;

  Linear wq, wk, wv, wo;
  long heads = 1;
};

class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(long dim, long hidden, Rng& rng);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;

  Linear up, down;
};

// Pre-norm block: x + Drop(Attn(LN(x))) then x + Drop(FFN(LN(x))); decoder
// blocks add a cross-attention sublayer between the two.
class EncoderBlock {
 public:
  EncoderBlock() = default;
  EncoderBlock(long dim, long heads, long ffn, Rng& rng);
  Tensor forward(const Tensor& x, const std::vector<int>& src_mask, double dropout_p,
                 const ForwardCtx& ctx) const;
  void collect(const std::string& prefix, ParamList& out) const;

  LayerNorm ln1, ln2;
  MultiHeadAttention attn;
  FeedForward ffn;
};

class DecoderBlock {
 public:
  DecoderBlock() = default;
  DecoderBlock(long dim, long heads, long ffn, Rng& rng);
  Tensor forward(const Tensor& x, const Tensor& enc, const std::vector<int>& src_mask,
                 double dropout_p, const ForwardCtx& ctx) const;
  void collect(const std::string& prefix, ParamList& out) const;

  LayerNorm ln1, ln2, ln3;
  MultiHeadAttention self_attn, cross_attn;
  FeedForward ffn;
};

struct GateResult {
  Tensor fused;   // [n, d] — the h' of the refined gate
  Tensor scores;  // [n, d] — elementwise gate openings g in (0,1)
};

struct DecodeResult {
  std::vector<long> ids;   // generated tokens, bos/eos stripped
  double score = 0.0;      // log-probability / length^penalty
  bool truncated = false;  // hit max_len with no end token
};

class SumModel {
 public:
  SumModel(const ModelConfig& cfg, Rng& rng);

  // Bag-of-words average embedding: (sum_v bow_v E_v) / (sum_v bow_v).
  Tensor bow_embedding(const std::vector<double>& bow) const;

  Tensor encode(const std::vector<long>& src, const std::vector<int>& src_mask,
                const ForwardCtx& ctx) const;                       // [m, d]
  Tensor decode(const std::vector<long>& dec_in, const Tensor& enc,
                const std::vector<int>& src_mask, const ForwardCtx& ctx) const;  // [n, d]

  // The refined gate: z' = Wz zK broadcast over positions;
  // f = sig(Wf [h; z']), r = sig(Wr [h; z']),
  // g = (1-r) f^2 + r (1 - (1-f)^2), h' = (1-g) h + g z'.
  GateResult gate_fuse(const Tensor& h, const Tensor& zK) const;

  Tensor lm_logits(const Tensor& fused) const;  // [n, V]

  // Teacher-forced pass: decoder input is the right-shifted target; row j of
  // the result scores target token j and depends only on source, zK, and
  // targets before j.
  Tensor forward(const Example& ex, const LatentSample& sample,
                 const ForwardCtx& ctx) const;

  // Variational posterior interface.
  std::pair<Tensor, Tensor> posterior_params(const Example& ex,
                                             const ForwardCtx& ctx) const;
  LatentSample sample_posterior(const Example& ex, const ForwardCtx& ctx,
                                Rng& noise) const;
  // Decode-time latent: eps = 0, so z0 = mu0 transported through the flows.
  LatentSample deterministic_latent(const Example& ex) const;

  void collect(const std::string& prefix, ParamList& out) const;
  // Posterior-side parameters (inference net + flows) versus everything else;
  // the two sets partition collect() exactly.
  void collect_posterior(const std::string& prefix, ParamList& out) const;
  void collect_generator(const std::string& prefix, ParamList& out) const;

  const ModelConfig& config() const { return cfg_; }

  Tensor embedding;  // [V, e]
  Linear enc_proj, dec_proj;  // e -> d, present only when e != d
  std::vector<EncoderBlock> enc_blocks;
  std::vector<DecoderBlock> dec_blocks;
  LayerNorm enc_final, dec_final;
  Linear gate_wz;          // l -> d, no bias
  Linear gate_wf, gate_wr; // 2d -> d
  Linear lm_head;          // d -> V
  InferenceNet infer;
  FlowStack flows;

 private:
  Tensor positions(long len) const;  // [len, d] sinusoidal table slice
  Tensor embed_sequence(const std::vector<long>& ids, const Linear& proj,
                        bool has_proj) const;
  ModelConfig cfg_;
  Tensor pos_table_;  // constant [max_positions, d]
  bool project_ = false;
};

DecodeResult beam_search(const SumModel& model, const Example& ex, long beam_size,
                         double length_penalty, long max_len);

}  // namespace flowvi

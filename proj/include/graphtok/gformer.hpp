#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "graphtok/params.hpp"
#include "graphtok/random.hpp"
#include "graphtok/rvq.hpp"
#include "graphtok/serialize.hpp"
#include "graphtok/tensor.hpp"

namespace graphtok::gformer {

using diff::Tensor;

enum class TokenSource {
  discrete,    // c learned token embeddings per node, plus the optional aggregate token
  continuous,  // one projected input vector per node
};

struct TransformerConfig {
  std::size_t num_layers = 1;
  std::size_t num_heads = 4;
  std::size_t model_dim = 32;
  std::size_t ffn_dim = 64;
  double dropout = 0.0;
  std::size_t k = 0;
  std::size_t num_codebooks = 3;
  std::size_t codebook_size = 16;
  std::size_t code_dim = 16;    // also the input width for continuous sources
  std::size_t num_classes = 2;
  TokenSource source = TokenSource::discrete;
  bool use_codebook_aggregate = true;
  bool use_positional = true;
  bool use_hierarchical = true;
  bool use_gating = true;

  void validate() const;
  std::size_t tokens_per_node() const;
  std::size_t hierarchy_rows() const { return num_codebooks + 1; }
};

struct EncoderLayerParams {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_gain, ln2_bias;
  Tensor ffn1_w, ffn1_b, ffn2_w, ffn2_b;
};

struct ModelParams {
  Tensor token_table;  // [c*K, d]; undefined for continuous sources
  Tensor proj_w;       // [code_dim, d]: aggregate token or continuous input
  Tensor proj_b;       // [d]
  Tensor pe;           // [k+1, d]
  Tensor he;           // [c+1, d]
  std::vector<EncoderLayerParams> layers;
  Tensor readout_w;    // [d, 1]
  Tensor cls_w;        // [d, num_classes]
  Tensor cls_b;        // [num_classes]

  diff::ParameterList parameters() const;
};

ModelParams init_model(const TransformerConfig& cfg, Rng& rng);

// What a forward pass reads. Node features and the GNN are never involved.
struct Inputs {
  const SequenceSet* sequences = nullptr;
  const TokenTable* tokens = nullptr;       // discrete
  const CodebookSet* codebooks = nullptr;   // discrete with aggregate token
  const Matrix* continuous = nullptr;       // continuous
};

// [B, L, tokens_per_node, d] embeddings (tokens + PE + HE) for targets whose
// sequences all have length L.
Tensor embed_batch(const ModelParams& p, const TransformerConfig& cfg, const Inputs& in,
                   std::span<const NodeId> targets);

// Scales every token of sequence position i by gates[b, i]. embeds is
// [B, L, T, d], gates [B, L].
Tensor apply_gating(const Tensor& embeds, const Tensor& gates);

// h <- LN(MHA(LN(h)) + h); h <- h + MLP(h). Accepts [T, d] or [B, T, d].
Tensor encoder_layer(const Tensor& h, const EncoderLayerParams& p, std::size_t num_heads,
                     double dropout = 0.0, Rng* rng = nullptr);

// [B, L*T, d] -> [B, L, d], summing the T tokens of each node.
Tensor pool_tokens(const Tensor& h, std::size_t tokens_per_node);

// alpha = softmax_i(h_i . w); returns sum_i alpha_i h_i. h is [B, L, d];
// `alpha` (optional) receives [B, L].
Tensor attention_readout(const Tensor& h, const Tensor& w, Tensor* alpha = nullptr);

Tensor classify(const Tensor& h, const Tensor& w, const Tensor& b);

struct ForwardOptions {
  bool training = false;
  Rng* rng = nullptr;
};

// Logits [B, num_classes] for targets that share a sequence length.
Tensor forward(const ModelParams& p, const TransformerConfig& cfg, const Inputs& in,
               std::span<const NodeId> targets, const ForwardOptions& opts = {});

// Gating weights of the targets as a [B, L] constant.
Tensor gate_tensor(const SequenceSet& s, std::span<const NodeId> targets, std::size_t length);

}  // namespace graphtok::gformer

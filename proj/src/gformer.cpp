#include "graphtok/gformer.hpp"

#include <cmath>

#include "graphtok/errors.hpp"
#include "graphtok/ops.hpp"

namespace graphtok::gformer {
namespace {

using namespace graphtok::diff;

Tensor glorot(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-limit, limit);
  std::vector<double> v(fan_in * fan_out);
  for (double& x : v) x = u(rng);
  return Tensor({fan_in, fan_out}, std::move(v), true);
}

Tensor normal(Shape shape, double stddev, Rng& rng) {
  std::normal_distribution<double> n(0.0, stddev);
  std::vector<double> v(diff::numel(shape));
  for (double& x : v) x = n(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

Tensor ones(std::size_t n) { return Tensor({n}, std::vector<double>(n, 1.0), true); }

Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) { return add(matmul(x, w), b); }

Tensor maybe_dropout(const Tensor& x, double rate, Rng* rng) {
  if (rate <= 0.0 || rng == nullptr) return x;
  return dropout(x, rate, *rng);
}

}  // namespace

void TransformerConfig::validate() const {
  if (num_layers < 1 || num_heads < 1 || model_dim < 1 || ffn_dim < 1 || num_classes < 1) {
    throw ArgumentError("transformer: layer, head, width and class counts must be >= 1");
  }
  if (model_dim % num_heads != 0) {
    throw ArgumentError("transformer: model_dim " + std::to_string(model_dim) +
                        " not divisible by num_heads " + std::to_string(num_heads));
  }
  if (source == TokenSource::discrete && (num_codebooks < 1 || codebook_size < 1)) {
    throw ArgumentError("transformer: discrete tokens need c >= 1 and K >= 1");
  }
  if (code_dim < 1) throw ArgumentError("transformer: code_dim must be >= 1");
  if (dropout < 0.0 || dropout >= 1.0) throw ArgumentError("transformer: dropout must be in [0,1)");
}

std::size_t TransformerConfig::tokens_per_node() const {
  if (source == TokenSource::continuous) return 1;
  return num_codebooks + (use_codebook_aggregate ? 1 : 0);
}

diff::ParameterList ModelParams::parameters() const {
  diff::ParameterList out;
  auto put = [&out](std::string name, const Tensor& t) {
    if (t.defined()) out.push_back({std::move(name), t});
  };
  put("xt.table", token_table);
  put("xt.proj.weight", proj_w);
  put("xt.proj.bias", proj_b);
  put("pe", pe);
  put("he", he);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const EncoderLayerParams& l = layers[i];
    const std::string b = "encoder.layer" + std::to_string(i) + ".";
    put(b + "ln1.gain", l.ln1_gain);
    put(b + "ln1.bias", l.ln1_bias);
    put(b + "attn.wq", l.wq);
    put(b + "attn.bq", l.bq);
    put(b + "attn.wk", l.wk);
    put(b + "attn.bk", l.bk);
    put(b + "attn.wv", l.wv);
    put(b + "attn.bv", l.bv);
    put(b + "attn.wo", l.wo);
    put(b + "attn.bo", l.bo);
    put(b + "ln2.gain", l.ln2_gain);
    put(b + "ln2.bias", l.ln2_bias);
    put(b + "ffn1.weight", l.ffn1_w);
    put(b + "ffn1.bias", l.ffn1_b);
    put(b + "ffn2.weight", l.ffn2_w);
    put(b + "ffn2.bias", l.ffn2_b);
  }
  put("readout.weight", readout_w);
  put("classifier.weight", cls_w);
  put("classifier.bias", cls_b);
  return out;
}

ModelParams init_model(const TransformerConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t d = cfg.model_dim;
  ModelParams p;
  if (cfg.source == TokenSource::discrete) {
    p.token_table = normal({cfg.num_codebooks * cfg.codebook_size, d}, 1.0, rng);
  }
  if (cfg.source == TokenSource::continuous || cfg.use_codebook_aggregate) {
    p.proj_w = glorot(cfg.code_dim, d, rng);
    p.proj_b = Tensor::zeros({d}, true);
  }
  if (cfg.use_positional) p.pe = normal({cfg.k + 1, d}, 0.1, rng);
  if (cfg.use_hierarchical && cfg.source == TokenSource::discrete) {
    p.he = normal({cfg.hierarchy_rows(), d}, 0.1, rng);
  }
  for (std::size_t i = 0; i < cfg.num_layers; ++i) {
    EncoderLayerParams l;
    l.ln1_gain = ones(d);
    l.ln1_bias = Tensor::zeros({d}, true);
    l.wq = glorot(d, d, rng);
    l.bq = Tensor::zeros({d}, true);
    l.wk = glorot(d, d, rng);
    l.bk = Tensor::zeros({d}, true);
    l.wv = glorot(d, d, rng);
    l.bv = Tensor::zeros({d}, true);
    l.wo = glorot(d, d, rng);
    l.bo = Tensor::zeros({d}, true);
    l.ln2_gain = ones(d);
    l.ln2_bias = Tensor::zeros({d}, true);
    l.ffn1_w = glorot(d, cfg.ffn_dim, rng);
    l.ffn1_b = Tensor::zeros({cfg.ffn_dim}, true);
    l.ffn2_w = glorot(cfg.ffn_dim, d, rng);
    l.ffn2_b = Tensor::zeros({d}, true);
    p.layers.push_back(std::move(l));
  }
  p.readout_w = glorot(d, 1, rng);
  p.cls_w = glorot(d, cfg.num_classes, rng);
  p.cls_b = Tensor::zeros({cfg.num_classes}, true);
  return p;
}

Tensor gate_tensor(const SequenceSet& s, std::span<const NodeId> targets, std::size_t length) {
  std::vector<double> g;
  g.reserve(targets.size() * length);
  for (NodeId t : targets) {
    const auto row = s.gates_of(t);
    for (std::size_t i = 0; i < length; ++i) g.push_back(row[i]);
  }
  return Tensor({targets.size(), length}, std::move(g));
}

Tensor embed_batch(const ModelParams& p, const TransformerConfig& cfg, const Inputs& in,
                   std::span<const NodeId> targets) {
  if (!in.sequences) throw ArgumentError("embed: sequences are required");
  if (targets.empty()) throw ArgumentError("embed: empty batch");
  const SequenceSet& seq = *in.sequences;
  const std::size_t b = targets.size();
  const std::size_t len = seq.length(targets[0]);
  if (len > cfg.k + 1) {
    throw ShapeError("embed: sequence length " + std::to_string(len) + " exceeds k+1=" +
                     std::to_string(cfg.k + 1));
  }
  std::vector<NodeId> nodes;
  nodes.reserve(b * len);
  for (NodeId t : targets) {
    if (t >= seq.num_nodes) throw IndexError("embed: target " + std::to_string(t) + " out of range");
    if (seq.length(t) != len) throw ArgumentError("embed: batch mixes sequence lengths");
    const auto row = seq.ids_of(t);
    nodes.insert(nodes.end(), row.begin(), row.begin() + static_cast<std::ptrdiff_t>(len));
  }
  const std::size_t d = cfg.model_dim;
  const std::size_t tpn = cfg.tokens_per_node();

  // Rows of `src` for every sequence position, projected to the model width.
  auto project = [&](const Matrix& src, bool by_node) {
    if (src.cols != cfg.code_dim) throw ShapeError("embed: input width differs from code_dim");
    Matrix rows(nodes.size(), src.cols);
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      const auto r = src.row(by_node ? nodes[i] : i);
      std::copy(r.begin(), r.end(), rows.row(i).begin());
    }
    return reshape(affine(Tensor::from_matrix(rows), p.proj_w, p.proj_b), {b, len, 1, d});
  };

  Tensor x;
  if (cfg.source == TokenSource::continuous) {
    if (!in.continuous) throw ArgumentError("embed: continuous inputs are required");
    x = project(*in.continuous, true);
  } else {
    if (!in.tokens) throw ArgumentError("embed: token table is required");
    const TokenTable& tt = *in.tokens;
    const std::size_t c = cfg.num_codebooks;
    if (tt.num_codebooks != c) throw ShapeError("embed: token table has a different codebook count");
    std::vector<std::size_t> idx;
    idx.reserve(nodes.size() * c);
    for (NodeId v : nodes) {
      for (std::size_t level = 0; level < c; ++level) {
        const std::uint32_t t = tt.at(v, level);
        if (t >= cfg.codebook_size) {
          throw IndexError("embed: token " + std::to_string(t) + " >= K=" + std::to_string(cfg.codebook_size));
        }
        idx.push_back(level * cfg.codebook_size + t);
      }
    }
    x = reshape(embedding_lookup(p.token_table, idx), {b, len, c, d});
    if (cfg.use_codebook_aggregate) {
      if (!in.codebooks) throw ArgumentError("embed: codebooks are required for the aggregate token");
      Matrix agg(nodes.size(), in.codebooks->code_dim);
      for (std::size_t i = 0; i < nodes.size(); ++i) {
        const std::vector<double> a = codebook_aggregate(tt.row(nodes[i]), *in.codebooks);
        std::copy(a.begin(), a.end(), agg.row(i).begin());
      }
      x = concat({x, project(agg, false)}, 2);
    }
  }
  if (p.pe.defined()) x = add(x, reshape(slice(p.pe, 0, 0, len), {1, len, 1, d}));
  if (p.he.defined() && cfg.source == TokenSource::discrete) {
    Tensor he = slice(p.he, 0, 0, cfg.num_codebooks);
    if (cfg.use_codebook_aggregate) he = p.he;
    x = add(x, reshape(he, {1, 1, tpn, d}));
  }
  return x;
}

Tensor apply_gating(const Tensor& embeds, const Tensor& gates) {
  if (embeds.rank() != 4 || gates.rank() != 2 || gates.dim(0) != embeds.dim(0) ||
      gates.dim(1) != embeds.dim(1)) {
    throw ShapeError("apply_gating: embeds " + to_string(embeds.shape()) + " with gates " +
                     to_string(gates.shape()));
  }
  return mul(embeds, reshape(gates, {gates.dim(0), gates.dim(1), 1, 1}));
}

Tensor encoder_layer(const Tensor& h, const EncoderLayerParams& p, std::size_t num_heads,
                     double dropout_rate, Rng* rng) {
  if (h.rank() == 2) {
    return reshape(encoder_layer(reshape(h, {1, h.dim(0), h.dim(1)}), p, num_heads, dropout_rate, rng),
                   h.shape());
  }
  if (h.rank() != 3 || h.dim(2) != p.wq.dim(0)) {
    throw ShapeError("encoder_layer: input " + to_string(h.shape()) + " for width " +
                     std::to_string(p.wq.dim(0)));
  }
  const std::size_t b = h.dim(0);
  const std::size_t t = h.dim(1);
  const std::size_t d = h.dim(2);
  if (d % num_heads != 0) throw ShapeError("encoder_layer: width not divisible by heads");
  const std::size_t dh = d / num_heads;

  const Tensor x = layer_norm(h, p.ln1_gain, p.ln1_bias);
  auto heads = [&](const Tensor& w, const Tensor& bias) {
    return permute(reshape(affine(x, w, bias), {b, t, num_heads, dh}), {0, 2, 1, 3});
  };
  const Tensor q = heads(p.wq, p.bq);
  const Tensor k = heads(p.wk, p.bk);
  const Tensor v = heads(p.wv, p.bv);
  const Tensor scores = scale(matmul(q, permute(k, {0, 1, 3, 2})), 1.0 / std::sqrt(static_cast<double>(dh)));
  const Tensor att = maybe_dropout(softmax(scores, 3), dropout_rate, rng);
  const Tensor merged = reshape(permute(matmul(att, v), {0, 2, 1, 3}), {b, t, d});
  const Tensor mha = maybe_dropout(affine(merged, p.wo, p.bo), dropout_rate, rng);
  const Tensor h1 = layer_norm(add(mha, h), p.ln2_gain, p.ln2_bias);
  const Tensor ffn = affine(relu(affine(h1, p.ffn1_w, p.ffn1_b)), p.ffn2_w, p.ffn2_b);
  return add(h1, maybe_dropout(ffn, dropout_rate, rng));
}

Tensor pool_tokens(const Tensor& h, std::size_t tokens_per_node) {
  if (h.rank() != 3 || tokens_per_node == 0 || h.dim(1) % tokens_per_node != 0) {
    throw ShapeError("pool_tokens: " + to_string(h.shape()) + " is not a whole number of " +
                     std::to_string(tokens_per_node) + "-token nodes");
  }
  return sum(reshape(h, {h.dim(0), h.dim(1) / tokens_per_node, tokens_per_node, h.dim(2)}), 2);
}

Tensor attention_readout(const Tensor& h, const Tensor& w, Tensor* alpha) {
  if (h.rank() == 2) {
    Tensor out = attention_readout(reshape(h, {1, h.dim(0), h.dim(1)}), w, alpha);
    if (alpha) *alpha = reshape(*alpha, {h.dim(0)});
    return reshape(out, {h.dim(1)});
  }
  if (h.rank() != 3) throw ShapeError("attention_readout: expected [B, L, d], got " + to_string(h.shape()));
  const std::size_t b = h.dim(0);
  const std::size_t l = h.dim(1);
  const Tensor a = softmax(reshape(matmul(h, reshape(w, {h.dim(2), 1})), {b, l}), 1);
  if (alpha) *alpha = a;
  return sum(mul(h, reshape(a, {b, l, 1})), 1);
}

Tensor classify(const Tensor& h, const Tensor& w, const Tensor& b) { return affine(h, w, b); }

Tensor forward(const ModelParams& p, const TransformerConfig& cfg, const Inputs& in,
               std::span<const NodeId> targets, const ForwardOptions& opts) {
  Tensor x = embed_batch(p, cfg, in, targets);
  const std::size_t b = x.dim(0);
  const std::size_t len = x.dim(1);
  const std::size_t tpn = x.dim(2);
  if (cfg.use_gating) x = apply_gating(x, gate_tensor(*in.sequences, targets, len));
  Tensor h = reshape(x, {b, len * tpn, cfg.model_dim});
  Rng* rng = opts.training ? opts.rng : nullptr;
  if (opts.training && cfg.dropout > 0.0 && rng == nullptr) {
    throw ArgumentError("transformer: dropout needs a random stream");
  }
  for (const EncoderLayerParams& layer : p.layers) {
    h = encoder_layer(h, layer, cfg.num_heads, opts.training ? cfg.dropout : 0.0, rng);
  }
  return classify(attention_readout(pool_tokens(h, tpn), p.readout_w), p.cls_w, p.cls_b);
}

}  // namespace graphtok::gformer

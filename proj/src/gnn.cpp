#include "graphtok/gnn.hpp"

#include <atomic>
#include <cmath>

#include "graphtok/errors.hpp"
#include "graphtok/ops.hpp"

namespace graphtok::gnn {
namespace {

std::atomic<std::size_t> g_encode_calls{0};

Tensor glorot(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> unif(-limit, limit);
  std::vector<double> v(fan_in * fan_out);
  for (double& x : v) x = unif(rng);
  return Tensor({fan_in, fan_out}, std::move(v), true);
}

}  // namespace

void GnnConfig::validate() const {
  if (num_layers < 1) throw ArgumentError("gnn: num_layers must be >= 1");
  if (hidden_dim < 1) throw ArgumentError("gnn: hidden_dim must be >= 1");
  if (heads < 1) throw ArgumentError("gnn: heads must be >= 1");
  if (layer_kind == LayerKind::gat && num_layers > 1 && hidden_dim % heads != 0) {
    throw ArgumentError("gnn: hidden_dim must be divisible by heads for concatenated GAT layers");
  }
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw ArgumentError("gnn: dropout_rate in [0,1)");
}

AttentionNeighborhood attention_neighborhood(const Graph& g, bool include_self_loops) {
  AttentionNeighborhood nb;
  nb.num_nodes = g.num_nodes();
  nb.offsets.assign(g.num_nodes() + 1, 0);
  for (NodeId i = 0; i < g.num_nodes(); ++i) {
    bool self_done = !include_self_loops;
    for (NodeId j : g.neighbors(i)) {
      if (!self_done && i < j) {
        nb.cols.push_back(i);
        self_done = true;
      }
      nb.cols.push_back(j);
    }
    if (!self_done) nb.cols.push_back(i);
    nb.offsets[i + 1] = nb.cols.size();
  }
  return nb;
}

GraphOperators GraphOperators::from(const Graph& g) {
  return {normalized_adjacency(g, true), attention_neighborhood(g, true)};
}

Tensor activate(const Tensor& x, Activation act) {
  switch (act) {
    case Activation::elu:
      return diff::elu(x);
    case Activation::relu:
      return diff::relu(x);
    case Activation::none:
      break;
  }
  return x;
}

Tensor gcn_layer(const NormalizedAdjacency& p, const Tensor& h, const Tensor& weight,
                 const Tensor& bias, Activation act) {
  if (h.rank() != 2 || h.dim(0) != p.num_nodes) {
    throw ShapeError("gcn_layer: features " + diff::to_string(h.shape()) + " for " +
                     std::to_string(p.num_nodes) + " nodes");
  }
  Tensor out = diff::matmul(diff::spmm(p, h), weight);
  if (bias.defined()) out = diff::add(out, bias);
  return activate(out, act);
}

Tensor gat_layer(const AttentionNeighborhood& nb, const Tensor& h, const GatLayerParams& params,
                 const GatOptions& options, std::vector<Tensor>* attention) {
  if (h.rank() != 2 || h.dim(0) != nb.num_nodes) {
    throw ShapeError("gat_layer: features " + diff::to_string(h.shape()) + " for " +
                     std::to_string(nb.num_nodes) + " nodes");
  }
  if (params.heads.empty()) throw ArgumentError("gat_layer: no attention heads");
  std::vector<std::size_t> targets;
  targets.reserve(nb.cols.size());
  for (NodeId i = 0; i < nb.num_nodes; ++i) {
    if (nb.offsets[i] == nb.offsets[i + 1]) {
      throw ContractError("gat_layer: node " + std::to_string(i) +
                          " has an empty attention neighbourhood (no self-loop)");
    }
    for (std::size_t e = nb.offsets[i]; e < nb.offsets[i + 1]; ++e) targets.push_back(i);
  }
  const std::vector<std::size_t> sources(nb.cols.begin(), nb.cols.end());
  const std::size_t arcs = sources.size();

  std::vector<Tensor> head_out;
  for (const GatHead& head : params.heads) {
    const Tensor proj = diff::matmul(h, head.attn_proj);
    const Tensor s = diff::matmul(proj, head.attn_src);
    const Tensor t = diff::matmul(proj, head.attn_dst);
    Tensor logits = diff::add(diff::embedding_lookup(s, targets), diff::embedding_lookup(t, sources));
    logits = diff::reshape(diff::leaky_relu(logits, options.negative_slope), {arcs});
    Tensor alpha = diff::segment_softmax(logits, nb.offsets);
    if (attention) attention->push_back(alpha);
    if (options.attention_dropout > 0.0) {
      if (!options.rng) throw ArgumentError("gat_layer: dropout needs a random stream");
      alpha = diff::dropout(alpha, options.attention_dropout, *options.rng);
    }
    head_out.push_back(
        diff::segment_weighted_sum(nb.offsets, nb.cols, alpha, diff::matmul(h, head.weight)));
  }
  Tensor out;
  if (head_out.size() == 1) {
    out = head_out.front();
  } else if (options.concat_heads) {
    out = diff::concat(head_out, 1);
  } else {
    out = head_out.front();
    for (std::size_t i = 1; i < head_out.size(); ++i) out = diff::add(out, head_out[i]);
    out = diff::scale(out, 1.0 / static_cast<double>(head_out.size()));
  }
  if (params.bias.defined()) out = diff::add(out, params.bias);
  return activate(out, options.activation);
}

diff::ParameterList GnnParams::parameters(const std::string& prefix) const {
  diff::ParameterList out;
  if (kind == LayerKind::gcn) {
    for (std::size_t l = 0; l < gcn.size(); ++l) {
      const std::string base = prefix + ".layer" + std::to_string(l);
      out.push_back({base + ".weight", gcn[l].weight});
      out.push_back({base + ".bias", gcn[l].bias});
    }
  } else {
    for (std::size_t l = 0; l < gat.size(); ++l) {
      const std::string base = prefix + ".layer" + std::to_string(l);
      for (std::size_t k = 0; k < gat[l].heads.size(); ++k) {
        const std::string hb = base + ".head" + std::to_string(k);
        const GatHead& hd = gat[l].heads[k];
        out.push_back({hb + ".weight", hd.weight});
        out.push_back({hb + ".attn_proj", hd.attn_proj});
        out.push_back({hb + ".attn_src", hd.attn_src});
        out.push_back({hb + ".attn_dst", hd.attn_dst});
      }
      out.push_back({base + ".bias", gat[l].bias});
    }
  }
  return out;
}

GnnParams GnnParams::clone() const {
  GnnParams c = *this;
  for (auto& l : c.gcn) {
    l.weight = l.weight.clone();
    l.bias = l.bias.clone();
  }
  for (auto& l : c.gat) {
    for (auto& hd : l.heads) {
      hd.weight = hd.weight.clone();
      hd.attn_proj = hd.attn_proj.clone();
      hd.attn_src = hd.attn_src.clone();
      hd.attn_dst = hd.attn_dst.clone();
    }
    l.bias = l.bias.clone();
  }
  return c;
}

GnnParams init_gnn_params(const GnnConfig& cfg, std::size_t in_dim, std::size_t out_dim, Rng& rng) {
  cfg.validate();
  GnnParams p;
  p.kind = cfg.layer_kind;
  std::size_t d_in = in_dim;
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const bool last = l + 1 == cfg.num_layers;
    const std::size_t d_out = last ? out_dim : cfg.hidden_dim;
    if (cfg.layer_kind == LayerKind::gcn) {
      p.gcn.push_back({glorot(d_in, d_out, rng), Tensor::zeros({d_out}, true)});
    } else {
      const std::size_t per_head = last ? d_out : d_out / cfg.heads;
      GatLayerParams layer;
      for (std::size_t k = 0; k < cfg.heads; ++k) {
        GatHead hd;
        hd.weight = glorot(d_in, per_head, rng);
        hd.attn_proj = glorot(d_in, per_head, rng);
        hd.attn_src = glorot(per_head, 1, rng);
        hd.attn_dst = glorot(per_head, 1, rng);
        layer.heads.push_back(std::move(hd));
      }
      layer.bias = Tensor::zeros({d_out}, true);
      p.gat.push_back(std::move(layer));
    }
    d_in = d_out;
  }
  return p;
}

Tensor encode(const GraphOperators& ops, const GnnConfig& cfg, const GnnParams& params,
              const Tensor& x, const EncodeOptions& options) {
  ++g_encode_calls;
  const bool drop = options.training && cfg.dropout_rate > 0.0;
  if (drop && !options.rng) throw ArgumentError("encode: dropout needs a random stream");
  const std::size_t layers = params.num_layers();
  Tensor h = x;
  for (std::size_t l = 0; l < layers; ++l) {
    const bool last = l + 1 == layers;
    const Activation act = last ? Activation::none : cfg.activation;
    if (drop) h = diff::dropout(h, cfg.dropout_rate, *options.rng);
    if (params.kind == LayerKind::gcn) {
      h = gcn_layer(ops.gcn, h, params.gcn[l].weight, params.gcn[l].bias, act);
    } else {
      GatOptions go;
      go.concat_heads = !last;
      go.activation = act;
      go.attention_dropout = drop ? cfg.dropout_rate : 0.0;
      go.rng = options.rng;
      h = gat_layer(ops.gat, h, params.gat[l], go);
    }
  }
  return h;
}

std::size_t encode_call_count() { return g_encode_calls.load(); }

}  // namespace graphtok::gnn

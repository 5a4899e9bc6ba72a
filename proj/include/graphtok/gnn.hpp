#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "graphtok/graph.hpp"
#include "graphtok/params.hpp"
#include "graphtok/random.hpp"
#include "graphtok/tensor.hpp"

namespace graphtok::gnn {

using diff::Tensor;

enum class LayerKind { gcn, gat };
enum class Activation { none, elu, relu };

struct GnnConfig {
  LayerKind layer_kind = LayerKind::gat;
  std::size_t num_layers = 2;
  std::size_t hidden_dim = 64;
  std::size_t heads = 4;  // GAT only
  Activation activation = Activation::elu;
  double dropout_rate = 0.0;

  void validate() const;
};

// Incoming attention neighbourhood of each node in CSR form.
struct AttentionNeighborhood {
  std::size_t num_nodes = 0;
  std::vector<std::size_t> offsets{0};
  std::vector<NodeId> cols;
};

AttentionNeighborhood attention_neighborhood(const Graph& g, bool include_self_loops = true);

// Per-graph operators shared by every forward pass over the same graph.
struct GraphOperators {
  NormalizedAdjacency gcn;  // with self-loops
  AttentionNeighborhood gat;

  static GraphOperators from(const Graph& g);
};

Tensor activate(const Tensor& x, Activation act);

// activation(P H W + bias); `bias` may be undefined.
Tensor gcn_layer(const NormalizedAdjacency& p, const Tensor& h, const Tensor& weight,
                 const Tensor& bias = {}, Activation act = Activation::none);

struct GatHead {
  Tensor weight;     // W    [d_in, d_out]
  Tensor attn_proj;  // W1   [d_in, d_out]
  Tensor attn_src;   // first half of W2, applied to W1 h_i  [d_out, 1]
  Tensor attn_dst;   // second half of W2, applied to W1 h_j [d_out, 1]
};

struct GatLayerParams {
  std::vector<GatHead> heads;
  Tensor bias;  // [layer output dim]
};

struct GatOptions {
  bool concat_heads = true;
  Activation activation = Activation::none;
  double negative_slope = 0.2;
  double attention_dropout = 0.0;
  Rng* rng = nullptr;  // required when attention_dropout > 0
};

// h_i' = act(sum_{j in N_i} alpha_ij W h_j + b) with alpha_ij the softmax
// over N_i of LeakyReLU(W2 [W1 h_i || W1 h_j]); heads are concatenated or
// averaged. When `attention` is non-null it receives one [arcs] tensor of
// coefficients per head, aligned with nb.cols.
Tensor gat_layer(const AttentionNeighborhood& nb, const Tensor& h, const GatLayerParams& params,
                 const GatOptions& options = {}, std::vector<Tensor>* attention = nullptr);

struct GcnLayerParams {
  Tensor weight;
  Tensor bias;
};

struct GnnParams {
  LayerKind kind = LayerKind::gat;
  std::vector<GcnLayerParams> gcn;
  std::vector<GatLayerParams> gat;

  std::size_t num_layers() const { return kind == LayerKind::gcn ? gcn.size() : gat.size(); }
  // Tensors named "<prefix>.layer{i}.*".
  diff::ParameterList parameters(const std::string& prefix) const;
  // Deep copy with independent storage.
  GnnParams clone() const;
};

// Glorot-uniform weights, zero biases. Intermediate layers output
// cfg.hidden_dim, the last layer `out_dim`.
GnnParams init_gnn_params(const GnnConfig& cfg, std::size_t in_dim, std::size_t out_dim, Rng& rng);

struct EncodeOptions {
  bool training = false;
  Rng* rng = nullptr;  // dropout stream, required when training with dropout
};

// Applies every layer with the configured activation between layers; the
// last layer is linear.
Tensor encode(const GraphOperators& ops, const GnnConfig& cfg, const GnnParams& params,
              const Tensor& x, const EncodeOptions& options = {});

// Number of encode() calls made by this process.
std::size_t encode_call_count();

}  // namespace graphtok::gnn

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include "graphtok/matrix.hpp"

namespace graphtok {

using NodeId = std::uint32_t;
using Edge = std::pair<NodeId, NodeId>;

enum class Split : std::uint8_t { none = 0, train = 1, valid = 2, test = 3 };

// Immutable node-and-edge container. Adjacency is CSR with sorted,
// duplicate-free neighbour lists; undirected graphs store both directions.
class Graph {
 public:
  Graph() = default;

  // Canonicalizes `edges` (drops self-loops, merges duplicates, symmetrizes
  // unless `directed`) and validates every invariant. `split` holds one
  // entry per node; an empty vector means no node is assigned to a split.
  static Graph build(std::size_t num_nodes, std::span<const Edge> edges, Matrix features,
                     std::vector<int> labels, std::vector<Split> split, bool directed = false);

  std::size_t num_nodes() const { return num_nodes_; }
  // Number of stored (directed) adjacency entries.
  std::size_t num_arcs() const { return neighbors_.size(); }
  // Undirected edge count for symmetric graphs; arc count otherwise.
  std::size_t num_edges() const { return directed_ ? neighbors_.size() : neighbors_.size() / 2; }
  bool directed() const { return directed_; }

  std::span<const NodeId> neighbors(NodeId v) const {
    return {neighbors_.data() + offsets_[v], offsets_[v + 1] - offsets_[v]};
  }
  std::size_t degree(NodeId v) const { return offsets_[v + 1] - offsets_[v]; }
  const std::vector<std::size_t>& offsets() const { return offsets_; }
  const std::vector<NodeId>& adjacency() const { return neighbors_; }

  // Canonical edge list: u < v pairs for undirected graphs, all arcs otherwise.
  std::vector<Edge> edge_list() const;

  const Matrix& features() const { return features_; }
  std::size_t feature_dim() const { return features_.cols; }
  const std::vector<int>& labels() const { return labels_; }
  int num_classes() const;
  const std::vector<Split>& split() const { return split_; }
  std::vector<NodeId> nodes_in(Split s) const;

  Graph with_labels(std::vector<int> labels) const;
  Graph with_features(Matrix features) const;

  bool operator==(const Graph&) const = default;

 private:
  void validate() const;

  std::size_t num_nodes_ = 0;
  bool directed_ = false;
  std::vector<std::size_t> offsets_{0};
  std::vector<NodeId> neighbors_;
  Matrix features_;
  std::vector<int> labels_;
  std::vector<Split> split_;
};

// D^{-1/2} A D^{-1/2} in CSR form. Rows of zero-degree nodes are empty.
struct NormalizedAdjacency {
  std::size_t num_nodes = 0;
  std::vector<std::size_t> offsets{0};
  std::vector<NodeId> cols;
  std::vector<double> values;

  std::size_t nnz() const { return cols.size(); }
  // Stored value at (u, v) or 0 when absent.
  double at(NodeId u, NodeId v) const;
};

NormalizedAdjacency normalized_adjacency(const Graph& g, bool add_self_loops);

struct LoadOptions {
  bool directed = false;
  std::uint64_t split_seed = 0;
};

// Reads a whitespace-separated "u v" edge list (with '#' comments) plus
// row-per-node feature and label files. The node count is the number of
// feature rows. Masks are assigned by stratified_split.
Graph load_edge_list(const std::filesystem::path& edge_path,
                     const std::filesystem::path& feature_path,
                     const std::filesystem::path& label_path, const LoadOptions& options = {});

void write_edge_list(const Graph& g, const std::filesystem::path& path);
void write_features(const Graph& g, const std::filesystem::path& path);
void write_labels(const Graph& g, const std::filesystem::path& path);

// 60/20/20 train/valid/test split drawn independently within each class.
// Unlabeled nodes (label -1) stay unassigned.
std::vector<Split> stratified_split(const std::vector<int>& labels, std::uint64_t seed,
                                    double train_frac = 0.6, double valid_frac = 0.2);

Graph make_sbm(std::size_t n, std::size_t blocks, double p_in, double p_out, std::size_t d_x,
               double feature_shift, std::uint64_t seed);

}  // namespace graphtok

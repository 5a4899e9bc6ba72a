#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "graphtok/graph.hpp"
#include "graphtok/matrix.hpp"

namespace graphtok {

// Centred projection onto the top-d principal directions. Each direction is
// signed so that its largest-magnitude entry is positive.
Matrix pca_project(const Matrix& x, std::size_t d);

struct SemanticEdge {
  NodeId from;
  NodeId to;
  double score;
};

struct SemanticEdgeSet {
  std::size_t num_nodes = 0;
  std::size_t k = 0;
  // Grouped by `from`, each group in descending score (ties: smaller `to`).
  std::vector<SemanticEdge> edges;
};

// Top-k cosine neighbours of every row (self excluded). Zero rows have
// similarity 0 with everything. k >= N is clamped to N - 1.
SemanticEdgeSet semantic_edges(const Matrix& f, std::size_t k);

// Structure plus the symmetrized, binarized semantic edges.
Graph union_graph(const Graph& g, const SemanticEdgeSet& sem);

struct PprOptions {
  double alpha = 0.85;
  double tol = 1e-6;
  std::size_t max_iters = 1000;
};

struct PprScores {
  std::vector<double> r;
  std::size_t iterations = 0;
  bool converged = false;
};

// Power iteration of r <- alpha P r + (1 - alpha) e_v, stopping once an
// update moves r by less than tol in L1.
PprScores ppr(const NormalizedAdjacency& p, NodeId v, const PprOptions& opts = {});

inline constexpr NodeId kPadId = 0xFFFFFFFFu;

// Per node: [v, u_1, ..., u_k] padded with kPadId, and gates aligned to the
// positions (zero on padding).
struct SequenceSet {
  std::size_t num_nodes = 0;
  std::size_t num_codebooks = 0;  // informational; recorded in the file header
  std::size_t k = 0;
  std::vector<NodeId> ids;   // [N * (k+1)]
  std::vector<float> gates;  // [N * (k+1)]

  std::size_t width() const { return k + 1; }
  std::span<const NodeId> ids_of(std::size_t v) const { return {ids.data() + v * width(), width()}; }
  std::span<const float> gates_of(std::size_t v) const { return {gates.data() + v * width(), width()}; }
  // Number of non-padding positions for node v.
  std::size_t length(std::size_t v) const;
  bool operator==(const SequenceSet&) const = default;
};

struct SerializeStats {
  std::size_t structural_edges = 0;
  std::size_t semantic_edges = 0;
  std::size_t union_edges = 0;
  double mean_iterations = 0;
  std::size_t not_converged = 0;
};

struct SerializeResult {
  SequenceSet sequences;
  std::vector<double> raw_scores;  // PPR score per position, aligned with ids
  SerializeStats stats;
};

SerializeResult build_sequences(const Graph& g, const SemanticEdgeSet& sem, std::size_t k,
                                const PprOptions& opts = {});

void save_sequences(const std::filesystem::path& path, const SequenceSet& s);
SequenceSet load_sequences(const std::filesystem::path& path);

}  // namespace graphtok

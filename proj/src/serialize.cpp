#include "graphtok/serialize.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

#include "graphtok/binary_io.hpp"
#include "graphtok/errors.hpp"

namespace graphtok {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// (score desc, id asc)
bool ranks_before(double sa, NodeId a, double sb, NodeId b) {
  if (sa != sb) return sa > sb;
  return a < b;
}

}  // namespace

Matrix pca_project(const Matrix& x, std::size_t d) {
  if (d == 0 || d > std::min(x.rows, x.cols)) {
    throw ArgumentError("pca_project: d=" + std::to_string(d) + " must be in [1, min(N, d_x)]");
  }
  RowMat xc = Eigen::Map<const RowMat>(x.data.data(), x.rows, x.cols);
  xc.rowwise() -= xc.colwise().mean();
  Eigen::BDCSVD<Eigen::MatrixXd> svd(xc, Eigen::ComputeThinV);
  Eigen::MatrixXd v = svd.matrixV().leftCols(d);
  for (Eigen::Index j = 0; j < v.cols(); ++j) {
    Eigen::Index arg = 0;
    v.col(j).cwiseAbs().maxCoeff(&arg);
    if (v(arg, j) < 0) v.col(j) *= -1.0;
  }
  const RowMat proj = xc * v;
  Matrix out(x.rows, d);
  Eigen::Map<RowMat>(out.data.data(), x.rows, d) = proj;
  return out;
}

SemanticEdgeSet semantic_edges(const Matrix& f, std::size_t k) {
  const std::size_t n = f.rows;
  if (n < 2) throw ArgumentError("semantic_edges: need at least 2 rows");
  if (k >= n) {
    std::clog << "warning: semantic k=" << k << " clamped to " << n - 1 << "\n";
    k = n - 1;
  }
  SemanticEdgeSet out;
  out.num_nodes = n;
  out.k = k;
  if (k == 0) return out;

  std::vector<double> norms(n);
  for (std::size_t v = 0; v < n; ++v) {
    double s = 0.0;
    for (double x : f.row(v)) s += x * x;
    norms[v] = std::sqrt(s);
  }
  auto cosine = [&](std::size_t a, std::size_t b) {
    if (norms[a] == 0.0 || norms[b] == 0.0) return 0.0;
    double s = 0.0;
    for (std::size_t j = 0; j < f.cols; ++j) s += f(a, j) * f(b, j);
    return std::clamp(s / (norms[a] * norms[b]), -1.0, 1.0);
  };

  out.edges.reserve(n * k);
  std::vector<std::pair<double, NodeId>> cand(n - 1);
  for (std::size_t v = 0; v < n; ++v) {
    std::size_t c = 0;
    for (std::size_t u = 0; u < n; ++u) {
      if (u != v) cand[c++] = {cosine(v, u), static_cast<NodeId>(u)};
    }
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end(),
                      [](const auto& a, const auto& b) { return ranks_before(a.first, a.second, b.first, b.second); });
    for (std::size_t i = 0; i < k; ++i) {
      out.edges.push_back({static_cast<NodeId>(v), cand[i].second, cand[i].first});
    }
  }
  return out;
}

Graph union_graph(const Graph& g, const SemanticEdgeSet& sem) {
  if (sem.num_nodes != 0 && sem.num_nodes != g.num_nodes()) {
    throw ShapeError("union_graph: semantic edges for " + std::to_string(sem.num_nodes) +
                     " nodes, graph has " + std::to_string(g.num_nodes()));
  }
  std::vector<Edge> edges = g.edge_list();
  for (const SemanticEdge& e : sem.edges) edges.emplace_back(e.from, e.to);
  return Graph::build(g.num_nodes(), edges, g.features(), g.labels(), g.split(), false);
}

PprScores ppr(const NormalizedAdjacency& p, NodeId v, const PprOptions& opts) {
  if (v >= p.num_nodes) throw IndexError("ppr: node " + std::to_string(v) + " out of range");
  if (!(opts.alpha > 0.0 && opts.alpha < 1.0)) throw ArgumentError("ppr: alpha must be in (0,1)");
  const std::size_t n = p.num_nodes;
  PprScores out;
  out.r.assign(n, 0.0);
  out.r[v] = 1.0;
  std::vector<double> next(n);
  for (out.iterations = 0; out.iterations < opts.max_iters;) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t e = p.offsets[i]; e < p.offsets[i + 1]; ++e) s += p.values[e] * out.r[p.cols[e]];
      next[i] = opts.alpha * s;
    }
    next[v] += 1.0 - opts.alpha;
    ++out.iterations;
    double delta = 0.0;
    for (std::size_t i = 0; i < n; ++i) delta += std::abs(next[i] - out.r[i]);
    // Keep the pre-update vector: its residual is exactly `delta`.
    if (delta < opts.tol) {
      out.converged = true;
      break;
    }
    out.r.swap(next);
  }
  return out;
}

std::size_t SequenceSet::length(std::size_t v) const {
  const auto row = ids_of(v);
  return static_cast<std::size_t>(std::find(row.begin(), row.end(), kPadId) - row.begin());
}

SerializeResult build_sequences(const Graph& g, const SemanticEdgeSet& sem, std::size_t k,
                                const PprOptions& opts) {
  const Graph u = union_graph(g, sem);
  const NormalizedAdjacency p = normalized_adjacency(u, false);
  const std::size_t n = g.num_nodes();
  const std::size_t w = k + 1;

  SerializeResult out;
  SequenceSet& seq = out.sequences;
  seq.num_nodes = n;
  seq.k = k;
  seq.ids.assign(n * w, kPadId);
  seq.gates.assign(n * w, 0.0f);
  out.raw_scores.assign(n * w, 0.0);
  out.stats.structural_edges = g.num_edges();
  out.stats.semantic_edges = sem.edges.size();
  out.stats.union_edges = u.num_edges();

  std::size_t total_iters = 0;
  std::vector<std::pair<double, NodeId>> cand;
  for (NodeId v = 0; v < n; ++v) {
    std::vector<double> scores;
    double self = 1.0;
    if (k > 0) {
      const PprScores r = ppr(p, v, opts);
      total_iters += r.iterations;
      if (!r.converged) ++out.stats.not_converged;
      self = r.r[v];
      cand.clear();
      for (NodeId i = 0; i < n; ++i) {
        if (i != v && r.r[i] > 0.0) cand.emplace_back(r.r[i], i);
      }
      const std::size_t take = std::min(k, cand.size());
      std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(take), cand.end(),
                        [](const auto& a, const auto& b) { return ranks_before(a.first, a.second, b.first, b.second); });
      cand.resize(take);
    }
    seq.ids[v * w] = v;
    out.raw_scores[v * w] = self;
    for (std::size_t i = 0; i < cand.size() && k > 0; ++i) {
      seq.ids[v * w + 1 + i] = cand[i].second;
      out.raw_scores[v * w + 1 + i] = cand[i].first;
    }
    // Softmax (temperature 1) over the occupied positions.
    const std::size_t len = 1 + (k > 0 ? cand.size() : 0);
    double mx = out.raw_scores[v * w];
    for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, out.raw_scores[v * w + i]);
    double z = 0.0;
    std::vector<double> e(len);
    for (std::size_t i = 0; i < len; ++i) z += e[i] = std::exp(out.raw_scores[v * w + i] - mx);
    for (std::size_t i = 0; i < len; ++i) seq.gates[v * w + i] = static_cast<float>(e[i] / z);
  }
  out.stats.mean_iterations = k > 0 && n > 0 ? static_cast<double>(total_iters) / static_cast<double>(n) : 0.0;
  return out;
}

void save_sequences(const std::filesystem::path& path, const SequenceSet& s) {
  if (s.ids.size() != s.num_nodes * s.width() || s.gates.size() != s.ids.size()) {
    throw ShapeError("save_sequences: storage does not match (N, k)");
  }
  io::BinaryWriter w(path, io::kSequenceMagic);
  w.u64(s.num_nodes);
  w.u64(s.num_codebooks);
  w.u64(s.k);
  for (std::size_t v = 0; v < s.num_nodes; ++v) {
    w.u32s(s.ids_of(v));
    w.f32s(s.gates_of(v));
  }
  w.close();
}

SequenceSet load_sequences(const std::filesystem::path& path) {
  io::BinaryReader r(path, io::kSequenceMagic);
  SequenceSet s;
  s.num_nodes = r.u64();
  s.num_codebooks = r.u64();
  s.k = r.u64();
  if (s.k > (1u << 20) || s.num_nodes * s.width() > (1ULL << 34)) {
    throw FormatError(path.string() + ": implausible sequence shape");
  }
  s.ids.resize(s.num_nodes * s.width());
  s.gates.resize(s.ids.size());
  for (std::size_t v = 0; v < s.num_nodes; ++v) {
    r.u32s(std::span<std::uint32_t>(s.ids.data() + v * s.width(), s.width()));
    r.f32s(std::span<float>(s.gates.data() + v * s.width(), s.width()));
  }
  r.expect_end();
  for (std::size_t v = 0; v < s.num_nodes; ++v) {
    const auto row = s.ids_of(v);
    if (row[0] != v) throw FormatError(path.string() + ": sequence " + std::to_string(v) + " does not start with its node");
    for (NodeId id : row) {
      if (id != kPadId && id >= s.num_nodes) throw FormatError(path.string() + ": node id out of range");
    }
  }
  return s;
}

}  // namespace graphtok

#include "graphtok/graph.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>

#include "graphtok/errors.hpp"
#include "graphtok/random.hpp"

namespace graphtok {

Graph Graph::build(std::size_t num_nodes, std::span<const Edge> edges, Matrix features,
                   std::vector<int> labels, std::vector<Split> split, bool directed) {
  Graph g;
  g.num_nodes_ = num_nodes;
  g.directed_ = directed;

  std::vector<Edge> arcs;
  arcs.reserve(directed ? edges.size() : 2 * edges.size());
  for (const auto& [u, v] : edges) {
    if (u >= num_nodes || v >= num_nodes) {
      throw IndexError("edge (" + std::to_string(u) + ", " + std::to_string(v) +
                       ") references a node >= " + std::to_string(num_nodes));
    }
    if (u == v) continue;
    arcs.emplace_back(u, v);
    if (!directed) arcs.emplace_back(v, u);
  }
  std::sort(arcs.begin(), arcs.end());
  arcs.erase(std::unique(arcs.begin(), arcs.end()), arcs.end());

  g.offsets_.assign(num_nodes + 1, 0);
  for (const auto& a : arcs) ++g.offsets_[a.first + 1];
  for (std::size_t i = 0; i < num_nodes; ++i) g.offsets_[i + 1] += g.offsets_[i];
  g.neighbors_.reserve(arcs.size());
  for (const auto& a : arcs) g.neighbors_.push_back(a.second);

  if (features.rows == 0 && features.cols == 0) features = Matrix(num_nodes, 0);
  g.features_ = std::move(features);
  g.labels_ = labels.empty() ? std::vector<int>(num_nodes, -1) : std::move(labels);
  g.split_ = split.empty() ? std::vector<Split>(num_nodes, Split::none) : std::move(split);
  g.validate();
  return g;
}

void Graph::validate() const {
  if (features_.rows != num_nodes_) {
    throw ShapeError("feature matrix has " + std::to_string(features_.rows) + " rows for " +
                     std::to_string(num_nodes_) + " nodes");
  }
  if (labels_.size() != num_nodes_) {
    throw ShapeError("label vector has " + std::to_string(labels_.size()) + " entries for " +
                     std::to_string(num_nodes_) + " nodes");
  }
  if (split_.size() != num_nodes_) {
    throw ShapeError("split vector has " + std::to_string(split_.size()) + " entries for " +
                     std::to_string(num_nodes_) + " nodes");
  }
  for (int y : labels_) {
    if (y < -1) throw ArgumentError("labels must be >= -1");
  }
}

std::vector<Edge> Graph::edge_list() const {
  std::vector<Edge> out;
  for (NodeId u = 0; u < num_nodes_; ++u) {
    for (NodeId v : neighbors(u)) {
      if (directed_ || u < v) out.emplace_back(u, v);
    }
  }
  return out;
}

int Graph::num_classes() const {
  int m = -1;
  for (int y : labels_) m = std::max(m, y);
  return m + 1;
}

std::vector<NodeId> Graph::nodes_in(Split s) const {
  std::vector<NodeId> out;
  for (NodeId v = 0; v < num_nodes_; ++v) {
    if (split_[v] == s) out.push_back(v);
  }
  return out;
}

Graph Graph::with_labels(std::vector<int> labels) const {
  Graph g = *this;
  g.labels_ = std::move(labels);
  g.validate();
  return g;
}

Graph Graph::with_features(Matrix features) const {
  Graph g = *this;
  g.features_ = std::move(features);
  g.validate();
  return g;
}

double NormalizedAdjacency::at(NodeId u, NodeId v) const {
  const auto first = cols.begin() + static_cast<std::ptrdiff_t>(offsets[u]);
  const auto last = cols.begin() + static_cast<std::ptrdiff_t>(offsets[u + 1]);
  const auto it = std::lower_bound(first, last, v);
  if (it == last || *it != v) return 0.0;
  return values[static_cast<std::size_t>(it - cols.begin())];
}

NormalizedAdjacency normalized_adjacency(const Graph& g, bool add_self_loops) {
  const std::size_t n = g.num_nodes();
  const double loop = add_self_loops ? 1.0 : 0.0;
  std::vector<double> inv_sqrt_deg(n, 0.0);
  for (NodeId v = 0; v < n; ++v) {
    const double d = static_cast<double>(g.degree(v)) + loop;
    inv_sqrt_deg[v] = d > 0.0 ? 1.0 / std::sqrt(d) : 0.0;
  }

  NormalizedAdjacency p;
  p.num_nodes = n;
  p.offsets.assign(n + 1, 0);
  p.cols.reserve(g.num_arcs() + (add_self_loops ? n : 0));
  p.values.reserve(p.cols.capacity());
  for (NodeId u = 0; u < n; ++u) {
    bool self_done = !add_self_loops;
    for (NodeId v : g.neighbors(u)) {
      if (!self_done && u < v) {
        p.cols.push_back(u);
        p.values.push_back(inv_sqrt_deg[u] * inv_sqrt_deg[u]);
        self_done = true;
      }
      p.cols.push_back(v);
      p.values.push_back(inv_sqrt_deg[u] * inv_sqrt_deg[v]);
    }
    if (!self_done) {
      p.cols.push_back(u);
      p.values.push_back(inv_sqrt_deg[u] * inv_sqrt_deg[u]);
    }
    p.offsets[u + 1] = p.cols.size();
  }
  return p;
}

namespace {

std::string strip_comment(const std::string& line) {
  const auto hash = line.find('#');
  return hash == std::string::npos ? line : line.substr(0, hash);
}

bool blank(const std::string& s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
}

std::vector<std::string> split_fields(const std::string& line) {
  std::string s = line;
  std::replace(s.begin(), s.end(), ',', ' ');
  std::istringstream is(s);
  std::vector<std::string> out;
  for (std::string tok; is >> tok;) out.push_back(tok);
  return out;
}

bool parse_index(const std::string& tok, unsigned long long& out) {
  if (tok.empty() || !std::all_of(tok.begin(), tok.end(), ::isdigit)) return false;
  try {
    out = std::stoull(tok);
  } catch (const std::exception&) {
    return false;
  }
  return true;
}

Matrix read_feature_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  const std::string name = path.string();
  std::vector<double> data;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    const std::string body = strip_comment(line);
    if (blank(body)) continue;
    const auto fields = split_fields(body);
    if (rows == 0) {
      cols = fields.size();
    } else if (fields.size() != cols) {
      throw ParseError(name, lineno,
                       "expected " + std::to_string(cols) + " values, found " +
                           std::to_string(fields.size()));
    }
    for (const auto& f : fields) {
      std::size_t used = 0;
      double x = 0.0;
      try {
        x = std::stod(f, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != f.size()) throw ParseError(name, lineno, "not a number: '" + f + "'");
      data.push_back(x);
    }
    ++rows;
  }
  return Matrix(rows, cols, std::move(data));
}

std::vector<int> read_label_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<int> labels;
  std::size_t lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    const std::string body = strip_comment(line);
    if (blank(body)) continue;
    const auto fields = split_fields(body);
    std::size_t used = 0;
    int y = 0;
    try {
      y = std::stoi(fields.at(0), &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (fields.size() != 1 || used != fields[0].size() || y < -1) {
      throw ParseError(path.string(), lineno, "expected one integer label >= -1");
    }
    labels.push_back(y);
  }
  return labels;
}

}  // namespace

Graph load_edge_list(const std::filesystem::path& edge_path,
                     const std::filesystem::path& feature_path,
                     const std::filesystem::path& label_path, const LoadOptions& options) {
  Matrix features = read_feature_file(feature_path);
  std::vector<int> labels = read_label_file(label_path);
  const std::size_t n = features.rows;
  if (labels.size() != n) {
    throw ShapeError(label_path.string() + " has " + std::to_string(labels.size()) +
                     " labels but " + feature_path.string() + " has " + std::to_string(n) +
                     " rows");
  }

  std::ifstream in(edge_path);
  if (!in) throw FormatError("cannot open " + edge_path.string());
  std::vector<Edge> edges;
  std::size_t lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    const std::string body = strip_comment(line);
    if (blank(body)) continue;
    std::istringstream is(body);
    std::vector<std::string> fields;
    for (std::string tok; is >> tok;) fields.push_back(tok);
    unsigned long long u = 0;
    unsigned long long v = 0;
    if (fields.size() != 2 || !parse_index(fields[0], u) || !parse_index(fields[1], v)) {
      throw ParseError(edge_path.string(), lineno, "expected two non-negative integers");
    }
    if (u >= n || v >= n) {
      throw IndexError(edge_path.string() + ":" + std::to_string(lineno) + ": node id " +
                       std::to_string(std::max(u, v)) + " >= node count " + std::to_string(n));
    }
    edges.emplace_back(static_cast<NodeId>(u), static_cast<NodeId>(v));
  }

  auto split = stratified_split(labels, options.split_seed);
  return Graph::build(n, edges, std::move(features), std::move(labels), std::move(split),
                      options.directed);
}

void write_edge_list(const Graph& g, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out << "# " << g.num_nodes() << " nodes, " << g.num_edges() << " edges\n";
  for (const auto& [u, v] : g.edge_list()) out << u << ' ' << v << '\n';
  if (!out) throw FormatError("write failed for " + path.string());
}

void write_features(const Graph& g, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  const Matrix& x = g.features();
  for (std::size_t i = 0; i < x.rows; ++i) {
    for (std::size_t j = 0; j < x.cols; ++j) out << (j ? " " : "") << x(i, j);
    out << '\n';
  }
  if (!out) throw FormatError("write failed for " + path.string());
}

void write_labels(const Graph& g, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  for (int y : g.labels()) out << y << '\n';
  if (!out) throw FormatError("write failed for " + path.string());
}

std::vector<Split> stratified_split(const std::vector<int>& labels, std::uint64_t seed,
                                    double train_frac, double valid_frac) {
  Rng rng(sub_seed(seed, "split"));
  int num_classes = 0;
  for (int y : labels) num_classes = std::max(num_classes, y + 1);
  std::vector<std::vector<NodeId>> members(static_cast<std::size_t>(num_classes));
  for (NodeId v = 0; v < labels.size(); ++v) {
    if (labels[v] >= 0) members[static_cast<std::size_t>(labels[v])].push_back(v);
  }
  std::vector<Split> split(labels.size(), Split::none);
  for (auto& group : members) {
    shuffle_in_place(group, rng);
    const auto m = static_cast<double>(group.size());
    const auto n_train = static_cast<std::size_t>(std::llround(train_frac * m));
    const auto n_valid = static_cast<std::size_t>(std::llround(valid_frac * m));
    for (std::size_t i = 0; i < group.size(); ++i) {
      split[group[i]] = i < n_train                ? Split::train
                        : i < n_train + n_valid    ? Split::valid
                                                   : Split::test;
    }
  }
  return split;
}

Graph make_sbm(std::size_t n, std::size_t blocks, double p_in, double p_out, std::size_t d_x,
               double feature_shift, std::uint64_t seed) {
  if (blocks == 0 || blocks > n) {
    throw ArgumentError("make_sbm: blocks must be in [1, n], got " + std::to_string(blocks));
  }
  if (n % blocks != 0) throw ArgumentError("make_sbm: blocks must divide n");
  if (!(0.0 <= p_out && p_out <= p_in && p_in <= 1.0)) {
    throw ArgumentError("make_sbm: require 0 <= p_out <= p_in <= 1");
  }
  const std::size_t block_size = n / blocks;
  auto block_of = [&](std::size_t v) { return v / block_size; };

  Rng edge_rng(sub_seed(seed, "sbm.edges"));
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<Edge> edges;
  for (std::size_t u = 0; u < n; ++u) {
    for (std::size_t v = u + 1; v < n; ++v) {
      const double p = block_of(u) == block_of(v) ? p_in : p_out;
      // Always draw so the stream does not depend on the probabilities.
      if (unif(edge_rng) < p) edges.emplace_back(static_cast<NodeId>(u), static_cast<NodeId>(v));
    }
  }

  Rng feat_rng(sub_seed(seed, "sbm.features"));
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix x(n, d_x);
  for (std::size_t v = 0; v < n; ++v) {
    for (std::size_t j = 0; j < d_x; ++j) x(v, j) = normal(feat_rng);
    if (d_x > 0) x(v, block_of(v) % d_x) += feature_shift;
  }

  std::vector<int> labels(n);
  for (std::size_t v = 0; v < n; ++v) labels[v] = static_cast<int>(block_of(v));
  auto split = stratified_split(labels, sub_seed(seed, "sbm.split"));
  return Graph::build(n, edges, std::move(x), std::move(labels), std::move(split));
}

}  // namespace graphtok

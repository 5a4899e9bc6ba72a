#include "graphtok/rvq.hpp"

#include <cmath>
#include <limits>
#include <memory>

#include "graphtok/binary_io.hpp"
#include "graphtok/errors.hpp"

namespace graphtok {
namespace {

double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

std::size_t nearest_code(std::span<const double> x, const CodebookSet& cb, std::size_t level) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < cb.codebook_size; ++k) {
    const double d = sq_dist(x, cb.code(level, k));
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

// D^2 sampling; falls back to a uniform pick when every point already
// coincides with a chosen centre.
std::size_t sample_weighted(const std::vector<double>& w, Rng& rng) {
  double total = 0.0;
  for (double x : w) total += x;
  if (total <= 0.0) {
    std::uniform_int_distribution<std::size_t> pick(0, w.size() - 1);
    return pick(rng);
  }
  std::uniform_real_distribution<double> u(0.0, total);
  const double target = u(rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    acc += w[i];
    if (target < acc && w[i] > 0.0) return i;
  }
  for (std::size_t i = w.size(); i-- > 0;) {
    if (w[i] > 0.0) return i;
  }
  return 0;
}

}  // namespace

CodebookSet CodebookSet::zeros(std::size_t c, std::size_t k, std::size_t d, double decay) {
  CodebookSet cb;
  cb.num_codebooks = c;
  cb.codebook_size = k;
  cb.code_dim = d;
  cb.decay = decay;
  cb.codes.assign(c * k * d, 0.0);
  cb.ema_mass.assign(c * k, 0.0);
  cb.ema_sum.assign(c * k * d, 0.0);
  return cb;
}

std::span<const double> CodebookSet::code(std::size_t level, std::size_t k) const {
  return {codes.data() + (level * codebook_size + k) * code_dim, code_dim};
}

std::span<double> CodebookSet::code(std::size_t level, std::size_t k) {
  return {codes.data() + (level * codebook_size + k) * code_dim, code_dim};
}

Matrix CodebookSet::level_matrix(std::size_t level) const {
  const auto first = codes.begin() + static_cast<std::ptrdiff_t>(level * codebook_size * code_dim);
  return Matrix(codebook_size, code_dim,
                std::vector<double>(first, first + static_cast<std::ptrdiff_t>(codebook_size * code_dim)));
}

void CodebookSet::validate() const {
  if (num_codebooks == 0 || codebook_size == 0 || code_dim == 0) {
    throw ArgumentError("codebooks: c, K and d must be positive");
  }
  if (!(decay >= 0.0 && decay <= 1.0)) throw ArgumentError("codebooks: decay must be in [0,1]");
  if (codes.size() != num_codebooks * codebook_size * code_dim ||
      ema_mass.size() != num_codebooks * codebook_size || ema_sum.size() != codes.size()) {
    throw ShapeError("codebooks: storage does not match (c, K, d)");
  }
  for (double x : codes) {
    if (!std::isfinite(x)) throw ContractError("codebooks: non-finite code value");
  }
  for (double m : ema_mass) {
    if (m < 0.0) throw ContractError("codebooks: negative EMA mass");
  }
}

void TokenTable::validate(std::size_t codebook_size) const {
  if (tokens.size() != num_nodes * num_codebooks) throw ShapeError("tokens: size mismatch");
  for (std::uint32_t t : tokens) {
    if (t >= codebook_size) {
      throw IndexError("tokens: index " + std::to_string(t) + " >= codebook size " +
                       std::to_string(codebook_size));
    }
  }
}

std::size_t nearest_row(std::span<const double> x, const Matrix& centroids) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < centroids.rows; ++k) {
    const double d = sq_dist(x, centroids.row(k));
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

Matrix kmeans_init(const Matrix& h, std::size_t k, std::size_t iters, std::uint64_t seed) {
  if (k == 0) throw ArgumentError("kmeans: K must be positive");
  if (h.rows == 0) throw ArgumentError("kmeans: no input rows");
  Rng rng(seed);
  const std::size_t n = h.rows;
  const std::size_t d = h.cols;
  Matrix cent(k, d);

  std::uniform_int_distribution<std::size_t> first(0, n - 1);
  std::size_t pick = first(rng);
  std::copy(h.row(pick).begin(), h.row(pick).end(), cent.row(0).begin());
  std::vector<double> dist(n);
  for (std::size_t i = 0; i < n; ++i) dist[i] = sq_dist(h.row(i), cent.row(0));
  for (std::size_t c = 1; c < k; ++c) {
    pick = sample_weighted(dist, rng);
    std::copy(h.row(pick).begin(), h.row(pick).end(), cent.row(c).begin());
    for (std::size_t i = 0; i < n; ++i) dist[i] = std::min(dist[i], sq_dist(h.row(i), cent.row(c)));
  }

  std::vector<std::size_t> assign(n, k);
  for (std::size_t it = 0; it < iters; ++it) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t a = nearest_row(h.row(i), cent);
      if (a != assign[i]) {
        assign[i] = a;
        changed = true;
      }
    }
    if (!changed) break;
    Matrix sum(k, d);
    std::vector<std::size_t> count(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++count[assign[i]];
      for (std::size_t j = 0; j < d; ++j) sum(assign[i], j) += h(i, j);
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (count[c] == 0) continue;
      for (std::size_t j = 0; j < d; ++j) cent(c, j) = sum(c, j) / static_cast<double>(count[c]);
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (count[c] != 0) continue;
      // Empty cluster: move it onto the point worst served by its centroid.
      std::size_t far = 0;
      double far_d = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double di = sq_dist(h.row(i), cent.row(assign[i]));
        if (di > far_d) {
          far_d = di;
          far = i;
        }
      }
      if (far_d <= 0.0) continue;
      --count[assign[far]];
      assign[far] = c;
      count[c] = 1;
      std::copy(h.row(far).begin(), h.row(far).end(), cent.row(c).begin());
    }
  }
  return cent;
}

CodebookSet init_codebooks(const Matrix& h, std::size_t c, std::size_t k, double decay,
                           std::size_t kmeans_iters, std::uint64_t seed) {
  if (c == 0) throw ArgumentError("codebooks: c must be positive");
  CodebookSet cb = CodebookSet::zeros(c, k, h.cols, decay);
  Matrix residual = h;
  for (std::size_t level = 0; level < c; ++level) {
    const Matrix cent =
        kmeans_init(residual, k, kmeans_iters, sub_seed(seed, "kmeans.level" + std::to_string(level)));
    std::copy(cent.data.begin(), cent.data.end(),
              cb.codes.begin() + static_cast<std::ptrdiff_t>(level * k * h.cols));
    for (std::size_t i = 0; i < residual.rows; ++i) {
      const std::size_t a = nearest_row(residual.row(i), cent);
      cb.ema_mass[level * k + a] += 1.0;
      for (std::size_t j = 0; j < h.cols; ++j) {
        cb.ema_sum[(level * k + a) * h.cols + j] += residual(i, j);
        residual(i, j) -= cent(a, j);
      }
    }
  }
  cb.validate();
  return cb;
}

Assignment rvq_assign(std::span<const double> h, const CodebookSet& cb) {
  if (h.size() != cb.code_dim) {
    throw ShapeError("rvq_assign: vector of length " + std::to_string(h.size()) + " for code dim " +
                     std::to_string(cb.code_dim));
  }
  Assignment a;
  a.residual.assign(h.begin(), h.end());
  a.z.assign(h.size(), 0.0);
  for (std::size_t level = 0; level < cb.num_codebooks; ++level) {
    const std::size_t k = nearest_code(a.residual, cb, level);
    a.tokens.push_back(static_cast<std::uint32_t>(k));
    const auto code = cb.code(level, k);
    for (std::size_t j = 0; j < h.size(); ++j) {
      a.residual[j] -= code[j];
      a.z[j] += code[j];
    }
  }
  return a;
}

Quantized quantize(const Matrix& h, const CodebookSet& cb) {
  Quantized q;
  q.tokens.num_nodes = h.rows;
  q.tokens.num_codebooks = cb.num_codebooks;
  q.tokens.tokens.reserve(h.rows * cb.num_codebooks);
  q.z = Matrix(h.rows, h.cols);
  for (std::size_t v = 0; v < h.rows; ++v) {
    Assignment a = rvq_assign(h.row(v), cb);
    q.tokens.tokens.insert(q.tokens.tokens.end(), a.tokens.begin(), a.tokens.end());
    std::copy(a.z.begin(), a.z.end(), q.z.row(v).begin());
  }
  return q;
}

RvqOutput rvq_batch(const diff::Tensor& h, const CodebookSet& cb, CommitVariant variant) {
  if (h.rank() != 2 || h.dim(1) != cb.code_dim) {
    throw ShapeError("rvq_batch: input " + diff::to_string(h.shape()) + " for code dim " +
                     std::to_string(cb.code_dim));
  }
  const Matrix hm = h.to_matrix();
  Quantized q = quantize(hm, cb);
  const std::size_t n = hm.rows;
  const std::size_t d = hm.cols;

  // Per-node gradient of the commitment term with respect to h, and its value.
  auto commit_grad = std::make_shared<Matrix>(n, d);
  double commit = 0.0;
  for (std::size_t v = 0; v < n; ++v) {
    auto g = commit_grad->row(v);
    if (variant == CommitVariant::full) {
      const double norm = std::sqrt(sq_dist(hm.row(v), q.z.row(v)));
      commit += norm;
      if (norm > 0.0) {
        for (std::size_t j = 0; j < d; ++j) g[j] = (hm(v, j) - q.z(v, j)) / norm;
      }
    } else {
      std::vector<double> r(hm.row(v).begin(), hm.row(v).end());
      for (std::size_t level = 0; level < cb.num_codebooks; ++level) {
        const auto code = cb.code(level, q.tokens.at(v, level));
        for (std::size_t j = 0; j < d; ++j) {
          r[j] -= code[j];
          commit += r[j] * r[j];
          g[j] += 2.0 * r[j];
        }
      }
    }
  }
  const double inv_n = n == 0 ? 0.0 : 1.0 / static_cast<double>(n);
  commit *= inv_n;

  diff::Tape* tape = h.requires_grad() ? diff::active_tape() : nullptr;
  RvqOutput out;
  out.z = diff::Tensor({n, d}, q.z.data, tape != nullptr);
  out.commit = diff::Tensor({}, std::vector<double>{commit}, tape != nullptr);
  out.tokens = std::move(q.tokens);
  if (tape) {
    tape->record([h, z = out.z] {
      const auto g = z.grad();
      if (g.empty()) return;
      auto gh = h.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gh[i] += g[i];
    });
    tape->record([h, c = out.commit, commit_grad, inv_n] {
      const auto g = c.grad();
      if (g.empty()) return;
      auto gh = h.grad_buffer();
      for (std::size_t i = 0; i < gh.size(); ++i) gh[i] += g[0] * inv_n * commit_grad->data[i];
    });
  }
  return out;
}

std::vector<Matrix> level_inputs(const Matrix& h, const TokenTable& t, const CodebookSet& cb) {
  if (h.cols != cb.code_dim || t.num_nodes != h.rows || t.num_codebooks != cb.num_codebooks) {
    throw ShapeError("rvq: inputs, tokens and codebooks disagree in shape");
  }
  t.validate(cb.codebook_size);
  std::vector<Matrix> out;
  Matrix r = h;
  for (std::size_t level = 0; level < cb.num_codebooks; ++level) {
    out.push_back(r);
    for (std::size_t v = 0; v < h.rows; ++v) {
      const auto code = cb.code(level, t.at(v, level));
      for (std::size_t j = 0; j < h.cols; ++j) r(v, j) -= code[j];
    }
  }
  return out;
}

void ema_update(CodebookSet& cb, const Matrix& h, const TokenTable& t) {
  const std::vector<Matrix> inputs = level_inputs(h, t, cb);
  const std::size_t k_size = cb.codebook_size;
  const std::size_t d = cb.code_dim;
  const double tau = cb.decay;
  for (std::size_t level = 0; level < cb.num_codebooks; ++level) {
    std::vector<double> count(k_size, 0.0);
    Matrix sum(k_size, d);
    for (std::size_t v = 0; v < h.rows; ++v) {
      const std::size_t k = t.at(v, level);
      count[k] += 1.0;
      for (std::size_t j = 0; j < d; ++j) sum(k, j) += inputs[level](v, j);
    }
    for (std::size_t k = 0; k < k_size; ++k) {
      const std::size_t slot = level * k_size + k;
      cb.ema_mass[slot] = tau * cb.ema_mass[slot] + (1.0 - tau) * count[k];
      for (std::size_t j = 0; j < d; ++j) {
        double& s = cb.ema_sum[slot * d + j];
        s = tau * s + (1.0 - tau) * sum(k, j);
      }
      if (count[k] == 0.0) continue;
      auto code = cb.code(level, k);
      for (std::size_t j = 0; j < d; ++j) {
        code[j] = tau * code[j] + (1.0 - tau) * (sum(k, j) / count[k]);
      }
    }
  }
}

std::size_t reseed_dead_codes(CodebookSet& cb, const Matrix& h, const TokenTable& t, Rng& rng,
                              double threshold) {
  if (h.rows == 0) return 0;
  const std::vector<Matrix> inputs = level_inputs(h, t, cb);
  std::uniform_int_distribution<std::size_t> pick(0, h.rows - 1);
  std::size_t reseeded = 0;
  for (std::size_t level = 0; level < cb.num_codebooks; ++level) {
    for (std::size_t k = 0; k < cb.codebook_size; ++k) {
      const std::size_t slot = level * cb.codebook_size + k;
      if (cb.ema_mass[slot] >= threshold) continue;
      const auto src = inputs[level].row(pick(rng));
      std::copy(src.begin(), src.end(), cb.code(level, k).begin());
      std::copy(src.begin(), src.end(),
                cb.ema_sum.begin() + static_cast<std::ptrdiff_t>(slot * cb.code_dim));
      cb.ema_mass[slot] = 1.0;
      ++reseeded;
    }
  }
  return reseeded;
}

std::vector<double> codebook_aggregate(std::span<const std::uint32_t> tokens, const CodebookSet& cb) {
  if (tokens.size() != cb.num_codebooks) {
    throw ShapeError("codebook_aggregate: " + std::to_string(tokens.size()) + " tokens for " +
                     std::to_string(cb.num_codebooks) + " codebooks");
  }
  std::vector<double> out(cb.code_dim, 0.0);
  for (std::size_t level = 0; level < tokens.size(); ++level) {
    if (tokens[level] >= cb.codebook_size) {
      throw IndexError("codebook_aggregate: token " + std::to_string(tokens[level]) +
                       " >= codebook size " + std::to_string(cb.codebook_size));
    }
    const auto code = cb.code(level, tokens[level]);
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += code[j];
  }
  return out;
}

Matrix codebook_aggregate(const TokenTable& t, const CodebookSet& cb) {
  Matrix out(t.num_nodes, cb.code_dim);
  for (std::size_t v = 0; v < t.num_nodes; ++v) {
    const std::vector<double> a = codebook_aggregate(t.row(v), cb);
    std::copy(a.begin(), a.end(), out.row(v).begin());
  }
  return out;
}

MemoryReport memory_report(double num_nodes, double feature_dim, double num_codebooks,
                           double codebook_size, double code_dim, double bytes_per_float,
                           double bytes_per_index) {
  for (double x : {num_nodes, feature_dim, num_codebooks, codebook_size, code_dim, bytes_per_float,
                   bytes_per_index}) {
    if (!(x > 0.0)) throw ArgumentError("memory_report: every argument must be positive");
  }
  MemoryReport r;
  r.raw_bytes = num_nodes * feature_dim * bytes_per_float;
  r.index_bytes = num_nodes * num_codebooks * bytes_per_index;
  r.codebook_bytes = num_codebooks * codebook_size * code_dim * bytes_per_float;
  r.ratio_with_codebooks = r.raw_bytes / (r.index_bytes + r.codebook_bytes);
  r.ratio_indices_only = r.raw_bytes / r.index_bytes;
  return r;
}

void save_codebooks(const std::filesystem::path& path, const CodebookSet& cb) {
  cb.validate();
  io::BinaryWriter w(path, io::kCodebookMagic);
  w.u64(cb.num_codebooks);
  w.u64(cb.codebook_size);
  w.u64(cb.code_dim);
  w.f64(cb.decay);
  w.f64s(cb.codes);
  w.f64s(cb.ema_mass);
  w.f64s(cb.ema_sum);
  w.close();
}

CodebookSet load_codebooks(const std::filesystem::path& path) {
  io::BinaryReader r(path, io::kCodebookMagic);
  const std::uint64_t c = r.u64();
  const std::uint64_t k = r.u64();
  const std::uint64_t d = r.u64();
  if (c == 0 || k == 0 || d == 0 || c * k * d > (1ULL << 32)) {
    throw FormatError(path.string() + ": implausible codebook shape");
  }
  CodebookSet cb = CodebookSet::zeros(c, k, d, r.f64());
  r.f64s(cb.codes);
  r.f64s(cb.ema_mass);
  r.f64s(cb.ema_sum);
  r.expect_end();
  cb.validate();
  return cb;
}

void save_tokens(const std::filesystem::path& path, const TokenTable& t) {
  if (t.tokens.size() != t.num_nodes * t.num_codebooks) throw ShapeError("tokens: size mismatch");
  io::BinaryWriter w(path, io::kTokenMagic);
  w.u64(t.num_nodes);
  w.u64(t.num_codebooks);
  w.u32s(t.tokens);
  w.close();
}

TokenTable load_tokens(const std::filesystem::path& path) {
  io::BinaryReader r(path, io::kTokenMagic);
  TokenTable t;
  t.num_nodes = r.u64();
  t.num_codebooks = r.u64();
  if (t.num_codebooks == 0 || t.num_nodes * t.num_codebooks > (1ULL << 34)) {
    throw FormatError(path.string() + ": implausible token table shape");
  }
  t.tokens.resize(t.num_nodes * t.num_codebooks);
  r.u32s(t.tokens);
  r.expect_end();
  return t;
}

}  // namespace graphtok

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "graphtok/matrix.hpp"
#include "graphtok/random.hpp"
#include "graphtok/tensor.hpp"

namespace graphtok {

// c levels of K codes each, plus the running EMA statistics per code.
struct CodebookSet {
  std::size_t num_codebooks = 0;
  std::size_t codebook_size = 0;
  std::size_t code_dim = 0;
  double decay = 0.9;
  std::vector<double> codes;     // [c * K * d]
  std::vector<double> ema_mass;  // [c * K]
  std::vector<double> ema_sum;   // [c * K * d]

  static CodebookSet zeros(std::size_t c, std::size_t k, std::size_t d, double decay);

  std::span<const double> code(std::size_t level, std::size_t k) const;
  std::span<double> code(std::size_t level, std::size_t k);
  // Level `level` as a K x d matrix copy.
  Matrix level_matrix(std::size_t level) const;

  void validate() const;
  bool operator==(const CodebookSet&) const = default;
};

struct TokenTable {
  std::size_t num_nodes = 0;
  std::size_t num_codebooks = 0;
  std::vector<std::uint32_t> tokens;  // row-major [N * c]

  std::span<const std::uint32_t> row(std::size_t v) const {
    return {tokens.data() + v * num_codebooks, num_codebooks};
  }
  std::uint32_t at(std::size_t v, std::size_t level) const { return tokens[v * num_codebooks + level]; }
  // Throws IndexError on any entry >= codebook_size.
  void validate(std::size_t codebook_size) const;
  bool operator==(const TokenTable&) const = default;
};

enum class CommitVariant {
  full,       // mean over nodes of ||h - sg z||
  per_level,  // mean over nodes of sum over levels of ||h - sg(partial sum)||^2
};

// Lloyd's algorithm with k-means++ seeding. Returns K x d centroids.
Matrix kmeans_init(const Matrix& h, std::size_t k, std::size_t iters, std::uint64_t seed);

// Index of the nearest row of `centroids` (squared distance, smallest index on ties).
std::size_t nearest_row(std::span<const double> x, const Matrix& centroids);

// Level j is initialised by k-means on the residuals left by levels < j.
CodebookSet init_codebooks(const Matrix& h, std::size_t c, std::size_t k, double decay,
                           std::size_t kmeans_iters, std::uint64_t seed);

struct Assignment {
  std::vector<std::uint32_t> tokens;
  std::vector<double> z;
  std::vector<double> residual;
};

Assignment rvq_assign(std::span<const double> h, const CodebookSet& cb);

struct Quantized {
  TokenTable tokens;
  Matrix z;
};

Quantized quantize(const Matrix& h, const CodebookSet& cb);

struct RvqOutput {
  TokenTable tokens;
  diff::Tensor z;       // forward value is the code sum, backward is the identity into h
  diff::Tensor commit;  // scalar; gradient flows only into h
};

RvqOutput rvq_batch(const diff::Tensor& h, const CodebookSet& cb,
                    CommitVariant variant = CommitVariant::full);

// Level-j inputs (residuals after levels < j) under the current codes.
std::vector<Matrix> level_inputs(const Matrix& h, const TokenTable& t, const CodebookSet& cb);

// c_k <- decay c_k + (1 - decay) mean(V_k) for every code with a non-empty
// assignment set V_k; residuals are taken under the pre-update codes.
void ema_update(CodebookSet& cb, const Matrix& h, const TokenTable& t);

// Codes whose EMA mass fell below `threshold` are moved to random level
// inputs. Returns the number of codes re-seeded.
std::size_t reseed_dead_codes(CodebookSet& cb, const Matrix& h, const TokenTable& t, Rng& rng,
                              double threshold = 1e-3);

std::vector<double> codebook_aggregate(std::span<const std::uint32_t> tokens, const CodebookSet& cb);
// N x d matrix of per-node aggregates.
Matrix codebook_aggregate(const TokenTable& t, const CodebookSet& cb);

struct MemoryReport {
  double raw_bytes = 0;
  double index_bytes = 0;
  double codebook_bytes = 0;
  double ratio_with_codebooks = 0;
  double ratio_indices_only = 0;
};

MemoryReport memory_report(double num_nodes, double feature_dim, double num_codebooks,
                           double codebook_size, double code_dim, double bytes_per_float = 4,
                           double bytes_per_index = 4);

void save_codebooks(const std::filesystem::path& path, const CodebookSet& cb);
CodebookSet load_codebooks(const std::filesystem::path& path);
void save_tokens(const std::filesystem::path& path, const TokenTable& t);
TokenTable load_tokens(const std::filesystem::path& path);

}  // namespace graphtok

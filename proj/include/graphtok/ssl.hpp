#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "graphtok/gnn.hpp"
#include "graphtok/params.hpp"
#include "graphtok/rvq.hpp"
#include "graphtok/tensor.hpp"

namespace graphtok::ssl {

using diff::Tensor;

enum class LossTarget { quantized, pre_quantized };

struct SslConfig {
  double beta = 0.25;
  double gamma = 2.0;
  double lambda = 1.0;
  double mask_rate = 0.5;
  double teacher_decay = 0.99;
  std::uint64_t seed = 0;
  LossTarget losses_on = LossTarget::quantized;
  CommitVariant commit_variant = CommitVariant::full;
  bool use_dgi = true;
  bool use_gmae2 = true;
  bool use_rvq = true;

  void validate() const;
};

// Rows of x under a uniform random permutation.
Tensor corrupt_features(const Tensor& x, std::uint64_t seed);

// Binary cross-entropy of the bilinear discriminator sigmoid(h^T W s), with
// s the row mean of h, averaged over the 2N positive and negative pairs.
Tensor dgi_loss(const Tensor& h, const Tensor& h_tilde, const Tensor& w_disc);

struct MaskedFeatures {
  Tensor features;
  std::vector<std::size_t> nodes;  // sorted
};

// Replaces ceil(rate * N) uniformly chosen rows with the (learned) token row.
MaskedFeatures mask_nodes(const Tensor& x, const Tensor& mask_token, double rate, std::uint64_t seed);

// mean_{v in mask} (1 - cos(x_v, rec_v))^gamma
//   + lambda * mean_{v} (1 - cos(teacher_v, student_v))^gamma
Tensor gmae2_loss(const Tensor& x, const Tensor& reconstruction, const Tensor& student_latent,
                  const Tensor& teacher_latent, std::span<const std::size_t> mask, double gamma,
                  double lambda);

// mean_v ||h_v - z_v||; z is treated as a constant.
Tensor commitment_loss(const Tensor& h, const Tensor& z);

// theta_t <- decay theta_t + (1 - decay) theta_s, matched by position.
void update_teacher(const diff::ParameterList& teacher, const diff::ParameterList& student, double decay);

struct LossParts {
  Tensor dgi;
  Tensor gmae2;
  Tensor commit;
};

// L = dgi + gmae2 + beta * commit; undefined parts count as zero.
Tensor total_loss(const LossParts& parts, double beta);

// Encoder, its EMA teacher, the DGI discriminator, the masked-feature
// decoder and the mask token.
struct TokenizerModel {
  gnn::GnnConfig encoder_config;
  gnn::GnnParams encoder;
  gnn::GnnParams teacher;
  Tensor discriminator;  // [d, d]
  gnn::GnnParams decoder;  // one GCN layer d -> d_x
  Tensor mask_token;     // [1, d_x]

  static TokenizerModel init(const gnn::GnnConfig& cfg, std::size_t in_dim, Rng& rng);

  std::size_t latent_dim() const { return encoder_config.hidden_dim; }
  // Everything the optimizer updates.
  diff::ParameterList trainable() const;
  // trainable() plus "teacher.*".
  diff::ParameterList checkpoint() const;
};

struct ForwardResult {
  Tensor total;
  LossParts parts;
  Matrix latent;        // encoder output on the clean graph
  TokenTable tokens;    // empty without codebooks
};

// One multi-task forward pass. `codebooks` may be null (no quantization).
ForwardResult tokenizer_forward(const TokenizerModel& model, const gnn::GraphOperators& ops,
                                const Tensor& x, const CodebookSet* codebooks, const SslConfig& cfg,
                                std::uint64_t step_seed);

// Eval-mode encoder output.
Matrix embed(const TokenizerModel& model, const gnn::GraphOperators& ops, const Tensor& x);

}  // namespace graphtok::ssl

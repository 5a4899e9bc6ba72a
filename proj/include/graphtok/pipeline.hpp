#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "graphtok/gformer.hpp"
#include "graphtok/gnn.hpp"
#include "graphtok/graph.hpp"
#include "graphtok/rvq.hpp"
#include "graphtok/serialize.hpp"
#include "graphtok/ssl.hpp"

namespace graphtok::pipeline {

enum class DataSource { sbm, files };
enum class ModelKind { transformer, linear };
// What the Transformer consumes when RVQ is switched off.
enum class NoRvqMode { continuous, kmeans_post };

struct DataConfig {
  DataSource source = DataSource::sbm;
  std::filesystem::path edges, features, labels;
  bool directed = false;
  std::size_t nodes = 400;
  std::size_t blocks = 4;
  double p_in = 0.2;
  double p_out = 0.01;
  std::size_t feature_dim = 16;
  double feature_shift = 2.0;
  bool permute_labels = false;  // negative control
};

struct RvqConfig {
  std::size_t num_codebooks = 3;
  std::size_t codebook_size = 16;
  double decay = 0.9;
  std::size_t kmeans_iters = 50;
  double dead_threshold = 1e-3;
};

struct SerializeConfig {
  std::size_t k_sem = 5;
  std::size_t k = 6;
  std::size_t pca_dim = 0;  // 0: min(64, d_x)
  PprOptions ppr;
};

struct TrainConfig {
  double tokenizer_lr = 1e-3;
  std::size_t tokenizer_epochs = 200;
  double transformer_lr = 2e-3;
  std::size_t transformer_epochs = 200;
  std::size_t batch_size = 128;
  std::size_t patience = 50;
};

struct AblationFlags {
  bool use_tokenizer = true;
  bool use_rvq = true;
  bool use_dgi = true;
  bool use_gmae2 = true;
  bool use_codebook_aggregate = true;
  bool use_positional_encoding = true;
  bool use_gating = true;
  bool use_semantic_edges = true;
  ModelKind model = ModelKind::transformer;
  NoRvqMode no_rvq_mode = NoRvqMode::continuous;
};

struct RunConfig {
  std::uint64_t seed = 0;
  DataConfig data;
  gnn::GnnConfig gnn;
  ssl::SslConfig ssl;
  RvqConfig rvq;
  SerializeConfig serialize;
  gformer::TransformerConfig transformer;  // only the width/depth fields are read
  TrainConfig train;
  AblationFlags ablation;

  RunConfig();
  // Throws ArgumentError; also checks that referenced input files exist.
  void validate() const;
};

// "key = value" lines, '#' starts a comment. Unknown keys and malformed
// values raise ParseError with the line number.
RunConfig parse_config(std::string_view text, const std::string& source = "<config>");
RunConfig load_config(const std::filesystem::path& path);
// Single assignment, as used by parse_config and by command-line overrides.
void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value);
// Every key with its current value, one "key = value" per line.
std::string describe(const RunConfig& cfg);
std::vector<std::string> config_keys();

inline constexpr int kAblationRows = 10;
// Sets the ablation flags of row 1..10 of the component study; other
// settings are untouched.
void apply_ablation_row(RunConfig& cfg, int row);

Graph load_graph(const RunConfig& cfg);

struct Metrics {
  double accuracy = 0.0;
  std::optional<double> roc_auc;  // binary tasks only
  std::size_t count = 0;
};

double accuracy(std::span<const int> predicted, std::span<const int> truth);
// Mann-Whitney statistic of the positive-class scores, ties counted half.
double roc_auc(std::span<const double> scores, std::span<const int> labels);
// Row-wise argmax accuracy, plus ROC-AUC on softmax(logits)[:, 1] when there
// are two columns.
Metrics metrics_from_logits(const Matrix& logits, std::span<const int> labels);

// --- tokenizer stage -------------------------------------------------------

struct TokenizerArtifacts {
  ssl::TokenizerModel model;
  CodebookSet codebooks;  // c = 1 K-means codebook when RVQ is off
  TokenTable tokens;
  Matrix embeddings;      // eval-mode encoder output at the end of training
  std::vector<double> loss_curve;
  std::vector<double> dgi_curve, gmae2_curve, commit_curve;
};

TokenizerArtifacts train_tokenizer(const RunConfig& cfg, const Graph& g);

// Eval-mode forward and nearest-code assignment; nothing is updated.
TokenTable tokenize(const Graph& g, const ssl::TokenizerModel& model, const CodebookSet& cb);

// Rebuilds the tokenizer for graph `g` and loads a checkpoint into it.
ssl::TokenizerModel load_tokenizer(const RunConfig& cfg, const Graph& g,
                                   const std::filesystem::path& checkpoint);

// --- serialization stage -----------------------------------------------------

SerializeResult serialize_graph(const RunConfig& cfg, const Graph& g);

// --- downstream stage --------------------------------------------------------

// Everything inference reads. No node features unless the tokenizer is
// ablated away, in which case the raw features are the continuous input.
struct ModelInputs {
  SequenceSet sequences;
  TokenTable tokens;
  CodebookSet codebooks;
  Matrix continuous;
  gformer::TokenSource source = gformer::TokenSource::discrete;

  gformer::Inputs view() const;
};

ModelInputs model_inputs(const RunConfig& cfg, const Graph& g, const TokenizerArtifacts* tok,
                         SequenceSet sequences);

gformer::TransformerConfig transformer_config(const RunConfig& cfg, const ModelInputs& in,
                                              std::size_t num_classes);

struct TrainedModel {
  ModelKind kind = ModelKind::transformer;
  gformer::TransformerConfig config;
  gformer::ModelParams params;  // transformer
  diff::Tensor probe_w, probe_b;  // linear probe

  diff::ParameterList parameters() const;
};

struct TrainReport {
  std::vector<double> loss_curve;
  std::vector<double> valid_curve;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
  double best_valid = 0.0;
};

// Minibatches of train nodes grouped by sequence length, cross-entropy,
// early stopping on valid accuracy; returns the best-valid weights.
TrainedModel train_transformer(const RunConfig& cfg, const ModelInputs& in, const Graph& g,
                               TrainReport* report = nullptr);

// Untrained model with the shapes that train_transformer would produce.
TrainedModel init_trained_model(const RunConfig& cfg, const ModelInputs& in, std::size_t num_classes);

// Reads only the model, the inputs and the labels.
Metrics evaluate(const TrainedModel& model, const ModelInputs& in, std::span<const int> labels,
                 std::span<const NodeId> nodes);

// Per-node representation the linear probe consumes: codebook sums z when
// RVQ is on, the continuous input otherwise.
Matrix probe_features(const ModelInputs& in);

// --- orchestration -----------------------------------------------------------

namespace artifact {
inline constexpr const char* tokenizer = "tokenizer.ckpt";
inline constexpr const char* codebooks = "codebooks.bin";
inline constexpr const char* tokens = "tokens.bin";
inline constexpr const char* embeddings = "embeddings.ckpt";
inline constexpr const char* sequences = "sequences.bin";
inline constexpr const char* model = "model.ckpt";
inline constexpr const char* metrics = "metrics.txt";
}  // namespace artifact

struct RunResult {
  Metrics train, valid, test;
  TrainReport report;
  std::vector<double> tokenizer_loss;
  SerializeStats serialize_stats;
};

// Each stage reads its inputs from and writes its outputs to `out_dir`.
TokenizerArtifacts stage_train_tokenizer(const RunConfig& cfg, const std::filesystem::path& out_dir);
TokenTable stage_tokenize(const RunConfig& cfg, const std::filesystem::path& out_dir);
SerializeResult stage_serialize(const RunConfig& cfg, const std::filesystem::path& out_dir);
RunResult stage_train_transformer(const RunConfig& cfg, const std::filesystem::path& out_dir);
Metrics stage_evaluate(const RunConfig& cfg, const std::filesystem::path& out_dir, Split split);

// Whole pipeline in memory; artifacts are written when out_dir is non-empty.
RunResult run_all(const RunConfig& cfg, const std::filesystem::path& out_dir = {});

// "key=value" records for a finished run.
std::vector<std::pair<std::string, std::string>> metric_records(const RunResult& r);
void write_metrics(const std::filesystem::path& path, const RunResult& r);

}  // namespace graphtok::pipeline

#include "graphtok/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "graphtok/errors.hpp"
#include "graphtok/ops.hpp"
#include "graphtok/params.hpp"

namespace graphtok::pipeline {

using diff::Tensor;

namespace {

ssl::SslConfig ssl_config(const RunConfig& cfg) {
  ssl::SslConfig s = cfg.ssl;
  s.seed = sub_seed(cfg.seed, "tokenizer.ssl");
  s.use_dgi = cfg.ablation.use_dgi;
  s.use_gmae2 = cfg.ablation.use_gmae2;
  s.use_rvq = cfg.ablation.use_rvq;
  return s;
}

void check_finite(const Tensor& t, const std::string& what) {
  if (t.defined() && !std::isfinite(t.item())) throw DivergenceError(what + " is not finite");
}

std::vector<double> softmax_row(std::span<const double> row) {
  const double m = *std::max_element(row.begin(), row.end());
  std::vector<double> out(row.size());
  double z = 0;
  for (std::size_t j = 0; j < row.size(); ++j) z += out[j] = std::exp(row[j] - m);
  for (double& v : out) v /= z;
  return out;
}

// Target nodes split into batches of at most `batch` that share a sequence
// length; batch order is shuffled.
std::vector<std::vector<NodeId>> length_batches(std::vector<NodeId> nodes, const SequenceSet* seq,
                                                std::size_t batch, Rng* rng) {
  if (rng) shuffle_in_place(nodes, *rng);
  if (seq) {
    std::stable_sort(nodes.begin(), nodes.end(),
                     [seq](NodeId a, NodeId b) { return seq->length(a) < seq->length(b); });
  }
  std::vector<std::vector<NodeId>> out;
  for (std::size_t i = 0; i < nodes.size();) {
    const std::size_t len = seq ? seq->length(nodes[i]) : 0;
    std::vector<NodeId> b;
    while (i < nodes.size() && b.size() < batch && (!seq || seq->length(nodes[i]) == len)) b.push_back(nodes[i++]);
    out.push_back(std::move(b));
  }
  if (rng) shuffle_in_place(out, *rng);
  return out;
}

std::vector<int> labels_of(std::span<const int> labels, std::span<const NodeId> nodes) {
  std::vector<int> out;
  out.reserve(nodes.size());
  for (NodeId v : nodes) out.push_back(labels[v]);
  return out;
}

Tensor rows_of(const Matrix& m, std::span<const NodeId> nodes) {
  std::vector<double> vals;
  vals.reserve(nodes.size() * m.cols);
  for (NodeId v : nodes) {
    auto r = m.row(v);
    vals.insert(vals.end(), r.begin(), r.end());
  }
  return Tensor({nodes.size(), m.cols}, std::move(vals));
}

Tensor model_logits(const TrainedModel& model, const ModelInputs& in, const Matrix* probe_x,
                    std::span<const NodeId> nodes, const gformer::ForwardOptions& opts) {
  if (model.kind == ModelKind::linear) {
    return diff::add(diff::matmul(rows_of(*probe_x, nodes), model.probe_w), model.probe_b);
  }
  return gformer::forward(model.params, model.config, in.view(), nodes, opts);
}

std::vector<Tensor> snapshot(const diff::ParameterList& params) {
  std::vector<Tensor> out;
  for (const auto& p : params) out.push_back(p.tensor.detach());
  return out;
}

void restore(const diff::ParameterList& params, const std::vector<Tensor>& snap) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto dst = params[i].tensor.data();
    auto src = snap[i].values();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

Matrix read_matrix_checkpoint(const std::filesystem::path& path, const std::string& name) {
  for (const auto& p : diff::load_checkpoint(path))
    if (p.name == name) return p.tensor.to_matrix();
  throw FormatError(path.string() + ": no tensor named " + name);
}

}  // namespace

// --- metrics -----------------------------------------------------------------

double accuracy(std::span<const int> predicted, std::span<const int> truth) {
  if (predicted.size() != truth.size()) throw ShapeError("accuracy: length mismatch");
  if (predicted.empty()) throw ArgumentError("accuracy: no samples");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) hit += predicted[i] == truth[i];
  return static_cast<double>(hit) / static_cast<double>(predicted.size());
}

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ShapeError("roc_auc: length mismatch");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Midranks, 1-based.
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) rank[order[t]] = mid;
    i = j + 1;
  }
  double pos = 0, rank_sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] == 1) {
      pos += 1;
      rank_sum += rank[i];
    }
  }
  const double neg = static_cast<double>(n) - pos;
  if (pos == 0 || neg == 0) throw ArgumentError("roc_auc: needs both classes");
  return (rank_sum - pos * (pos + 1) / 2) / (pos * neg);
}

Metrics metrics_from_logits(const Matrix& logits, std::span<const int> labels) {
  if (logits.rows != labels.size()) throw ShapeError("metrics: logits rows != labels");
  Metrics m;
  m.count = labels.size();
  std::vector<int> pred(logits.rows);
  std::vector<double> score(logits.rows);
  for (std::size_t i = 0; i < logits.rows; ++i) {
    auto r = logits.row(i);
    pred[i] = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
    if (logits.cols == 2) score[i] = softmax_row(r)[1];
  }
  m.accuracy = accuracy(pred, labels);
  if (logits.cols == 2) {
    const bool both = std::find(labels.begin(), labels.end(), 0) != labels.end() &&
                      std::find(labels.begin(), labels.end(), 1) != labels.end();
    if (both) m.roc_auc = roc_auc(score, labels);
  }
  return m;
}

// --- data --------------------------------------------------------------------

Graph load_graph(const RunConfig& cfg) {
  Graph g;
  if (cfg.data.source == DataSource::sbm) {
    g = make_sbm(cfg.data.nodes, cfg.data.blocks, cfg.data.p_in, cfg.data.p_out, cfg.data.feature_dim,
                 cfg.data.feature_shift, sub_seed(cfg.seed, "data.sbm"));
  } else {
    LoadOptions opts;
    opts.directed = cfg.data.directed;
    opts.split_seed = sub_seed(cfg.seed, "data.split");
    g = load_edge_list(cfg.data.edges, cfg.data.features, cfg.data.labels, opts);
  }
  if (cfg.data.permute_labels) {
    Rng rng(sub_seed(cfg.seed, "data.permute_labels"));
    std::vector<int> labels = g.labels();
    shuffle_in_place(labels, rng);
    g = g.with_labels(std::move(labels));
  }
  return g;
}

// --- tokenizer ---------------------------------------------------------------

TokenizerArtifacts train_tokenizer(const RunConfig& cfg, const Graph& g) {
  cfg.validate();
  const auto ops = gnn::GraphOperators::from(g);
  const Tensor x = Tensor::from_matrix(g.features());
  const ssl::SslConfig scfg = ssl_config(cfg);
  const auto& r = cfg.rvq;

  Rng init_rng(sub_seed(cfg.seed, "tokenizer.init"));
  TokenizerArtifacts art{ssl::TokenizerModel::init(cfg.gnn, g.feature_dim(), init_rng), {}, {}, {}, {}, {}, {}, {}};
  auto& model = art.model;

  std::optional<CodebookSet> cb;
  if (cfg.ablation.use_rvq) {
    cb = init_codebooks(ssl::embed(model, ops, x), r.num_codebooks, r.codebook_size, r.decay, r.kmeans_iters,
                        sub_seed(cfg.seed, "tokenizer.kmeans"));
  }

  const auto trainable = model.trainable();
  const auto student = model.encoder.parameters("encoder");
  const auto teacher = model.teacher.parameters("teacher");
  diff::Adam opt(trainable, {.lr = cfg.train.tokenizer_lr});
  Rng reseed_rng(sub_seed(cfg.seed, "tokenizer.reseed"));

  for (std::size_t epoch = 0; epoch < cfg.train.tokenizer_epochs; ++epoch) {
    opt.zero_grad();
    diff::Tape tape;
    ssl::ForwardResult fr;
    {
      diff::TapeScope scope(&tape);
      fr = ssl::tokenizer_forward(model, ops, x, cb ? &*cb : nullptr, scfg,
                                  sub_seed(cfg.seed, "tokenizer.epoch" + std::to_string(epoch)));
    }
    const std::string at = "tokenizer epoch " + std::to_string(epoch) + ": ";
    check_finite(fr.parts.dgi, at + "dgi loss");
    check_finite(fr.parts.gmae2, at + "gmae2 loss");
    check_finite(fr.parts.commit, at + "commitment loss");
    check_finite(fr.total, at + "total loss");
    auto item = [](const Tensor& t) { return t.defined() ? t.item() : 0.0; };
    art.loss_curve.push_back(item(fr.total));
    art.dgi_curve.push_back(item(fr.parts.dgi));
    art.gmae2_curve.push_back(item(fr.parts.gmae2));
    art.commit_curve.push_back(item(fr.parts.commit));
    if (!fr.total.defined() || !fr.total.requires_grad()) continue;  // every loss disabled

    tape.backward(fr.total);
    opt.step();
    ssl::update_teacher(teacher, student, scfg.teacher_decay);
    if (cb) {
      ema_update(*cb, fr.latent, fr.tokens);
      reseed_dead_codes(*cb, fr.latent, fr.tokens, reseed_rng, r.dead_threshold);
    }
  }

  art.embeddings = ssl::embed(model, ops, x);
  if (!cb) {
    // Post-hoc single-level K-means keeps a token table available downstream.
    cb = init_codebooks(art.embeddings, 1, r.codebook_size, r.decay, r.kmeans_iters,
                        sub_seed(cfg.seed, "tokenizer.kmeans_post"));
  }
  art.codebooks = std::move(*cb);
  art.tokens = quantize(art.embeddings, art.codebooks).tokens;
  return art;
}

TokenTable tokenize(const Graph& g, const ssl::TokenizerModel& model, const CodebookSet& cb) {
  if (model.latent_dim() != cb.code_dim) {
    throw ShapeError("tokenize: encoder width " + std::to_string(model.latent_dim()) +
                     " != code dim " + std::to_string(cb.code_dim));
  }
  const auto ops = gnn::GraphOperators::from(g);
  return quantize(ssl::embed(model, ops, Tensor::from_matrix(g.features())), cb).tokens;
}

ssl::TokenizerModel load_tokenizer(const RunConfig& cfg, const Graph& g, const std::filesystem::path& checkpoint) {
  Rng rng(sub_seed(cfg.seed, "tokenizer.init"));
  auto model = ssl::TokenizerModel::init(cfg.gnn, g.feature_dim(), rng);
  diff::assign(model.checkpoint(), diff::load_checkpoint(checkpoint));
  return model;
}

// --- serialization -----------------------------------------------------------

SerializeResult serialize_graph(const RunConfig& cfg, const Graph& g) {
  SemanticEdgeSet sem{g.num_nodes(), 0, {}};
  if (cfg.ablation.use_semantic_edges && cfg.serialize.k_sem > 0 && g.num_nodes() > 1) {
    const std::size_t limit = std::min(g.num_nodes(), g.feature_dim());
    const std::size_t d = cfg.serialize.pca_dim ? std::min(cfg.serialize.pca_dim, limit) : std::min<std::size_t>(64, limit);
    sem = semantic_edges(pca_project(g.features(), d), cfg.serialize.k_sem);
  }
  SerializeResult out = build_sequences(g, sem, cfg.serialize.k, cfg.serialize.ppr);
  out.sequences.num_codebooks = cfg.ablation.use_rvq ? cfg.rvq.num_codebooks : 1;
  return out;
}

// --- downstream --------------------------------------------------------------

gformer::Inputs ModelInputs::view() const {
  gformer::Inputs in;
  in.sequences = &sequences;
  if (source == gformer::TokenSource::discrete) {
    in.tokens = &tokens;
    in.codebooks = &codebooks;
  } else {
    in.continuous = &continuous;
  }
  return in;
}

ModelInputs model_inputs(const RunConfig& cfg, const Graph& g, const TokenizerArtifacts* tok, SequenceSet sequences) {
  ModelInputs in;
  in.sequences = std::move(sequences);
  if (!cfg.ablation.use_tokenizer) {
    in.source = gformer::TokenSource::continuous;
    in.continuous = g.features();
    return in;
  }
  if (!tok) throw ContractError("model_inputs: tokenizer artifacts required");
  in.tokens = tok->tokens;
  in.codebooks = tok->codebooks;
  if (!cfg.ablation.use_rvq && cfg.ablation.no_rvq_mode == NoRvqMode::continuous) {
    in.source = gformer::TokenSource::continuous;
    in.continuous = tok->embeddings;
  }
  return in;
}

gformer::TransformerConfig transformer_config(const RunConfig& cfg, const ModelInputs& in, std::size_t num_classes) {
  gformer::TransformerConfig t = cfg.transformer;
  const bool discrete = in.source == gformer::TokenSource::discrete;
  t.source = in.source;
  t.k = in.sequences.k;
  t.num_classes = num_classes;
  if (discrete) {
    t.num_codebooks = in.codebooks.num_codebooks;
    t.codebook_size = in.codebooks.codebook_size;
    t.code_dim = in.codebooks.code_dim;
  } else {
    t.num_codebooks = 1;
    t.code_dim = in.continuous.cols;
  }
  t.use_codebook_aggregate = discrete && cfg.ablation.use_codebook_aggregate;
  t.use_positional = cfg.ablation.use_positional_encoding;
  t.use_hierarchical = discrete && cfg.ablation.use_positional_encoding;
  t.use_gating = cfg.ablation.use_gating;
  t.validate();
  return t;
}

diff::ParameterList TrainedModel::parameters() const {
  if (kind == ModelKind::transformer) return params.parameters();
  return {{"probe.weight", probe_w}, {"probe.bias", probe_b}};
}

Matrix probe_features(const ModelInputs& in) {
  if (in.source == gformer::TokenSource::continuous) return in.continuous;
  return codebook_aggregate(in.tokens, in.codebooks);
}

TrainedModel init_trained_model(const RunConfig& cfg, const ModelInputs& in, std::size_t num_classes) {
  TrainedModel m;
  m.kind = cfg.ablation.model;
  Rng rng(sub_seed(cfg.seed, "model.init"));
  if (m.kind == ModelKind::linear) {
    const std::size_t d = in.source == gformer::TokenSource::continuous ? in.continuous.cols : in.codebooks.code_dim;
    const double bound = std::sqrt(6.0 / static_cast<double>(d + num_classes));
    std::uniform_real_distribution<double> u(-bound, bound);
    std::vector<double> w(d * num_classes);
    for (double& v : w) v = u(rng);
    m.probe_w = Tensor({d, num_classes}, std::move(w), true);
    m.probe_b = Tensor::zeros({num_classes}, true);
    return m;
  }
  m.config = transformer_config(cfg, in, num_classes);
  m.params = gformer::init_model(m.config, rng);
  return m;
}

TrainedModel train_transformer(const RunConfig& cfg, const ModelInputs& in, const Graph& g, TrainReport* report) {
  const std::size_t classes = static_cast<std::size_t>(g.num_classes());
  TrainedModel model = init_trained_model(cfg, in, classes);
  const auto params = model.parameters();
  diff::Adam opt(params, {.lr = cfg.train.transformer_lr});

  const bool linear = model.kind == ModelKind::linear;
  const Matrix probe_x = linear ? probe_features(in) : Matrix{};
  const std::vector<NodeId> train = g.nodes_in(Split::train);
  const std::vector<NodeId> valid = g.nodes_in(Split::valid);
  if (train.empty()) throw ArgumentError("train_transformer: empty train split");
  const auto& labels = g.labels();

  Rng dropout_rng(sub_seed(cfg.seed, "model.dropout"));
  TrainReport rep;
  std::vector<Tensor> best = snapshot(params);
  double best_valid = -1;
  std::size_t since_best = 0;

  for (std::size_t epoch = 0; epoch < cfg.train.transformer_epochs; ++epoch) {
    Rng order_rng(sub_seed(cfg.seed, "model.epoch" + std::to_string(epoch)));
    // The linear probe trains full-batch.
    const auto batches = linear ? std::vector<std::vector<NodeId>>{train}
                                : length_batches(train, &in.sequences, cfg.train.batch_size, &order_rng);
    double epoch_loss = 0;
    for (const auto& batch : batches) {
      opt.zero_grad();
      diff::Tape tape;
      Tensor loss;
      {
        diff::TapeScope scope(&tape);
        Tensor logits = model_logits(model, in, &probe_x, batch, {.training = true, .rng = &dropout_rng});
        const auto y = labels_of(labels, batch);
        loss = diff::cross_entropy_with_logits(logits, y);
      }
      check_finite(loss, "model epoch " + std::to_string(epoch) + ": cross-entropy");
      tape.backward(loss);
      opt.step();
      epoch_loss += loss.item() * static_cast<double>(batch.size());
    }
    rep.loss_curve.push_back(epoch_loss / static_cast<double>(train.size()));
    rep.epochs_run = epoch + 1;

    if (valid.empty()) continue;
    const double acc = evaluate(model, in, labels, valid).accuracy;
    rep.valid_curve.push_back(acc);
    if (acc > best_valid) {
      best_valid = acc;
      best = snapshot(params);
      rep.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= cfg.train.patience) {
      break;
    }
  }
  if (!valid.empty() && rep.epochs_run > 0) restore(params, best);
  rep.best_valid = std::max(best_valid, 0.0);
  if (report) *report = std::move(rep);
  return model;
}

Metrics evaluate(const TrainedModel& model, const ModelInputs& in, std::span<const int> labels,
                 std::span<const NodeId> nodes) {
  if (nodes.empty()) throw ArgumentError("evaluate: empty node mask");
  diff::NoGradScope no_grad;
  const bool linear = model.kind == ModelKind::linear;
  const Matrix probe_x = linear ? probe_features(in) : Matrix{};
  const std::size_t classes = linear ? model.probe_w.dim(1) : model.config.num_classes;

  Matrix logits(nodes.size(), classes);
  std::map<NodeId, std::size_t> slot;
  for (std::size_t i = 0; i < nodes.size(); ++i) slot.emplace(nodes[i], i);
  const std::vector<NodeId> all(nodes.begin(), nodes.end());
  const auto batches = linear ? std::vector<std::vector<NodeId>>{all}
                              : length_batches(all, &in.sequences, 256, nullptr);
  for (const auto& batch : batches) {
    const Tensor out = model_logits(model, in, &probe_x, batch, {});
    for (std::size_t b = 0; b < batch.size(); ++b) {
      auto row = logits.row(slot.at(batch[b]));
      for (std::size_t c = 0; c < classes; ++c) row[c] = out.values()[b * classes + c];
    }
  }
  std::vector<int> y;
  y.reserve(nodes.size());
  for (NodeId v : nodes) y.push_back(labels[v]);
  // Duplicated node ids all read the same slot; keep rows aligned with `nodes`.
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const std::size_t s = slot.at(nodes[i]);
    if (s != i) std::copy(logits.row(s).begin(), logits.row(s).end(), logits.row(i).begin());
  }
  return metrics_from_logits(logits, y);
}

// --- stages ------------------------------------------------------------------

namespace {

void write_embeddings(const std::filesystem::path& path, const Matrix& m) {
  diff::save_checkpoint(path, {{"embeddings", Tensor::from_matrix(m)}});
}

// Loads whatever the configured model consumes from a stage directory.
ModelInputs load_inputs(const RunConfig& cfg, const Graph& g, const std::filesystem::path& dir) {
  SequenceSet seq = load_sequences(dir / artifact::sequences);
  if (seq.num_nodes != g.num_nodes()) throw ShapeError("sequences cover " + std::to_string(seq.num_nodes) + " nodes, graph has " + std::to_string(g.num_nodes()));
  if (!cfg.ablation.use_tokenizer) return model_inputs(cfg, g, nullptr, std::move(seq));
  TokenizerArtifacts tok{{}, load_codebooks(dir / artifact::codebooks), load_tokens(dir / artifact::tokens), {}, {}, {}, {}, {}};
  if (!cfg.ablation.use_rvq && cfg.ablation.no_rvq_mode == NoRvqMode::continuous)
    tok.embeddings = read_matrix_checkpoint(dir / artifact::embeddings, "embeddings");
  if (tok.tokens.num_nodes != g.num_nodes()) throw ShapeError("token table does not match the graph");
  tok.tokens.validate(tok.codebooks.codebook_size);
  return model_inputs(cfg, g, &tok, std::move(seq));
}

}  // namespace

TokenizerArtifacts stage_train_tokenizer(const RunConfig& cfg, const std::filesystem::path& out_dir) {
  const Graph g = load_graph(cfg);
  TokenizerArtifacts art = train_tokenizer(cfg, g);
  std::filesystem::create_directories(out_dir);
  diff::save_checkpoint(out_dir / artifact::tokenizer, art.model.checkpoint());
  save_codebooks(out_dir / artifact::codebooks, art.codebooks);
  save_tokens(out_dir / artifact::tokens, art.tokens);
  write_embeddings(out_dir / artifact::embeddings, art.embeddings);
  return art;
}

TokenTable stage_tokenize(const RunConfig& cfg, const std::filesystem::path& out_dir) {
  const Graph g = load_graph(cfg);
  const auto model = load_tokenizer(cfg, g, out_dir / artifact::tokenizer);
  const CodebookSet cb = load_codebooks(out_dir / artifact::codebooks);
  TokenTable t = tokenize(g, model, cb);
  save_tokens(out_dir / artifact::tokens, t);
  return t;
}

SerializeResult stage_serialize(const RunConfig& cfg, const std::filesystem::path& out_dir) {
  const Graph g = load_graph(cfg);
  SerializeResult r = serialize_graph(cfg, g);
  std::filesystem::create_directories(out_dir);
  save_sequences(out_dir / artifact::sequences, r.sequences);
  return r;
}

RunResult stage_train_transformer(const RunConfig& cfg, const std::filesystem::path& out_dir) {
  const Graph g = load_graph(cfg);
  const ModelInputs in = load_inputs(cfg, g, out_dir);
  RunResult r;
  const TrainedModel model = train_transformer(cfg, in, g, &r.report);
  diff::save_checkpoint(out_dir / artifact::model, model.parameters());
  r.train = evaluate(model, in, g.labels(), g.nodes_in(Split::train));
  r.valid = evaluate(model, in, g.labels(), g.nodes_in(Split::valid));
  r.test = evaluate(model, in, g.labels(), g.nodes_in(Split::test));
  write_metrics(out_dir / artifact::metrics, r);
  return r;
}

Metrics stage_evaluate(const RunConfig& cfg, const std::filesystem::path& out_dir, Split split) {
  const Graph g = load_graph(cfg);
  const ModelInputs in = load_inputs(cfg, g, out_dir);
  TrainedModel model = init_trained_model(cfg, in, static_cast<std::size_t>(g.num_classes()));
  diff::assign(model.parameters(), diff::load_checkpoint(out_dir / artifact::model));
  return evaluate(model, in, g.labels(), g.nodes_in(split));
}

RunResult run_all(const RunConfig& cfg, const std::filesystem::path& out_dir) {
  cfg.validate();
  const Graph g = load_graph(cfg);
  const bool write = !out_dir.empty();
  if (write) std::filesystem::create_directories(out_dir);

  RunResult r;
  std::optional<TokenizerArtifacts> tok;
  if (cfg.ablation.use_tokenizer) {
    tok = train_tokenizer(cfg, g);
    r.tokenizer_loss = tok->loss_curve;
    if (write) {
      diff::save_checkpoint(out_dir / artifact::tokenizer, tok->model.checkpoint());
      save_codebooks(out_dir / artifact::codebooks, tok->codebooks);
      save_tokens(out_dir / artifact::tokens, tok->tokens);
      write_embeddings(out_dir / artifact::embeddings, tok->embeddings);
    }
  }
  SerializeResult ser = serialize_graph(cfg, g);
  r.serialize_stats = ser.stats;
  if (write) save_sequences(out_dir / artifact::sequences, ser.sequences);

  const ModelInputs in = model_inputs(cfg, g, tok ? &*tok : nullptr, std::move(ser.sequences));
  const TrainedModel model = train_transformer(cfg, in, g, &r.report);
  r.train = evaluate(model, in, g.labels(), g.nodes_in(Split::train));
  r.valid = evaluate(model, in, g.labels(), g.nodes_in(Split::valid));
  r.test = evaluate(model, in, g.labels(), g.nodes_in(Split::test));
  if (write) {
    diff::save_checkpoint(out_dir / artifact::model, model.parameters());
    write_metrics(out_dir / artifact::metrics, r);
  }
  return r;
}

std::vector<std::pair<std::string, std::string>> metric_records(const RunResult& r) {
  auto num = [](double x) {
    std::ostringstream os;
    os.precision(6);
    os << std::fixed << x;
    return os.str();
  };
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& [name, m] : {std::pair{"train", &r.train}, {"valid", &r.valid}, {"test", &r.test}}) {
    out.emplace_back(std::string(name) + ".accuracy", num(m->accuracy));
    if (m->roc_auc) out.emplace_back(std::string(name) + ".roc_auc", num(*m->roc_auc));
    out.emplace_back(std::string(name) + ".count", std::to_string(m->count));
  }
  out.emplace_back("model.epochs_run", std::to_string(r.report.epochs_run));
  out.emplace_back("model.best_epoch", std::to_string(r.report.best_epoch));
  if (!r.report.loss_curve.empty()) {
    out.emplace_back("model.loss_first", num(r.report.loss_curve.front()));
    out.emplace_back("model.loss_last", num(r.report.loss_curve.back()));
  }
  if (!r.tokenizer_loss.empty()) {
    out.emplace_back("tokenizer.loss_first", num(r.tokenizer_loss.front()));
    out.emplace_back("tokenizer.loss_last", num(r.tokenizer_loss.back()));
  }
  return out;
}

void write_metrics(const std::filesystem::path& path, const RunResult& r) {
  std::ofstream out(path);
  if (!out) throw ArgumentError("cannot write " + path.string());
  for (const auto& [k, v] : metric_records(r)) out << k << '=' << v << '\n';
  out << "model.loss_curve=";
  for (std::size_t i = 0; i < r.report.loss_curve.size(); ++i) out << (i ? "," : "") << r.report.loss_curve[i];
  out << "\ntokenizer.loss_curve=";
  for (std::size_t i = 0; i < r.tokenizer_loss.size(); ++i) out << (i ? "," : "") << r.tokenizer_loss[i];
  out << '\n';
}

}  // namespace graphtok::pipeline

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "graphtok/errors.hpp"
#include "graphtok/pipeline.hpp"

namespace graphtok::pipeline {

namespace {

std::string trim(std::string_view s) {
  const auto* ws = " \t\r\n";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(ws);
  return std::string(s.substr(b, e - b + 1));
}

std::size_t to_size(const std::string& v) {
  std::size_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) throw ArgumentError("expected a non-negative integer, got '" + v + "'");
  return out;
}

std::uint64_t to_u64(const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) throw ArgumentError("expected an unsigned integer, got '" + v + "'");
  return out;
}

double to_double(const std::string& v) {
  double out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) throw ArgumentError("expected a number, got '" + v + "'");
  return out;
}

bool to_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ArgumentError("expected true/false, got '" + v + "'");
}

// Shortest form that parses back to the same double.
std::string fmt_double(double x) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

std::string fmt_bool(bool b) { return b ? "true" : "false"; }

template <typename E>
struct EnumNames {
  std::vector<std::pair<std::string, E>> names;

  E parse(const std::string& v) const {
    for (const auto& [n, e] : names)
      if (n == v) return e;
    std::string allowed;
    for (const auto& [n, e] : names) allowed += (allowed.empty() ? "" : "|") + n;
    throw ArgumentError("expected one of " + allowed + ", got '" + v + "'");
  }
  std::string name(E e) const {
    for (const auto& [n, x] : names)
      if (x == e) return n;
    return "?";
  }
};

const EnumNames<DataSource> kSource{{{"sbm", DataSource::sbm}, {"files", DataSource::files}}};
const EnumNames<gnn::LayerKind> kLayer{{{"gat", gnn::LayerKind::gat}, {"gcn", gnn::LayerKind::gcn}}};
const EnumNames<gnn::Activation> kAct{{{"elu", gnn::Activation::elu},
                                       {"relu", gnn::Activation::relu},
                                       {"none", gnn::Activation::none}}};
const EnumNames<ssl::LossTarget> kTarget{{{"quantized", ssl::LossTarget::quantized},
                                          {"pre_quantized", ssl::LossTarget::pre_quantized}}};
const EnumNames<CommitVariant> kCommit{{{"full", CommitVariant::full}, {"per_level", CommitVariant::per_level}}};
const EnumNames<ModelKind> kModel{{{"transformer", ModelKind::transformer}, {"linear", ModelKind::linear}}};
const EnumNames<NoRvqMode> kNoRvq{{{"continuous", NoRvqMode::continuous},
                                   {"kmeans_post", NoRvqMode::kmeans_post}}};

struct Setting {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

// Field accessors by kind; F maps a config to the field reference.
template <typename F>
Setting size_field(F f) {
  return {[f](RunConfig& c, const std::string& v) { f(c) = to_size(v); },
          [f](const RunConfig& c) { return std::to_string(f(c)); }};
}
template <typename F>
Setting double_field(F f) {
  return {[f](RunConfig& c, const std::string& v) { f(c) = to_double(v); },
          [f](const RunConfig& c) { return fmt_double(f(c)); }};
}
template <typename F>
Setting bool_field(F f) {
  return {[f](RunConfig& c, const std::string& v) { f(c) = to_bool(v); },
          [f](const RunConfig& c) { return fmt_bool(f(c)); }};
}
template <typename E, typename F>
Setting enum_field(const EnumNames<E>& names, F f) {
  return {[&names, f](RunConfig& c, const std::string& v) { f(c) = names.parse(v); },
          [&names, f](const RunConfig& c) { return names.name(f(c)); }};
}
template <typename F>
Setting path_field(F f) {
  return {[f](RunConfig& c, const std::string& v) { f(c) = v; },
          [f](const RunConfig& c) { return f(c).string(); }};
}

#define FIELD(expr) [](auto& c) -> auto& { return c.expr; }

const std::vector<std::pair<std::string, Setting>>& settings() {
  static const std::vector<std::pair<std::string, Setting>> table = {
      {"seed", {[](RunConfig& c, const std::string& v) { c.seed = to_u64(v); },
                [](const RunConfig& c) { return std::to_string(c.seed); }}},

      {"data.source", enum_field(kSource, FIELD(data.source))},
      {"data.edges", path_field(FIELD(data.edges))},
      {"data.features", path_field(FIELD(data.features))},
      {"data.labels", path_field(FIELD(data.labels))},
      {"data.directed", bool_field(FIELD(data.directed))},
      {"data.nodes", size_field(FIELD(data.nodes))},
      {"data.blocks", size_field(FIELD(data.blocks))},
      {"data.p_in", double_field(FIELD(data.p_in))},
      {"data.p_out", double_field(FIELD(data.p_out))},
      {"data.feature_dim", size_field(FIELD(data.feature_dim))},
      {"data.feature_shift", double_field(FIELD(data.feature_shift))},
      {"data.permute_labels", bool_field(FIELD(data.permute_labels))},

      {"gnn.layer", enum_field(kLayer, FIELD(gnn.layer_kind))},
      {"gnn.layers", size_field(FIELD(gnn.num_layers))},
      {"gnn.hidden", size_field(FIELD(gnn.hidden_dim))},
      {"gnn.heads", size_field(FIELD(gnn.heads))},
      {"gnn.activation", enum_field(kAct, FIELD(gnn.activation))},
      {"gnn.dropout", double_field(FIELD(gnn.dropout_rate))},

      {"ssl.beta", double_field(FIELD(ssl.beta))},
      {"ssl.gamma", double_field(FIELD(ssl.gamma))},
      {"ssl.lambda", double_field(FIELD(ssl.lambda))},
      {"ssl.mask_rate", double_field(FIELD(ssl.mask_rate))},
      {"ssl.teacher_decay", double_field(FIELD(ssl.teacher_decay))},
      {"ssl.losses_on", enum_field(kTarget, FIELD(ssl.losses_on))},

      {"rvq.codebooks", size_field(FIELD(rvq.num_codebooks))},
      {"rvq.size", size_field(FIELD(rvq.codebook_size))},
      {"rvq.decay", double_field(FIELD(rvq.decay))},
      {"rvq.commit", enum_field(kCommit, FIELD(ssl.commit_variant))},
      {"rvq.kmeans_iters", size_field(FIELD(rvq.kmeans_iters))},
      {"rvq.dead_threshold", double_field(FIELD(rvq.dead_threshold))},

      {"serialize.k_sem", size_field(FIELD(serialize.k_sem))},
      {"serialize.k", size_field(FIELD(serialize.k))},
      {"serialize.pca_dim", size_field(FIELD(serialize.pca_dim))},
      {"serialize.alpha", double_field(FIELD(serialize.ppr.alpha))},
      {"serialize.tol", double_field(FIELD(serialize.ppr.tol))},
      {"serialize.max_iters", size_field(FIELD(serialize.ppr.max_iters))},

      {"transformer.layers", size_field(FIELD(transformer.num_layers))},
      {"transformer.heads", size_field(FIELD(transformer.num_heads))},
      {"transformer.dim", size_field(FIELD(transformer.model_dim))},
      {"transformer.ffn", size_field(FIELD(transformer.ffn_dim))},
      {"transformer.dropout", double_field(FIELD(transformer.dropout))},

      {"train.tokenizer_lr", double_field(FIELD(train.tokenizer_lr))},
      {"train.tokenizer_epochs", size_field(FIELD(train.tokenizer_epochs))},
      {"train.transformer_lr", double_field(FIELD(train.transformer_lr))},
      {"train.transformer_epochs", size_field(FIELD(train.transformer_epochs))},
      {"train.batch_size", size_field(FIELD(train.batch_size))},
      {"train.patience", size_field(FIELD(train.patience))},

      {"ablation.row", {[](RunConfig& c, const std::string& v) {
                          apply_ablation_row(c, static_cast<int>(to_size(v)));
                        },
                        nullptr}},
      {"ablation.use_tokenizer", bool_field(FIELD(ablation.use_tokenizer))},
      {"ablation.use_rvq", bool_field(FIELD(ablation.use_rvq))},
      {"ablation.use_dgi", bool_field(FIELD(ablation.use_dgi))},
      {"ablation.use_gmae2", bool_field(FIELD(ablation.use_gmae2))},
      {"ablation.use_codebook_aggregate", bool_field(FIELD(ablation.use_codebook_aggregate))},
      {"ablation.use_positional_encoding", bool_field(FIELD(ablation.use_positional_encoding))},
      {"ablation.use_gating", bool_field(FIELD(ablation.use_gating))},
      {"ablation.use_semantic_edges", bool_field(FIELD(ablation.use_semantic_edges))},
      {"ablation.model", enum_field(kModel, FIELD(ablation.model))},
      {"ablation.no_rvq_mode", enum_field(kNoRvq, FIELD(ablation.no_rvq_mode))},
  };
  return table;
}

#undef FIELD

const Setting* find_setting(const std::string& key) {
  for (const auto& [k, s] : settings())
    if (k == key) return &s;
  return nullptr;
}

}  // namespace

RunConfig::RunConfig() {
  gnn.hidden_dim = 32;
  gnn.heads = 4;
  transformer.num_layers = 1;
  transformer.num_heads = 4;
  transformer.model_dim = 32;
  transformer.ffn_dim = 64;
  transformer.dropout = 0.1;
}

void RunConfig::validate() const {
  if (data.source == DataSource::files) {
    for (const auto* p : {&data.edges, &data.features, &data.labels}) {
      if (p->empty()) throw ArgumentError("config: data.edges, data.features and data.labels are required");
      if (!std::filesystem::exists(*p)) throw ArgumentError("config: file not found: " + p->string());
    }
  } else {
    if (data.nodes < 2 || data.blocks < 1 || data.blocks > data.nodes || data.feature_dim < 1)
      throw ArgumentError("config: SBM needs nodes >= 2, 1 <= blocks <= nodes, feature_dim >= 1");
    if (data.p_in < 0 || data.p_in > 1 || data.p_out < 0 || data.p_out > 1)
      throw ArgumentError("config: SBM probabilities must be in [0,1]");
  }
  gnn.validate();
  ssl.validate();
  if (rvq.num_codebooks < 1 || rvq.codebook_size < 1) throw ArgumentError("config: rvq.codebooks and rvq.size must be >= 1");
  if (rvq.decay < 0 || rvq.decay > 1) throw ArgumentError("config: rvq.decay must be in [0,1]");
  if (serialize.ppr.alpha <= 0 || serialize.ppr.alpha >= 1) throw ArgumentError("config: serialize.alpha must be in (0,1)");
  if (serialize.ppr.tol <= 0) throw ArgumentError("config: serialize.tol must be positive");
  if (transformer.model_dim % transformer.num_heads != 0)
    throw ArgumentError("config: transformer.dim must be divisible by transformer.heads");
  if (transformer.dropout < 0 || transformer.dropout >= 1) throw ArgumentError("config: transformer.dropout must be in [0,1)");
  if (train.batch_size < 1) throw ArgumentError("config: train.batch_size must be >= 1");
  if (train.tokenizer_lr <= 0 || train.transformer_lr <= 0) throw ArgumentError("config: learning rates must be positive");
}

void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value) {
  const Setting* s = find_setting(key);
  if (!s) throw ArgumentError("unknown config key '" + key + "'");
  s->set(cfg, value);
}

RunConfig parse_config(std::string_view text, const std::string& source) {
  RunConfig cfg;
  std::istringstream in{std::string(text)};
  std::string raw;
  std::size_t lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    if (auto hash = raw.find('#'); hash != std::string::npos) raw.erase(hash);
    std::string line = trim(raw);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(source, lineno, "expected 'key = value'");
    std::string key = trim(std::string_view(line).substr(0, eq));
    std::string value = trim(std::string_view(line).substr(eq + 1));
    if (key.empty()) throw ParseError(source, lineno, "missing key");
    try {
      apply_setting(cfg, key, value);
    } catch (const ArgumentError& e) {
      throw ParseError(source, lineno, e.what());
    }
  }
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ArgumentError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  RunConfig cfg = parse_config(ss.str(), path.string());
  // Relative data paths resolve against the config file's directory.
  const auto base = path.parent_path();
  for (auto* p : {&cfg.data.edges, &cfg.data.features, &cfg.data.labels})
    if (!p->empty() && p->is_relative()) *p = base / *p;
  cfg.validate();
  return cfg;
}

std::string describe(const RunConfig& cfg) {
  std::string out;
  for (const auto& [k, s] : settings()) {
    if (!s.get) continue;
    out += k + " = " + s.get(cfg) + "\n";
  }
  return out;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, s] : settings()) keys.push_back(k);
  return keys;
}

void apply_ablation_row(RunConfig& cfg, int row) {
  if (row < 1 || row > kAblationRows) throw ArgumentError("ablation row must be in 1.." + std::to_string(kAblationRows));
  AblationFlags f;  // row 10: everything on
  switch (row) {
    case 1:  // tokenizer + codebook sums, linear model
      f.use_positional_encoding = false;
      f.use_gating = false;
      f.use_semantic_edges = false;
      f.model = ModelKind::linear;
      break;
    case 2:  // no tokenizer: raw features, PE and PPR sequences only
      f.use_tokenizer = false;
      f.use_rvq = false;
      f.use_dgi = false;
      f.use_gmae2 = false;
      f.use_codebook_aggregate = false;
      f.use_gating = false;
      f.use_semantic_edges = false;
      break;
    case 3: f.use_rvq = false; break;
    case 4: f.use_gmae2 = false; break;
    case 5: f.use_dgi = false; break;
    case 6: f.use_codebook_aggregate = false; break;
    case 7: f.use_positional_encoding = false; break;
    case 8: f.use_gating = false; break;
    case 9: f.use_semantic_edges = false; break;
    default: break;
  }
  f.no_rvq_mode = cfg.ablation.no_rvq_mode;
  cfg.ablation = f;
}

}  // namespace graphtok::pipeline

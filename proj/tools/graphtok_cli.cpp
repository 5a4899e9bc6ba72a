// graphtok command-line driver: one subcommand per pipeline stage.

#include <CLI11.hpp>

#include <cstdio>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "graphtok/errors.hpp"
#include "graphtok/pipeline.hpp"

namespace gp = graphtok::pipeline;

namespace {

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir = "out";
  std::vector<std::string> overrides;
  int ablation_row = 0;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config, "Key-value config file (defaults apply when omitted)");
  cmd->add_option("--seed", o.seed, "Override the config seed");
  cmd->add_option("--out-dir", o.out_dir, "Artifact directory")->capture_default_str();
  cmd->add_option("--set", o.overrides, "Extra key=value override, repeatable");
  cmd->add_option("--ablation-row", o.ablation_row, "Apply ablation row 1-10")->check(CLI::Range(0, gp::kAblationRows));
}

gp::RunConfig resolve(const CommonOptions& o) {
  gp::RunConfig cfg = o.config.empty() ? gp::RunConfig{} : gp::load_config(o.config);
  if (o.ablation_row) gp::apply_ablation_row(cfg, o.ablation_row);
  for (const auto& kv : o.overrides) {
    auto eq = kv.find('=');
    if (eq == std::string::npos) throw graphtok::ArgumentError("--set expects key=value, got '" + kv + "'");
    gp::apply_setting(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.seed) cfg.seed = *o.seed;
  cfg.validate();
  return cfg;
}

std::string quote(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c == '\n' ? ' ' : c;
  }
  return out;
}

void print_records(const std::vector<std::pair<std::string, std::string>>& recs) {
  std::size_t w = 6;
  for (const auto& [k, v] : recs) w = std::max(w, k.size());
  std::cout << std::left << std::setw(static_cast<int>(w)) << "metric" << "  value\n"
            << std::string(w + 8, '-') << '\n';
  for (const auto& [k, v] : recs) std::cout << std::setw(static_cast<int>(w)) << k << "  " << v << '\n';
  std::cout << '\n';
  for (const auto& [k, v] : recs) std::cout << k << '=' << v << '\n';
}

std::string fixed(double x, int prec = 6) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << x;
  return os.str();
}

std::vector<std::pair<std::string, std::string>> metrics_records(const std::string& prefix, const gp::Metrics& m) {
  std::vector<std::pair<std::string, std::string>> r{{prefix + ".accuracy", fixed(m.accuracy)}};
  if (m.roc_auc) r.emplace_back(prefix + ".roc_auc", fixed(*m.roc_auc));
  r.emplace_back(prefix + ".count", std::to_string(m.count));
  return r;
}

graphtok::Split parse_split(const std::string& s) {
  if (s == "train") return graphtok::Split::train;
  if (s == "valid") return graphtok::Split::valid;
  if (s == "test") return graphtok::Split::test;
  throw graphtok::ArgumentError("split must be train, valid or test");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Graph tokenization and graph Transformer pipeline"};
  app.require_subcommand(1);

  CommonOptions opt;
  auto* tok = app.add_subcommand("train-tokenizer", "Train the GNN tokenizer and write codebooks and tokens");
  auto* tkz = app.add_subcommand("tokenize", "Re-tokenize the graph from a saved tokenizer and codebooks");
  auto* ser = app.add_subcommand("serialize", "Build PPR token sequences");
  auto* trn = app.add_subcommand("train-transformer", "Train the downstream model on saved artifacts");
  auto* evl = app.add_subcommand("eval", "Evaluate a saved model on one split");
  auto* mem = app.add_subcommand("memory-report", "Token storage versus raw feature storage");
  auto* all = app.add_subcommand("run-all", "Every stage in sequence");
  auto* cfgcmd = app.add_subcommand("config", "Print the resolved configuration");
  for (auto* c : {tok, tkz, ser, trn, evl, mem, all, cfgcmd}) add_common(c, opt);

  std::string split = "test";
  evl->add_option("--split", split, "train, valid or test")->capture_default_str();

  std::optional<double> m_nodes, m_dim, m_codebooks, m_size, m_code_dim;
  double bytes_float = 4, bytes_index = 4;
  mem->add_option("--nodes", m_nodes, "Node count (default: from the config graph)");
  mem->add_option("--feature-dim", m_dim, "Raw feature width");
  mem->add_option("--codebooks", m_codebooks, "Quantizer levels c");
  mem->add_option("--codebook-size", m_size, "Codes per level K");
  mem->add_option("--code-dim", m_code_dim, "Code width");
  mem->add_option("--bytes-per-float", bytes_float)->capture_default_str();
  mem->add_option("--bytes-per-index", bytes_index)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::printf("error: code=usage message=\"%s\"\n", quote(e.what()).c_str());
    return 2;
  }

  try {
    const gp::RunConfig cfg = resolve(opt);
    const std::filesystem::path out = opt.out_dir;

    if (*cfgcmd) {
      std::cout << gp::describe(cfg);
    } else if (*tok) {
      const auto art = gp::stage_train_tokenizer(cfg, out);
      print_records({{"tokenizer.epochs", std::to_string(art.loss_curve.size())},
                     {"tokenizer.loss_first", art.loss_curve.empty() ? "nan" : fixed(art.loss_curve.front())},
                     {"tokenizer.loss_last", art.loss_curve.empty() ? "nan" : fixed(art.loss_curve.back())},
                     {"tokens.nodes", std::to_string(art.tokens.num_nodes)},
                     {"tokens.codebooks", std::to_string(art.tokens.num_codebooks)}});
    } else if (*tkz) {
      const auto t = gp::stage_tokenize(cfg, out);
      print_records({{"tokens.nodes", std::to_string(t.num_nodes)},
                     {"tokens.codebooks", std::to_string(t.num_codebooks)}});
    } else if (*ser) {
      const auto r = gp::stage_serialize(cfg, out);
      print_records({{"serialize.structural_edges", std::to_string(r.stats.structural_edges)},
                     {"serialize.semantic_edges", std::to_string(r.stats.semantic_edges)},
                     {"serialize.union_edges", std::to_string(r.stats.union_edges)},
                     {"serialize.mean_iterations", fixed(r.stats.mean_iterations, 2)},
                     {"serialize.not_converged", std::to_string(r.stats.not_converged)}});
    } else if (*trn) {
      print_records(gp::metric_records(gp::stage_train_transformer(cfg, out)));
    } else if (*evl) {
      print_records(metrics_records(split, gp::stage_evaluate(cfg, out, parse_split(split))));
    } else if (*mem) {
      double n = m_nodes.value_or(0), d = m_dim.value_or(0);
      if (!m_nodes || !m_dim) {
        const auto g = gp::load_graph(cfg);
        if (!m_nodes) n = static_cast<double>(g.num_nodes());
        if (!m_dim) d = static_cast<double>(g.feature_dim());
      }
      const auto rep = graphtok::memory_report(
          n, d, m_codebooks.value_or(static_cast<double>(cfg.rvq.num_codebooks)),
          m_size.value_or(static_cast<double>(cfg.rvq.codebook_size)),
          m_code_dim.value_or(static_cast<double>(cfg.gnn.hidden_dim)), bytes_float, bytes_index);
      print_records({{"memory.raw_bytes", fixed(rep.raw_bytes, 0)},
                     {"memory.index_bytes", fixed(rep.index_bytes, 0)},
                     {"memory.codebook_bytes", fixed(rep.codebook_bytes, 0)},
                     {"memory.ratio_with_codebooks", fixed(rep.ratio_with_codebooks, 2)},
                     {"memory.ratio_indices_only", fixed(rep.ratio_indices_only, 2)}});
    } else if (*all) {
      print_records(gp::metric_records(gp::run_all(cfg, out)));
    }
  } catch (const graphtok::Error& e) {
    std::printf("error: code=%s message=\"%s\"\n", e.code().c_str(), quote(e.what()).c_str());
    return 1;
  } catch (const std::exception& e) {
    std::printf("error: code=internal message=\"%s\"\n", quote(e.what()).c_str());
    return 1;
  }
  return 0;
}

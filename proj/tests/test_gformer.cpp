#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>

#include "graphtok/errors.hpp"
#include "graphtok/gformer.hpp"
#include "graphtok/ops.hpp"
#include "test_util.hpp"

using namespace graphtok;
using namespace graphtok::gformer;
using diff::Tensor;
using graphtok::testing::random_tensor;

namespace {

using Dense = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Dense dense(const Tensor& t, std::size_t rows, std::size_t cols) {
  return Eigen::Map<const Dense>(t.values().data(), static_cast<Eigen::Index>(rows),
                                 static_cast<Eigen::Index>(cols));
}

// N nodes with sequences [v, v+1, ..., v+k] (mod N) and random gates.
SequenceSet ring_sequences(std::size_t n, std::size_t k, std::mt19937_64& rng) {
  SequenceSet s;
  s.num_nodes = n;
  s.k = k;
  std::uniform_real_distribution<double> u(0.1, 1.0);
  for (std::size_t v = 0; v < n; ++v) {
    std::vector<double> w(k + 1);
    double z = 0;
    for (double& x : w) z += x = u(rng);
    for (std::size_t i = 0; i <= k; ++i) {
      s.ids.push_back(static_cast<NodeId>((v + i) % n));
      s.gates.push_back(static_cast<float>(w[i] / z));
    }
  }
  return s;
}

struct Fixture {
  TransformerConfig cfg;
  SequenceSet seq;
  TokenTable tokens;
  CodebookSet codebooks;
  ModelParams params;

  Fixture(std::size_t c, std::size_t k, std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    cfg.num_codebooks = c;
    cfg.codebook_size = 4;
    cfg.code_dim = 3;
    cfg.model_dim = 4;
    cfg.num_heads = 2;
    cfg.ffn_dim = 5;
    cfg.k = k;
    cfg.num_classes = 3;
    seq = ring_sequences(n, k, rng);
    tokens.num_nodes = n;
    tokens.num_codebooks = c;
    std::uniform_int_distribution<std::uint32_t> tok(0, 3);
    for (std::size_t i = 0; i < n * c; ++i) tokens.tokens.push_back(tok(rng));
    codebooks = CodebookSet::zeros(c, 4, 3, 0.9);
    std::normal_distribution<double> nd(0, 1);
    for (double& x : codebooks.codes) x = nd(rng);
    Rng init(seed);
    params = init_model(cfg, init);
  }
  Inputs inputs() const { return {&seq, &tokens, &codebooks, nullptr}; }
};

}  // namespace

TEST(Embed, SmallestShape) {
  Fixture f(1, 0, 3, 1);
  const std::vector<NodeId> t{2};
  const Tensor e = embed_batch(f.params, f.cfg, f.inputs(), t);
  ASSERT_EQ(e.shape(), (diff::Shape{1, 1, 2, 4}));
  const std::uint32_t tok = f.tokens.at(2, 0);
  const Dense xt = dense(f.params.token_table, 4, 4);
  const Dense pe = dense(f.params.pe, 1, 4);
  const Dense he = dense(f.params.he, 2, 4);
  Eigen::RowVectorXd code(3);
  for (int j = 0; j < 3; ++j) code(j) = f.codebooks.code(0, tok)[j];
  const Eigen::RowVectorXd agg = code * dense(f.params.proj_w, 3, 4) + dense(f.params.proj_b, 1, 4);
  const Dense got = dense(e, 2, 4);
  EXPECT_LT((got.row(0) - (xt.row(tok) + pe.row(0) + he.row(0))).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_LT((got.row(1) - (agg + pe.row(0) + he.row(1))).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Embed, ZeroTablesGiveZeros) {
  Fixture f(2, 1, 4, 2);
  for (const auto& p : f.params.parameters()) {
    for (double& x : p.tensor.data()) x = 0.0;
  }
  const std::vector<NodeId> t{0, 1};
  const Tensor e = embed_batch(f.params, f.cfg, f.inputs(), t);
  for (double v : e.values()) EXPECT_EQ(v, 0.0);
}

TEST(Embed, HandAssembledLayout) {
  Fixture f(3, 2, 5, 3);
  const std::vector<NodeId> t{4};
  const Tensor e = embed_batch(f.params, f.cfg, f.inputs(), t);
  ASSERT_EQ(e.shape(), (diff::Shape{1, 3, 4, 4}));
  const Dense got = dense(e, 12, 4);
  const Dense xt = dense(f.params.token_table, 12, 4);
  const Dense pe = dense(f.params.pe, 3, 4);
  const Dense he = dense(f.params.he, 4, 4);
  const Dense pw = dense(f.params.proj_w, 3, 4);
  const Dense pb = dense(f.params.proj_b, 1, 4);
  for (std::size_t pos = 0; pos < 3; ++pos) {
    const NodeId node = f.seq.ids_of(4)[pos];
    Eigen::RowVectorXd agg = Eigen::RowVectorXd::Zero(3);
    for (std::size_t level = 0; level < 3; ++level) {
      const std::uint32_t tok = f.tokens.at(node, level);
      const Eigen::RowVectorXd expect = xt.row(level * 4 + tok) + pe.row(pos) + he.row(level);
      EXPECT_LT((got.row(pos * 4 + level) - expect).cwiseAbs().maxCoeff(), 1e-14);
      for (int j = 0; j < 3; ++j) agg(j) += f.codebooks.code(level, tok)[j];
    }
    const Eigen::RowVectorXd expect = agg * pw + pb + pe.row(pos) + he.row(3);
    EXPECT_LT((got.row(pos * 4 + 3) - expect).cwiseAbs().maxCoeff(), 1e-14);
  }
}

TEST(Embed, RejectsBadTokensAndMixedLengths) {
  Fixture f(2, 1, 4, 4);
  f.tokens.tokens[0] = 9;
  const std::vector<NodeId> t{0};
  EXPECT_THROW(embed_batch(f.params, f.cfg, f.inputs(), t), IndexError);
  Fixture g(2, 1, 4, 4);
  g.seq.ids[1 * 2 + 1] = kPadId;
  const std::vector<NodeId> mixed{0, 1};
  EXPECT_THROW(embed_batch(g.params, g.cfg, g.inputs(), mixed), ArgumentError);
}

TEST(Gating, UniformOneHotAndElementwise) {
  std::mt19937_64 rng(5);
  const Tensor e = random_tensor({2, 2, 3, 4}, rng);
  const Tensor uni({2, 2}, std::vector<double>(4, 0.5));
  const Tensor g1 = apply_gating(e, uni);
  for (std::size_t i = 0; i < e.numel(); ++i) EXPECT_EQ(g1.values()[i], 0.5 * e.values()[i]);
  const Tensor hot({2, 2}, {1, 0, 1, 0});
  const Tensor g2 = apply_gating(e, hot);
  for (std::size_t i = 0; i < e.numel(); ++i) {
    const bool target = (i / 12) % 2 == 0;
    EXPECT_EQ(g2.values()[i], target ? e.values()[i] : 0.0);
  }
  const Tensor r = random_tensor({2, 2}, rng, 0, 1);
  const Tensor g3 = apply_gating(e, r);
  for (std::size_t i = 0; i < e.numel(); ++i) EXPECT_EQ(g3.values()[i], e.values()[i] * r.values()[i / 12]);
  EXPECT_THROW(apply_gating(e, Tensor({2, 3})), ShapeError);
}

TEST(EncoderLayer, MatchesDenseReference) {
  Fixture f(1, 0, 2, 6);
  const EncoderLayerParams& p = f.params.layers[0];
  std::mt19937_64 rng(6);
  const Tensor h = random_tensor({3, 4}, rng);
  const Dense out = dense(encoder_layer(h, p, 2), 3, 4);

  auto ln = [](const Dense& x, const Tensor& g, const Tensor& b) {
    Dense y = x;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const double mu = x.row(i).mean();
      const double var = (x.row(i).array() - mu).square().mean();
      for (Eigen::Index j = 0; j < x.cols(); ++j) {
        y(i, j) = (x(i, j) - mu) / std::sqrt(var + 1e-5) * g.values()[j] + b.values()[j];
      }
    }
    return y;
  };
  auto lin = [](const Dense& x, const Tensor& w, const Tensor& b) {
    Dense y = x * dense(w, w.dim(0), w.dim(1));
    for (Eigen::Index j = 0; j < y.cols(); ++j) y.col(j).array() += b.values()[j];
    return y;
  };
  const Dense x = dense(h, 3, 4);
  const Dense xn = ln(x, p.ln1_gain, p.ln1_bias);
  const Dense q = lin(xn, p.wq, p.bq), k = lin(xn, p.wk, p.bk), v = lin(xn, p.wv, p.bv);
  Dense merged(3, 4);
  for (int head = 0; head < 2; ++head) {
    Dense s = q.middleCols(2 * head, 2) * k.middleCols(2 * head, 2).transpose() / std::sqrt(2.0);
    for (Eigen::Index i = 0; i < 3; ++i) {
      s.row(i) = (s.row(i).array() - s.row(i).maxCoeff()).exp();
      s.row(i) /= s.row(i).sum();
    }
    merged.middleCols(2 * head, 2) = s * v.middleCols(2 * head, 2);
  }
  const Dense h1 = ln(lin(merged, p.wo, p.bo) + x, p.ln2_gain, p.ln2_bias);
  const Dense ref = h1 + lin(lin(h1, p.ffn1_w, p.ffn1_b).cwiseMax(0.0), p.ffn2_w, p.ffn2_b);
  EXPECT_LT((out - ref).cwiseAbs().maxCoeff(), 1e-5);
}

TEST(EncoderLayer, PermutationEquivariantAndSingleToken) {
  Fixture f(1, 0, 2, 7);
  std::mt19937_64 rng(7);
  const Tensor h = random_tensor({4, 4}, rng);
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  const Tensor y = encoder_layer(h, f.params.layers[0], 2);
  const Tensor yp = encoder_layer(diff::embedding_lookup(h, perm), f.params.layers[0], 2);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      EXPECT_NEAR(yp.values()[i * 4 + j], y.values()[perm[i] * 4 + j], 1e-12);
    }
  }
  const Tensor one = diff::slice(h, 0, 0, 1);
  const Tensor a = encoder_layer(one, f.params.layers[0], 2);
  const Tensor b = diff::slice(encoder_layer(diff::concat({one}, 0), f.params.layers[0], 2), 0, 0, 1);
  EXPECT_EQ(std::vector<double>(a.values().begin(), a.values().end()),
            std::vector<double>(b.values().begin(), b.values().end()));
}

TEST(Pool, IndexArithmetic) {
  std::mt19937_64 rng(8);
  const Tensor h = random_tensor({1, 6, 2}, rng);  // c=2 (3 tokens per node), k=1
  const Tensor p = pool_tokens(h, 3);
  ASSERT_EQ(p.shape(), (diff::Shape{1, 2, 2}));
  for (std::size_t node = 0; node < 2; ++node) {
    for (std::size_t j = 0; j < 2; ++j) {
      double s = 0;
      for (std::size_t t = 0; t < 3; ++t) s += h.values()[(node * 3 + t) * 2 + j];
      EXPECT_NEAR(p.values()[node * 2 + j], s, 1e-15);
    }
  }
  const Tensor same({1, 4, 2}, std::vector<double>(8, 1.5));
  const Tensor pooled = pool_tokens(same, 2);
  for (double v : pooled.values()) EXPECT_EQ(v, 3.0);
  const Tensor id = pool_tokens(h, 1);
  EXPECT_EQ(std::vector<double>(id.values().begin(), id.values().end()),
            std::vector<double>(h.values().begin(), h.values().end()));
  EXPECT_THROW(pool_tokens(h, 4), ShapeError);
}

TEST(Readout, SpecialCases) {
  std::mt19937_64 rng(9);
  const Tensor h1 = random_tensor({1, 5}, rng);
  const Tensor w = random_tensor({5}, rng, -10, 10);
  const Tensor r1 = attention_readout(h1, w);
  for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(r1.values()[j], h1.values()[j]);

  const Tensor h = random_tensor({3, 5}, rng);
  const Tensor avg = attention_readout(h, Tensor({5}));
  for (std::size_t j = 0; j < 5; ++j) {
    EXPECT_NEAR(avg.values()[j], (h.values()[j] + h.values()[5 + j] + h.values()[10 + j]) / 3, 1e-15);
  }

  Tensor alpha;
  const Tensor e1({5}, {1, 0, 0, 0, 0});
  const Tensor r = attention_readout(h, e1, &alpha);
  double z = 0;
  for (std::size_t i = 0; i < 3; ++i) z += std::exp(h.values()[i * 5]);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(alpha.values()[i], std::exp(h.values()[i * 5]) / z, 1e-15);
  for (std::size_t j = 0; j < 5; ++j) {
    double s = 0;
    for (std::size_t i = 0; i < 3; ++i) s += alpha.values()[i] * h.values()[i * 5 + j];
    EXPECT_NEAR(r.values()[j], s, 1e-15);
  }
}

TEST(Classify, ZeroWeightsGiveUniform) {
  const Tensor logits = classify(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}), Tensor({3, 4}), Tensor({4}));
  const Tensor p = diff::softmax(logits, 1);
  for (double v : p.values()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Model, DeterministicInEval) {
  Fixture f(2, 2, 6, 10);
  const std::vector<NodeId> t{0, 3, 5};
  const Tensor a = forward(f.params, f.cfg, f.inputs(), t);
  const Tensor b = forward(f.params, f.cfg, f.inputs(), t);
  EXPECT_EQ(std::vector<double>(a.values().begin(), a.values().end()),
            std::vector<double>(b.values().begin(), b.values().end()));
}

TEST(Model, SwappingNeighbourPositionsWithTheirEncodings) {
  Fixture f(2, 2, 6, 11);
  const std::vector<NodeId> t{1};
  const Tensor a = forward(f.params, f.cfg, f.inputs(), t);
  // Swap positions 1 and 2 of node 1's sequence together with PE rows.
  std::swap(f.seq.ids[1 * 3 + 1], f.seq.ids[1 * 3 + 2]);
  std::swap(f.seq.gates[1 * 3 + 1], f.seq.gates[1 * 3 + 2]);
  auto pe = f.params.pe.data();
  for (std::size_t j = 0; j < 4; ++j) std::swap(pe[4 + j], pe[8 + j]);
  const Tensor b = forward(f.params, f.cfg, f.inputs(), t);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(a.values()[i], b.values()[i], 1e-12);
}

TEST(Model, GradientCheckFullStack) {
  Fixture f(2, 2, 6, 12);
  f.cfg.num_heads = 1;
  Rng init(12);
  f.params = init_model(f.cfg, init);
  const std::vector<NodeId> t{0, 2, 4};
  const std::vector<int> labels{0, 2, 1};
  const auto params = f.params.parameters();
  double worst = 0;
  for (const auto& np : params) {
    auto loss = [&](const Tensor& x) {
      ModelParams m = f.params;
      auto list = m.parameters();
      // Rebuild the struct with the probed tensor swapped in by name.
      for (auto* slot : {&m.token_table, &m.proj_w, &m.proj_b, &m.pe, &m.he, &m.readout_w, &m.cls_w, &m.cls_b}) {
        if (slot->same_storage(np.tensor)) *slot = x;
      }
      for (auto& l : m.layers) {
        for (auto* slot : {&l.ln1_gain, &l.ln1_bias, &l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo, &l.bo,
                           &l.ln2_gain, &l.ln2_bias, &l.ffn1_w, &l.ffn1_b, &l.ffn2_w, &l.ffn2_b}) {
          if (slot->same_storage(np.tensor)) *slot = x;
        }
      }
      return diff::cross_entropy_with_logits(forward(m, f.cfg, f.inputs(), t), labels);
    };
    const double err = diff::grad_check(loss, np.tensor.clone());
    EXPECT_LT(err, 1e-4) << np.name;
    worst = std::max(worst, err);
  }
  RecordProperty("worst", std::to_string(worst));
}

TEST(Model, ContinuousSourceAndFlags) {
  std::mt19937_64 rng(13);
  TransformerConfig cfg;
  cfg.source = TokenSource::continuous;
  cfg.code_dim = 5;
  cfg.model_dim = 8;
  cfg.num_heads = 2;
  cfg.k = 2;
  cfg.num_classes = 2;
  cfg.use_gating = false;
  Rng init(13);
  const ModelParams p = init_model(cfg, init);
  EXPECT_FALSE(p.token_table.defined());
  EXPECT_FALSE(p.he.defined());
  const SequenceSet s = ring_sequences(5, 2, rng);
  const Matrix x = graphtok::testing::random_matrix(5, 5, rng);
  const Inputs in{&s, nullptr, nullptr, &x};
  const std::vector<NodeId> t{0, 1};
  EXPECT_EQ(forward(p, cfg, in, t).shape(), (diff::Shape{2, 2}));
  cfg.num_heads = 3;
  EXPECT_THROW(cfg.validate(), ArgumentError);
}

TEST(Model, CheckpointNames) {
  Fixture f(2, 1, 3, 14);
  std::vector<std::string> names;
  for (const auto& p : f.params.parameters()) names.push_back(p.name);
  EXPECT_EQ(names.front(), "xt.table");
  EXPECT_NE(std::find(names.begin(), names.end(), "pe"), names.end());
  EXPECT_NE(std::find(names.begin(), names.end(), "he"), names.end());
  EXPECT_NE(std::find(names.begin(), names.end(), "encoder.layer0.attn.wq"), names.end());
  EXPECT_EQ(names.back(), "classifier.bias");
}

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "graphtok/errors.hpp"
#include "graphtok/ops.hpp"
#include "graphtok/ssl.hpp"
#include "test_util.hpp"

using namespace graphtok;
using namespace graphtok::ssl;
using diff::Tensor;
using graphtok::testing::random_graph;
using graphtok::testing::random_tensor;

namespace {

std::vector<std::vector<double>> rows(const Tensor& t) {
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < t.dim(0); ++i) {
    out.emplace_back(t.values().begin() + static_cast<std::ptrdiff_t>(i * t.dim(1)),
                     t.values().begin() + static_cast<std::ptrdiff_t>((i + 1) * t.dim(1)));
  }
  return out;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST(Corrupt, PermutesRowsDeterministically) {
  std::mt19937_64 rng(1);
  const Tensor x = random_tensor({7, 3}, rng);
  const Tensor a = corrupt_features(x, 5);
  const Tensor b = corrupt_features(x, 5);
  EXPECT_EQ(rows(a), rows(b));
  auto ra = rows(a), rx = rows(x);
  std::sort(ra.begin(), ra.end());
  std::sort(rx.begin(), rx.end());
  EXPECT_EQ(ra, rx);
  const Tensor one({1, 2}, {4.0, 5.0});
  EXPECT_EQ(rows(corrupt_features(one, 3)), rows(one));
}

TEST(Dgi, ZeroDiscriminatorGivesLn2) {
  std::mt19937_64 rng(2);
  const Tensor h = random_tensor({6, 4}, rng);
  EXPECT_NEAR(dgi_loss(h, corrupt_features(h, 1), Tensor({4, 4})).item(), std::log(2.0), 1e-15);
}

TEST(Dgi, MatchesHandSummation) {
  std::mt19937_64 rng(3);
  const Tensor h = random_tensor({4, 3}, rng);
  const Tensor ht = random_tensor({4, 3}, rng);
  const Tensor w = random_tensor({3, 3}, rng);
  std::vector<double> s(3, 0.0);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 3; ++j) s[j] += h.values()[i * 3 + j] / 4;
  }
  std::vector<double> ws(3, 0.0);
  for (std::size_t a = 0; a < 3; ++a) {
    for (std::size_t b = 0; b < 3; ++b) ws[a] += w.values()[a * 3 + b] * s[b];
  }
  double total = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    double p = 0, q = 0;
    for (std::size_t j = 0; j < 3; ++j) {
      p += h.values()[i * 3 + j] * ws[j];
      q += ht.values()[i * 3 + j] * ws[j];
    }
    total += std::log(sigmoid(p)) + std::log(1.0 - sigmoid(q));
  }
  EXPECT_NEAR(dgi_loss(h, ht, w).item(), -total / 8.0, 1e-12);
}

TEST(Dgi, PerfectDiscriminatorApproachesZero) {
  // Scores +-t for positives/negatives: loss = -log sigmoid(t) -> 0.
  const Tensor h({2, 1}, {1.0, 1.0});
  const Tensor ht({2, 1}, {-1.0, -1.0});
  EXPECT_LT(dgi_loss(h, ht, Tensor({1, 1}, {40.0})).item(), 1e-15);
}

TEST(Dgi, GradientCheck) {
  std::mt19937_64 rng(4);
  const Tensor h = random_tensor({10, 4}, rng);
  const Tensor ht = random_tensor({10, 4}, rng);
  const Tensor w = random_tensor({4, 4}, rng);
  EXPECT_LT(diff::grad_check([&](const Tensor& p) { return dgi_loss(p, ht, w); }, h), 1e-4);
  EXPECT_LT(diff::grad_check([&](const Tensor& p) { return dgi_loss(h, p, w); }, ht), 1e-4);
  EXPECT_LT(diff::grad_check([&](const Tensor& p) { return dgi_loss(h, ht, p); }, w), 1e-4);
}

TEST(Mask, CeilCountAndUntouchedRows) {
  std::mt19937_64 rng(5);
  const Tensor x = random_tensor({2, 3}, rng);
  const Tensor token({1, 3}, {9.0, 8.0, 7.0});
  const MaskedFeatures m = mask_nodes(x, token, 0.3, 1);
  ASSERT_EQ(m.nodes.size(), 1u);
  const std::size_t other = 1 - m.nodes[0];
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_EQ(m.features.values()[m.nodes[0] * 3 + j], token.values()[j]);
    EXPECT_EQ(m.features.values()[other * 3 + j], x.values()[other * 3 + j]);
  }

  const Tensor big = random_tensor({25, 2}, rng);
  const MaskedFeatures a = mask_nodes(big, Tensor({1, 2}), 0.5, 77);
  EXPECT_EQ(a.nodes.size(), 13u);
  EXPECT_EQ(a.nodes, mask_nodes(big, Tensor({1, 2}), 0.5, 77).nodes);
  EXPECT_THROW(mask_nodes(big, Tensor({1, 2}), 1.0, 1), ArgumentError);
}

TEST(Mask, TokenReceivesGradient) {
  const Tensor x({3, 2}, {1, 2, 3, 4, 5, 6});
  const Tensor token = Tensor::zeros({1, 2}, true);
  diff::Tape tape;
  diff::TapeScope scope(&tape);
  const MaskedFeatures m = mask_nodes(x, token, 0.5, 3);
  tape.backward(diff::sum_all(m.features));
  EXPECT_DOUBLE_EQ(token.grad()[0], static_cast<double>(m.nodes.size()));
}

TEST(Gmae2, HandValues) {
  const std::vector<std::size_t> mask{0};
  const Tensor x({1, 2}, {1.0, 0.0});
  const Tensor lat({1, 2}, {1.0, 1.0});
  // Perfect reconstruction, no distillation.
  EXPECT_EQ(gmae2_loss(x, Tensor({1, 2}, {3.0, 0.0}), lat, lat, mask, 2.0, 0.0).item(), 0.0);
  // Orthogonal with gamma 1.
  EXPECT_DOUBLE_EQ(gmae2_loss(x, Tensor({1, 2}, {0.0, 2.0}), lat, lat, mask, 1.0, 0.0).item(), 1.0);
  // cos = 0.5, gamma 2.
  const Tensor rec({1, 2}, {0.5, std::sqrt(3.0) / 2});
  EXPECT_NEAR(gmae2_loss(x, rec, lat, lat, mask, 2.0, 0.0).item(), 0.25, 1e-15);
  // Distillation term alone: cos = 0 for the single node.
  EXPECT_NEAR(gmae2_loss(x, x, Tensor({1, 2}, {0, 1}), Tensor({1, 2}, {1, 0}), mask, 1.0, 0.5).item(),
              0.5, 1e-15);
}

TEST(Gmae2, ZeroOnlyWhenAllPairsColinear) {
  std::mt19937_64 rng(6);
  const Tensor x = random_tensor({5, 3}, rng);
  const Tensor lat = random_tensor({5, 4}, rng);
  const std::vector<std::size_t> mask{1, 3};
  EXPECT_NEAR(gmae2_loss(x, diff::scale(x, 2.0), diff::scale(lat, 3.0), lat, mask, 2.0, 1.0).item(),
              0.0, 1e-15);
  EXPECT_GT(gmae2_loss(x, diff::scale(x, 2.0), diff::neg(lat), lat, mask, 2.0, 1.0).item(), 0.1);
}

TEST(Gmae2, GradientCheck) {
  std::mt19937_64 rng(7);
  const Tensor x = random_tensor({6, 3}, rng);
  const Tensor rec = random_tensor({6, 3}, rng);
  const Tensor lat = random_tensor({6, 4}, rng);
  const Tensor teacher = random_tensor({6, 4}, rng);
  const std::vector<std::size_t> mask{0, 2, 5};
  EXPECT_LT(diff::grad_check([&](const Tensor& p) { return gmae2_loss(x, p, lat, teacher, mask, 2.0, 1.0); },
                             rec),
            1e-4);
  EXPECT_LT(diff::grad_check([&](const Tensor& p) { return gmae2_loss(x, rec, p, teacher, mask, 3.0, 0.7); },
                             lat),
            1e-4);
}

TEST(Commitment, HandValuesAndGradients) {
  EXPECT_DOUBLE_EQ(commitment_loss(Tensor({1, 2}, {3, 4}), Tensor({1, 2})).item(), 5.0);
  EXPECT_EQ(commitment_loss(Tensor({2, 2}, {1, 2, 3, 4}), Tensor({2, 2}, {1, 2, 3, 4})).item(), 0.0);

  std::mt19937_64 rng(8);
  const Tensor z = random_tensor({5, 3}, rng, -1, 1, true);
  const Tensor h = random_tensor({5, 3}, rng, -1, 1, true);
  EXPECT_LT(diff::grad_check([&](const Tensor& p) { return commitment_loss(p, z); }, h), 1e-4);
  diff::Tape tape;
  diff::TapeScope scope(&tape);
  tape.backward(commitment_loss(h, z));
  EXPECT_TRUE(h.has_grad());
  EXPECT_FALSE(z.has_grad());
}

TEST(Teacher, EmaArithmetic) {
  const diff::ParameterList t{{"w", Tensor({2}, {1.0, 1.0})}};
  const diff::ParameterList s{{"w", Tensor({2}, {0.0, 0.0})}};
  update_teacher(t, s, 0.9);
  EXPECT_DOUBLE_EQ(t[0].tensor.values()[0], 0.9);
  update_teacher(t, s, 1.0 - 1e-12);
  EXPECT_NEAR(t[0].tensor.values()[0], 0.9, 1e-11);
  update_teacher(t, {{"w", Tensor({2}, {3.0, -2.0})}}, 0.0);
  EXPECT_EQ(t[0].tensor.values()[1], -2.0);
  EXPECT_THROW(update_teacher(t, {{"w", Tensor({3})}}, 0.5), ShapeError);
}

TEST(TotalLoss, Arithmetic) {
  LossParts p{Tensor::scalar(0.7), Tensor::scalar(1.2), Tensor::scalar(0.5)};
  EXPECT_NEAR(total_loss(p, 0.25).item(), 2.025, 1e-15);
  EXPECT_NEAR(total_loss(p, 0.0).item(), 1.9, 1e-15);
  EXPECT_EQ(total_loss({}, 0.25).item(), 0.0);
  EXPECT_THROW(SslConfig{.gamma = 0.5}.validate(), ArgumentError);
}

TEST(Tokenizer, ForwardTrainsStudentOnly) {
  std::mt19937_64 rng(9);
  const Graph g = random_graph(12, 0.3, 5, rng);
  const gnn::GraphOperators ops = gnn::GraphOperators::from(g);
  gnn::GnnConfig ec;
  ec.hidden_dim = 8;
  ec.heads = 2;
  Rng init(9);
  const TokenizerModel model = TokenizerModel::init(ec, 5, init);
  const Tensor x = Tensor::from_matrix(g.features());
  const CodebookSet cb = init_codebooks(ssl::embed(model, ops, x), 2, 4, 0.9, 10, 9);
  SslConfig cfg;
  diff::Tape tape;
  diff::TapeScope scope(&tape);
  const ForwardResult r = tokenizer_forward(model, ops, x, &cb, cfg, 1);
  EXPECT_TRUE(std::isfinite(r.total.item()));
  EXPECT_EQ(r.tokens.num_nodes, 12u);
  tape.backward(r.total);
  for (const auto& p : model.trainable()) EXPECT_TRUE(p.tensor.has_grad()) << p.name;
  for (const auto& p : model.teacher.parameters("teacher")) EXPECT_FALSE(p.tensor.has_grad()) << p.name;
  EXPECT_EQ(model.checkpoint().size(),
            model.trainable().size() + model.encoder.parameters("encoder").size());
}

// The encoder parameters seen through each loss, with codebooks frozen.
TEST(Tokenizer, LossesGradientCheckThroughEncoder) {
  std::mt19937_64 rng(10);
  const Graph g = random_graph(10, 0.35, 4, rng);
  const gnn::GraphOperators ops = gnn::GraphOperators::from(g);
  gnn::GnnConfig ec;
  ec.hidden_dim = 6;
  ec.heads = 2;
  Rng init(10);
  const TokenizerModel model = TokenizerModel::init(ec, 4, init);
  const Tensor x = Tensor::from_matrix(g.features());
  for (int which = 0; which < 3; ++which) {
    SslConfig cfg;
    cfg.losses_on = LossTarget::pre_quantized;
    cfg.use_dgi = which == 0;
    cfg.use_gmae2 = which == 1;
    cfg.use_rvq = false;
    const Tensor w0 = model.encoder.gat[0].heads[0].weight;
    const Tensor z = diff::scale(gnn::encode(ops, ec, model.encoder, x), 0.5).detach();
    auto f = [&](const Tensor& w) {
      TokenizerModel m = model;
      m.encoder.gat[0].heads[0].weight = w;
      if (which == 2) {
        return commitment_loss(gnn::encode(ops, ec, m.encoder, x), z);
      }
      return tokenizer_forward(m, ops, x, nullptr, cfg, 3).total;
    };
    EXPECT_LT(diff::grad_check(f, w0.clone()), 1e-4) << which;
  }
}

// Every trainable tensor, mask token included. Parameters are moved off their
// zero init first: masked rows of zeros sit on activation kinks otherwise.
TEST(Tokenizer, GmaeGradientCheckAllTrainable) {
  std::mt19937_64 rng(12);
  const Graph g = random_graph(10, 0.35, 4, rng);
  const gnn::GraphOperators ops = gnn::GraphOperators::from(g);
  gnn::GnnConfig ec;
  ec.hidden_dim = 6;
  ec.heads = 2;
  Rng init(12);
  const TokenizerModel model = TokenizerModel::init(ec, 4, init);
  std::normal_distribution<double> nd(0.0, 0.3);
  for (const auto& p : model.trainable()) {
    Tensor t = p.tensor;
    for (double& v : t.data()) v += nd(rng);
  }
  const Tensor x = Tensor::from_matrix(g.features());
  SslConfig cfg;
  cfg.losses_on = LossTarget::pre_quantized;
  cfg.use_dgi = true;
  cfg.use_gmae2 = true;
  cfg.use_rvq = false;
  for (const auto& p : model.trainable()) {
    const double e = diff::grad_check([&](const Tensor&) { return tokenizer_forward(model, ops, x, nullptr, cfg, 3).total; },
                                      p.tensor);
    EXPECT_LT(e, 1e-4) << p.name;
  }
}

#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "graphtok/errors.hpp"
#include "graphtok/ops.hpp"
#include "graphtok/params.hpp"
#include "test_util.hpp"

using namespace graphtok;
using namespace graphtok::diff;
using graphtok::testing::random_tensor;
using graphtok::testing::TempDir;

namespace {

// Reduces any tensor to a scalar with fixed pseudo-random weights so that
// every output element contributes to the checked gradient.
Tensor probe(const Tensor& y) {
  std::mt19937_64 rng(1234);
  return sum_all(mul(y, random_tensor(y.shape(), rng, 0.5, 1.5)));
}

using UnaryCase = std::function<Tensor(const Tensor&, std::mt19937_64&)>;

struct PrimitiveCase {
  const char* name;
  Shape shape;
  double lo;
  double hi;
  // Builds the function of the checked point; `rng` provides fixed partners.
  std::function<Tensor(const Tensor&)> (*make)(std::mt19937_64&);
};

double worst_over_trials(const PrimitiveCase& c, int trials) {
  std::mt19937_64 rng(99);
  double worst = 0.0;
  for (int t = 0; t < trials; ++t) {
    const Tensor x = random_tensor(c.shape, rng, c.lo, c.hi);
    auto f = c.make(rng);
    worst = std::max(worst, grad_check(f, x));
  }
  return worst;
}

}  // namespace

TEST(Tape, SoftmaxOfZerosIsUniform) {
  const Tensor y = softmax(Tensor({3}, {0.0, 0.0, 0.0}), 0);
  for (double v : y.values()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(Tape, SoftmaxRowsAreDistributions) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 20; ++t) {
    const Tensor x = random_tensor({4, 5, 3}, rng, -20.0, 20.0);
    for (int axis = 0; axis < 3; ++axis) {
      const Tensor y = softmax(x, axis, 0.7);
      const Tensor s = sum(y, axis);
      for (double v : y.values()) EXPECT_GE(v, 0.0);
      for (double v : s.values()) EXPECT_NEAR(v, 1.0, 1e-9);
    }
  }
}

TEST(Tape, CosineOfVectorWithItselfIsOne) {
  std::mt19937_64 rng(4);
  const Tensor x = random_tensor({5, 7}, rng);
  const Tensor c = cosine_similarity(x, x);
  for (double v : c.values()) EXPECT_NEAR(v, 1.0, 1e-15);
}

TEST(Tape, ZeroNormsAreClampedNotNan) {
  const Tensor z({2, 3});
  const Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor c = cosine_similarity(z, x);
  const Tensor n = l2_norm(z);
  for (double v : c.values()) EXPECT_EQ(v, 0.0);
  for (double v : n.values()) EXPECT_EQ(v, kEpsilon);
  EXPECT_DOUBLE_EQ(log(Tensor({1}, {0.0})).item(), std::log(kEpsilon));

  Tape tape;
  TapeScope scope(&tape);
  const Tensor zz = Tensor::zeros({1, 3}, true);
  const Tensor loss = add(sum_all(l2_norm(zz)), sum_all(log(zz)));
  tape.backward(loss);
  for (double g : zz.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Tape, ShapeErrorNamesBothShapes) {
  try {
    matmul(Tensor({2, 3}), Tensor({4, 2}));
    FAIL();
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos);
    EXPECT_NE(msg.find("[4, 2]"), std::string::npos);
  }
  EXPECT_THROW(add(Tensor({2, 3}), Tensor({3, 2})), ShapeError);
}

TEST(Tape, FanOutSumsAdjoints) {
  // y = x * x + 3 x through two consumers of the same tensor.
  Tape tape;
  TapeScope scope(&tape);
  const Tensor x({3}, {1.0, -2.0, 0.5}, true);
  const Tensor y = sum_all(add(mul(x, x), scale(x, 3.0)));
  tape.backward(y);
  const std::vector<double> expect{5.0, -1.0, 4.0};
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], expect[i]);

  const double err = grad_check(
      [](const Tensor& p) {
        const Tensor a = exp(p);
        return sum_all(mul(a, sigmoid(a)));
      },
      Tensor({4}, {0.1, -0.3, 0.7, 1.1}));
  EXPECT_LT(err, 1e-7);
}

TEST(Tape, GradientsAccumulateAcrossBackwardCalls) {
  const Tensor x({2}, {1.0, 2.0}, true);
  for (int i = 0; i < 2; ++i) {
    Tape tape;
    TapeScope scope(&tape);
    tape.backward(sum_all(scale(x, 2.0)));
  }
  EXPECT_DOUBLE_EQ(x.grad()[0], 4.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 4.0);
}

TEST(Tape, NoTapeMeansNoRecording) {
  const Tensor x({2}, {1.0, 2.0}, true);
  const Tensor y = mul(x, x);
  EXPECT_FALSE(y.requires_grad());
}

TEST(GradCheck, SumOfSquaresClosedForm) {
  const Tensor x({3}, {1.0, 2.0, 3.0});
  const double err = grad_check([](const Tensor& p) { return sum_all(mul(p, p)); }, x);
  EXPECT_LT(err, 1e-7);
  Tape tape;
  TapeScope scope(&tape);
  x.set_requires_grad(true);
  tape.backward(sum_all(mul(x, x)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 4.0);
  EXPECT_DOUBLE_EQ(x.grad()[2], 6.0);
}

TEST(GradCheck, NonScalarOutputIsArgumentError) {
  EXPECT_THROW(grad_check([](const Tensor& p) { return scale(p, 2.0); }, Tensor({2})),
               ArgumentError);
}

TEST(GradCheck, MatmulAgainstCentralDifferences) {
  std::mt19937_64 rng(8);
  const Tensor a = random_tensor({3, 4}, rng);
  const Tensor b = random_tensor({4, 2}, rng);
  EXPECT_LT(grad_check([&](const Tensor& p) { return probe(matmul(p, b)); }, a), 1e-6);
  EXPECT_LT(grad_check([&](const Tensor& p) { return probe(matmul(a, p)); }, b), 1e-6);
}

// Every primitive on ten random inputs.
TEST(GradCheck, EveryPrimitive) {
  const std::vector<PrimitiveCase> cases = {
      {"add_broadcast", {3, 4}, -1, 1,
       [](std::mt19937_64& r) -> std::function<Tensor(const Tensor&)> {
         Tensor b = random_tensor({4}, r, -1, 1, true);
         return [b](const Tensor& x) { return add(probe(add(x, b)), probe(add(b, x))); };
       }},
      {"sub", {2, 3}, -1, 1,
       [](std::mt19937_64& r) -> std::function<Tensor(const Tensor&)> {
         Tensor b = random_tensor({2, 1}, r);
         return [b](const Tensor& x) { return add(probe(sub(x, b)), probe(sub(b, x))); };
       }},
      {"mul", {2, 3, 2}, -1, 1,
       [](std::mt19937_64& r) -> std::function<Tensor(const Tensor&)> {
         Tensor b = random_tensor({3, 1}, r);
         return [b](const Tensor& x) { return probe(mul(x, b)); };
       }},
      {"div", {3, 3}, 0.5, 2.0,
       [](std::mt19937_64& r) -> std::function<Tensor(const Tensor&)> {
         Tensor b = random_tensor({3, 3}, r, 0.5, 2.0);
         return [b](const Tensor& x) { return add(probe(div(x, b)), probe(div(b, x))); };
       }},
      {"matmul_batched", {2, 3, 4}, -1, 1,
       [](std::mt19937_64& r) -> std::function<Tensor(const Tensor&)> {
         Tensor b = random_tensor({2, 4, 2}, r);
         return [b](const Tensor& x) { return probe(matmul(x, b)); };
       }},
      {"matmul_shared_rhs", {4, 3}, -1, 1,
       [](std::mt19937_64& r) -> std::function<Tensor(const Tensor&)> {
         Tensor a = random_tensor({2, 5, 4}, r);
         return [a](const Tensor& w) { return probe(matmul(a, w)); };
       }},
      {"concat", {2, 3}, -1, 1,
       [](std::mt19937_64& r) -> std::function<Tensor(const Tensor&)> {
         Tensor b = random_tensor({2, 2}, r);
         return [b](const Tensor& x) { return probe(concat({x, b, x}, 1)); };
       }},
      {"slice", {4, 5}, -1, 1,
       [](std::mt19937_64&) -> std::function<Tensor(const Tensor&)> {
         return [](const Tensor& x) { return probe(slice(x, 1, 1, 4)); };
       }},
      {"reshape_permute", {2, 3, 4}, -1, 1,
       [](std::mt19937_64&) -> std::function<Tensor(const Tensor&)> {
         return [](const Tensor& x) { return probe(permute(reshape(x, {6, 4}), {1, 0})); };
       }},
      {"sum_mean", {3, 4, 2}, -1, 1,
       [](std::mt19937_64&) -> std::function<Tensor(const Tensor&)> {
         return [](const Tensor& x) {
           return add(probe(sum(x, 1)), add(probe(mean(x, 0)), mean_all(mul(x, x))));
         };
       }},
      {"softmax", {3, 5}, -2, 2,
       [](std::mt19937_64&) -> std::function<Tensor(const Tensor&)> {
         return [](const Tensor& x) { return add(probe(softmax(x, 1, 0.5)), probe(softmax(x, 0))); };
       }},
      {"layer_norm", {4, 6}, -2, 2,
       [](std::mt19937_64& r) -> std::function<Tensor(const Tensor&)> {
         Tensor g = random_tensor({6}, r, 0.5, 1.5, true);
         Tensor b = random_tensor({6}, r, -0.5, 0.5, true);
         return [g, b](const Tensor& x) { return probe(layer_norm(x, g, b)); };
       }},
      {"elu", {10}, -2, 2,
       [](std::mt19937_64&) -> std::function<Tensor(const Tensor&)> {
         return [](const Tensor& x) { return probe(elu(x)); };
       }},
      {"relu_leaky", {10}, -2, 2,
       [](std::mt19937_64&) -> std::function<Tensor(const Tensor&)> {
         return [](const Tensor& x) { return add(probe(relu(x)), probe(leaky_relu(x, 0.2))); };
       }},
      {"sigmoid_logsigmoid", {10}, -4, 4,
       [](std::mt19937_64&) -> std::function<Tensor(const Tensor&)> {
         return [](const Tensor& x) { return add(probe(sigmoid(x)), probe(log_sigmoid(x))); };
       }},
      {"exp_log", {8}, 0.2, 3,
       [](std::mt19937_64&) -> std::function<Tensor(const Tensor&)> {
         return [](const Tensor& x) { return add(probe(exp(x)), probe(log(x))); };
       }},
      {"pow", {8}, 0.2, 2,
       [](std::mt19937_64&) -> std::function<Tensor(const Tensor&)> {
         return [](const Tensor& x) { return add(probe(pow(x, 2.0)), probe(pow(x, 1.5))); };
       }},
      {"l2_norm", {4, 3}, -1, 1,
       [](std::mt19937_64&) -> std::function<Tensor(const Tensor&)> {
         return [](const Tensor& x) { return probe(l2_norm(x)); };
       }},
      {"cosine_similarity", {4, 3}, -1, 1,
       [](std::mt19937_64& r) -> std::function<Tensor(const Tensor&)> {
         Tensor b = random_tensor({4, 3}, r);
         return [b](const Tensor& x) {
           return add(probe(cosine_similarity(x, b)), probe(cosine_similarity(b, x)));
         };
       }},
      {"embedding_lookup", {5, 3}, -1, 1,
       [](std::mt19937_64&) -> std::function<Tensor(const Tensor&)> {
         return [](const Tensor& t) {
           const std::vector<std::size_t> idx{4, 0, 4, 2};
           return probe(embedding_lookup(t, idx));
         };
       }},
      {"cross_entropy", {4, 3}, -2, 2,
       [](std::mt19937_64&) -> std::function<Tensor(const Tensor&)> {
         return [](const Tensor& x) {
           const std::vector<int> y{0, 2, 1, 2};
           return cross_entropy_with_logits(x, y);
         };
       }},
      {"spmm_segments", {4, 2}, -1, 1,
       [](std::mt19937_64& r) -> std::function<Tensor(const Tensor&)> {
         const Graph g = Graph::build(4, std::vector<Edge>{{0, 1}, {1, 2}, {2, 3}, {0, 2}},
                                      Matrix(4, 1), {}, {});
         auto p = std::make_shared<NormalizedAdjacency>(normalized_adjacency(g, true));
         Tensor w = random_tensor({p->nnz()}, r, -1, 1, true);
         return [p, w](const Tensor& x) {
           const Tensor a = segment_softmax(w, p->offsets);
           return add(probe(spmm(*p, x)), probe(segment_weighted_sum(p->offsets, p->cols, a, x)));
         };
       }},
      {"segment_softmax_weights", {10}, -1, 1,
       [](std::mt19937_64& r) -> std::function<Tensor(const Tensor&)> {
         const Graph g = Graph::build(4, std::vector<Edge>{{0, 1}, {1, 2}, {2, 3}}, Matrix(4, 1),
                                      {}, {});
         auto p = std::make_shared<NormalizedAdjacency>(normalized_adjacency(g, true));
         Tensor x = random_tensor({4, 3}, r);
         return [p, x](const Tensor& w) {
           return probe(segment_weighted_sum(p->offsets, p->cols, segment_softmax(w, p->offsets), x));
         };
       }},
  };
  for (const auto& c : cases) {
    EXPECT_LT(worst_over_trials(c, 10), 1e-5) << c.name;
  }
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  const Tensor p({3}, {1.0, -2.0, 0.5}, true);
  AdamState state;
  adam_step(std::vector<Tensor>{p}, state, {});
  EXPECT_EQ(state.step, 1u);
  EXPECT_EQ(std::vector<double>(p.values().begin(), p.values().end()),
            (std::vector<double>{1.0, -2.0, 0.5}));
}

TEST(Adam, FirstStepMovesByLearningRate) {
  const Tensor p({1}, {0.0}, true);
  p.grad_buffer()[0] = 1.0;
  AdamState state;
  AdamConfig cfg;
  cfg.lr = 0.1;
  adam_step(std::vector<Tensor>{p}, state, cfg);
  // m_hat = v_hat = 1  ->  step = lr / (1 + eps)
  EXPECT_NEAR(p.values()[0], -0.1 / (1.0 + 1e-8), 1e-15);
}

TEST(Adam, IdenticalStateGivesIdenticalResult) {
  auto run = [] {
    const Tensor p({2}, {0.3, -0.4}, true);
    AdamState state;
    for (int i = 0; i < 3; ++i) {
      auto g = p.grad_buffer();
      g[0] = 0.5 * (i + 1);
      g[1] = -0.25;
      adam_step(std::vector<Tensor>{p}, state, {});
    }
    return std::vector<double>(p.values().begin(), p.values().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(Checkpoint, RoundTripsNamesShapesAndBits) {
  std::mt19937_64 rng(2);
  TempDir dir;
  const ParameterList params{{"a.weight", random_tensor({3, 4}, rng)},
                             {"scalar", Tensor::scalar(-0.0)},
                             {"b", random_tensor({2, 1, 3}, rng)}};
  save_checkpoint(dir / "p.ckpt", params);
  const ParameterList back = load_checkpoint(dir / "p.ckpt");
  ASSERT_EQ(back.size(), params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    EXPECT_EQ(back[i].name, params[i].name);
    EXPECT_EQ(back[i].tensor.shape(), params[i].tensor.shape());
    for (std::size_t j = 0; j < params[i].tensor.numel(); ++j) {
      EXPECT_EQ(std::bit_cast<std::uint64_t>(back[i].tensor.values()[j]),
                std::bit_cast<std::uint64_t>(params[i].tensor.values()[j]));
    }
  }
}

TEST(Checkpoint, AssignChecksNamesAndShapes) {
  const ParameterList dst{{"w", Tensor({2})}};
  EXPECT_THROW(assign(dst, {{"v", Tensor({2})}}), FormatError);
  EXPECT_THROW(assign(dst, {{"w", Tensor({3})}}), ShapeError);
  assign(dst, {{"w", Tensor({2}, {1.0, 2.0})}});
  EXPECT_EQ(dst[0].tensor.values()[1], 2.0);
}

TEST(Checkpoint, RejectsWrongMagic) {
  TempDir dir;
  graphtok::testing::write_text(dir / "bad.ckpt", "XXXX\x01");
  EXPECT_THROW(load_checkpoint(dir / "bad.ckpt"), FormatError);
}

#include "graphtok/ssl.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "graphtok/errors.hpp"
#include "graphtok/ops.hpp"

namespace graphtok::ssl {

void SslConfig::validate() const {
  if (!(gamma >= 1.0)) throw ArgumentError("ssl: gamma must be >= 1");
  if (!(mask_rate > 0.0 && mask_rate < 1.0)) throw ArgumentError("ssl: mask_rate must be in (0,1)");
  if (!(teacher_decay >= 0.0 && teacher_decay < 1.0)) {
    throw ArgumentError("ssl: teacher_decay must be in [0,1)");
  }
  if (!(beta >= 0.0) || !(lambda >= 0.0)) throw ArgumentError("ssl: beta and lambda must be >= 0");
}

Tensor corrupt_features(const Tensor& x, std::uint64_t seed) {
  Rng rng(seed);
  const std::vector<std::size_t> perm = random_permutation(x.dim(0), rng);
  return diff::embedding_lookup(x, perm);
}

Tensor dgi_loss(const Tensor& h, const Tensor& h_tilde, const Tensor& w_disc) {
  if (h.shape() != h_tilde.shape() || h.rank() != 2) {
    throw ShapeError("dgi_loss: " + diff::to_string(h.shape()) + " vs " +
                     diff::to_string(h_tilde.shape()));
  }
  const Tensor summary = diff::permute(diff::mean(h, 0, true), {1, 0});  // [d, 1]
  const Tensor ws = diff::matmul(w_disc, summary);
  const Tensor pos = diff::log_sigmoid(diff::matmul(h, ws));
  const Tensor neg = diff::log_sigmoid(diff::neg(diff::matmul(h_tilde, ws)));
  return diff::scale(diff::add(diff::mean_all(pos), diff::mean_all(neg)), -0.5);
}

MaskedFeatures mask_nodes(const Tensor& x, const Tensor& mask_token, double rate, std::uint64_t seed) {
  if (!(rate > 0.0 && rate < 1.0)) throw ArgumentError("mask_nodes: rate must be in (0,1)");
  const std::size_t n = x.dim(0);
  const std::size_t d = x.dim(1);
  if (mask_token.numel() != d) throw ShapeError("mask_nodes: token width differs from features");
  const auto count = std::min<std::size_t>(
      n, static_cast<std::size_t>(std::ceil(rate * static_cast<double>(n) - 1e-9)));
  Rng rng(seed);
  std::vector<std::size_t> perm = random_permutation(n, rng);
  MaskedFeatures out;
  out.nodes.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(count));
  std::sort(out.nodes.begin(), out.nodes.end());

  std::vector<double> keep(n, 1.0);
  for (std::size_t v : out.nodes) keep[v] = 0.0;
  std::vector<double> drop(n);
  for (std::size_t v = 0; v < n; ++v) drop[v] = 1.0 - keep[v];
  const Tensor token = diff::reshape(mask_token, {1, d});
  out.features = diff::add(diff::mul(x, Tensor({n, 1}, std::move(keep))),
                           diff::mul(Tensor({n, 1}, std::move(drop)), token));
  return out;
}

Tensor gmae2_loss(const Tensor& x, const Tensor& reconstruction, const Tensor& student_latent,
                  const Tensor& teacher_latent, std::span<const std::size_t> mask, double gamma,
                  double lambda) {
  if (x.shape() != reconstruction.shape() || student_latent.shape() != teacher_latent.shape()) {
    throw ShapeError("gmae2_loss: mismatched operands");
  }
  Tensor loss = Tensor::scalar(0.0);
  if (!mask.empty()) {
    const Tensor cos = diff::cosine_similarity(diff::embedding_lookup(x, mask),
                                               diff::embedding_lookup(reconstruction, mask));
    loss = diff::mean_all(diff::pow(diff::add_scalar(diff::neg(cos), 1.0), gamma));
  }
  if (lambda != 0.0) {
    const Tensor cos = diff::cosine_similarity(teacher_latent.detach(), student_latent);
    const Tensor term = diff::mean_all(diff::pow(diff::add_scalar(diff::neg(cos), 1.0), gamma));
    loss = diff::add(loss, diff::scale(term, lambda));
  }
  return loss;
}

Tensor commitment_loss(const Tensor& h, const Tensor& z) {
  if (h.shape() != z.shape() || h.rank() != 2) {
    throw ShapeError("commitment_loss: " + diff::to_string(h.shape()) + " vs " +
                     diff::to_string(z.shape()));
  }
  const std::size_t n = h.dim(0);
  const std::size_t d = h.dim(1);
  const auto hv = h.values();
  const auto zv = z.values();
  auto unit = std::make_shared<std::vector<double>>(n * d, 0.0);
  double total = 0.0;
  for (std::size_t v = 0; v < n; ++v) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += (hv[v * d + j] - zv[v * d + j]) * (hv[v * d + j] - zv[v * d + j]);
    const double norm = std::sqrt(s);
    total += norm;
    if (norm > 0.0) {
      for (std::size_t j = 0; j < d; ++j) (*unit)[v * d + j] = (hv[v * d + j] - zv[v * d + j]) / norm;
    }
  }
  const double inv_n = n == 0 ? 0.0 : 1.0 / static_cast<double>(n);
  diff::Tape* tape = h.requires_grad() ? diff::active_tape() : nullptr;
  Tensor out({}, std::vector<double>{total * inv_n}, tape != nullptr);
  if (tape) {
    tape->record([h, out, unit, inv_n] {
      const auto g = out.grad();
      if (g.empty()) return;
      auto gh = h.grad_buffer();
      for (std::size_t i = 0; i < gh.size(); ++i) gh[i] += g[0] * inv_n * (*unit)[i];
    });
  }
  return out;
}

void update_teacher(const diff::ParameterList& teacher, const diff::ParameterList& student, double decay) {
  if (teacher.size() != student.size()) throw ShapeError("update_teacher: parameter count differs");
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    const Tensor& t = teacher[i].tensor;
    const Tensor& s = student[i].tensor;
    if (t.shape() != s.shape()) {
      throw ShapeError("update_teacher: " + teacher[i].name + " " + diff::to_string(t.shape()) +
                       " vs " + diff::to_string(s.shape()));
    }
    auto tv = t.data();
    const auto sv = s.values();
    for (std::size_t j = 0; j < tv.size(); ++j) tv[j] = decay * tv[j] + (1.0 - decay) * sv[j];
  }
}

Tensor total_loss(const LossParts& parts, double beta) {
  Tensor total = Tensor::scalar(0.0);
  if (parts.dgi.defined()) total = diff::add(total, parts.dgi);
  if (parts.gmae2.defined()) total = diff::add(total, parts.gmae2);
  if (parts.commit.defined()) total = diff::add(total, diff::scale(parts.commit, beta));
  return total;
}

TokenizerModel TokenizerModel::init(const gnn::GnnConfig& cfg, std::size_t in_dim, Rng& rng) {
  TokenizerModel m;
  m.encoder_config = cfg;
  const std::size_t d = cfg.hidden_dim;
  m.encoder = gnn::init_gnn_params(cfg, in_dim, d, rng);
  m.teacher = m.encoder.clone();
  for (const auto& p : m.teacher.parameters("teacher")) p.tensor.set_requires_grad(false);
  const double limit = std::sqrt(6.0 / static_cast<double>(2 * d));
  std::uniform_real_distribution<double> u(-limit, limit);
  std::vector<double> w(d * d);
  for (double& v : w) v = u(rng);
  m.discriminator = Tensor({d, d}, std::move(w), true);
  gnn::GnnConfig dec;
  dec.layer_kind = gnn::LayerKind::gcn;
  dec.num_layers = 1;
  dec.hidden_dim = d;
  m.decoder = gnn::init_gnn_params(dec, d, in_dim, rng);
  m.mask_token = Tensor::zeros({1, in_dim}, true);
  return m;
}

diff::ParameterList TokenizerModel::trainable() const {
  diff::ParameterList out = encoder.parameters("encoder");
  out.push_back({"discriminator", discriminator});
  for (auto& p : decoder.parameters("decoder")) out.push_back(p);
  out.push_back({"mask_token", mask_token});
  return out;
}

diff::ParameterList TokenizerModel::checkpoint() const {
  diff::ParameterList out = trainable();
  for (auto& p : teacher.parameters("teacher")) out.push_back(p);
  return out;
}

namespace {

struct Quantizer {
  const CodebookSet* codebooks;
  const SslConfig& cfg;

  // Straight-through quantization when the losses read quantized vectors.
  Tensor operator()(const Tensor& h) const {
    if (!codebooks || cfg.losses_on == LossTarget::pre_quantized) return h;
    return rvq_batch(h, *codebooks, cfg.commit_variant).z;
  }
};

}  // namespace

ForwardResult tokenizer_forward(const TokenizerModel& model, const gnn::GraphOperators& ops,
                                const Tensor& x, const CodebookSet* codebooks, const SslConfig& cfg,
                                std::uint64_t step_seed) {
  const gnn::GnnConfig& ec = model.encoder_config;
  Rng drop_rng(sub_seed(step_seed, "dropout"));
  gnn::EncodeOptions train{true, &drop_rng};
  const CodebookSet* cb = cfg.use_rvq ? codebooks : nullptr;
  const Quantizer quant{cb, cfg};

  ForwardResult out;
  const Tensor h = gnn::encode(ops, ec, model.encoder, x, train);
  out.latent = h.to_matrix();
  Tensor z = h;
  if (cb) {
    RvqOutput q = rvq_batch(h, *cb, cfg.commit_variant);
    out.tokens = std::move(q.tokens);
    out.parts.commit = q.commit;
    if (cfg.losses_on == LossTarget::quantized) z = q.z;
  }
  if (cfg.use_dgi) {
    const Tensor xc = corrupt_features(x, sub_seed(step_seed, "corrupt"));
    const Tensor hc = quant(gnn::encode(ops, ec, model.encoder, xc, train));
    out.parts.dgi = dgi_loss(z, hc, model.discriminator);
  }
  if (cfg.use_gmae2) {
    const MaskedFeatures m = mask_nodes(x, model.mask_token, cfg.mask_rate, sub_seed(step_seed, "mask"));
    const Tensor hm = quant(gnn::encode(ops, ec, model.encoder, m.features, train));
    gnn::GnnConfig dec_cfg;
    dec_cfg.layer_kind = gnn::LayerKind::gcn;
    dec_cfg.num_layers = 1;
    const Tensor rec = gnn::encode(ops, dec_cfg, model.decoder, hm);
    Tensor target;
    {
      diff::NoGradScope no_grad;
      target = gnn::encode(ops, ec, model.teacher, x);
    }
    out.parts.gmae2 = gmae2_loss(x, rec, hm, target, m.nodes, cfg.gamma, cfg.lambda);
  }
  out.total = total_loss(out.parts, cfg.beta);
  return out;
}

Matrix embed(const TokenizerModel& model, const gnn::GraphOperators& ops, const Tensor& x) {
  diff::NoGradScope no_grad;
  return gnn::encode(ops, model.encoder_config, model.encoder, x).to_matrix();
}

}  // namespace graphtok::ssl

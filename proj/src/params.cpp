#include "graphtok/params.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "graphtok/binary_io.hpp"
#include "graphtok/errors.hpp"

namespace graphtok::diff {

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point, double h) {
  const bool had_flag = point.requires_grad();
  point.set_requires_grad(true);
  point.zero_grad();
  std::vector<double> analytic(point.numel(), 0.0);
  {
    Tape tape;
    TapeScope scope(&tape);
    const Tensor out = f(point);
    if (out.numel() != 1) {
      point.set_requires_grad(had_flag);
      throw ArgumentError("grad_check: function output has shape " + to_string(out.shape()) +
                          ", expected a scalar");
    }
    tape.backward(out);
    if (point.has_grad()) std::copy(point.grad().begin(), point.grad().end(), analytic.begin());
  }
  point.zero_grad();

  double worst = 0.0;
  NoGradScope no_grad;
  auto x = point.data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double up = f(point).item();
    x[i] = saved - h;
    const double down = f(point).item();
    x[i] = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-6});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  point.set_requires_grad(had_flag);
  return worst;
}

void adam_step(std::span<const Tensor> params, AdamState& state, const AdamConfig& cfg) {
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.numel(), 0.0);
      state.second_moment.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw ArgumentError("adam_step: optimizer state tracks a different parameter count");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto x = params[p].data();
    const auto g = params[p].grad();
    auto& m = state.first_moment[p];
    auto& v = state.second_moment[p];
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double gi = g.empty() ? 0.0 : g[i];
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      x[i] -= cfg.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.eps);
    }
  }
}

Adam::Adam(const ParameterList& params, AdamConfig cfg) : cfg_(cfg) {
  for (const auto& p : params) params_.push_back(p.tensor);
}

void Adam::step() { adam_step(params_, state_, cfg_); }

void Adam::zero_grad() {
  for (const auto& p : params_) p.zero_grad();
}

void zero_grad(const ParameterList& params) {
  for (const auto& p : params) p.tensor.zero_grad();
}

void save_checkpoint(const std::filesystem::path& path, const ParameterList& params) {
  io::BinaryWriter out(path, io::kCheckpointMagic);
  out.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    out.str(name);
    out.u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) out.u64(d);
    out.f64s(t.values());
  }
  out.close();
}

ParameterList load_checkpoint(const std::filesystem::path& path) {
  io::BinaryReader in(path, io::kCheckpointMagic);
  const std::uint32_t count = in.u32();
  ParameterList params;
  params.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = in.str();
    const std::uint32_t rank = in.u32();
    Shape shape(rank);
    for (auto& d : shape) d = in.u64();
    Tensor t(shape);
    in.f64s(t.data());
    params.push_back({std::move(name), t});
  }
  in.expect_end();
  return params;
}

void assign(const ParameterList& dst, const ParameterList& src) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : src) by_name[name] = &t;
  for (const auto& [name, t] : dst) {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint is missing tensor '" + name + "'");
    if (it->second->shape() != t.shape()) {
      throw ShapeError("tensor '" + name + "' has shape " + to_string(it->second->shape()) +
                       " in checkpoint, expected " + to_string(t.shape()));
    }
    std::copy(it->second->values().begin(), it->second->values().end(), t.data().begin());
  }
}

}  // namespace graphtok::diff

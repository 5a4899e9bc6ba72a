#include "graphtok/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "graphtok/errors.hpp"

namespace graphtok::diff {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

Tape* tracking(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = active_tape();
  if (tape == nullptr) return nullptr;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return tape;
  }
  return nullptr;
}

std::size_t norm_axis(int axis, std::size_t rank, const char* op) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

struct Lanes {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

Lanes lanes(const Shape& s, std::size_t axis) {
  Lanes l;
  for (std::size_t i = 0; i < axis; ++i) l.outer *= s[i];
  l.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) l.inner *= s[i];
  return l;
}

struct BroadcastPlan {
  Shape out;
  bool same = false;
  std::vector<std::size_t> a_index;
  std::vector<std::size_t> b_index;
};

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  BroadcastPlan plan;
  if (a == b) {
    plan.out = a;
    plan.same = true;
    return plan;
  }
  const std::size_t r = std::max(a.size(), b.size());
  Shape pa(r, 1), pb(r, 1);
  std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(r - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(r - b.size()));
  plan.out.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + to_string(a) + " with " +
                       to_string(b));
    }
    plan.out[i] = std::max(pa[i], pb[i]);
  }
  std::vector<std::size_t> sa(r, 0), sb(r, 0);
  std::size_t acc_a = 1, acc_b = 1;
  for (std::size_t i = r; i-- > 0;) {
    sa[i] = pa[i] == 1 ? 0 : acc_a;
    sb[i] = pb[i] == 1 ? 0 : acc_b;
    acc_a *= pa[i];
    acc_b *= pb[i];
  }
  const std::size_t n = numel(plan.out);
  plan.a_index.resize(n);
  plan.b_index.resize(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    plan.a_index[flat] = ia;
    plan.b_index[flat] = ib;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < plan.out[d]) break;
      ia -= sa[d] * idx[d];
      ib -= sb[d] * idx[d];
      idx[d] = 0;
    }
  }
  return plan;
}

// f(x, y) -> z ; dfa(x, y, z) -> dz/dx ; dfb(x, y, z) -> dz/dy
template <typename F, typename DA, typename DB>
Tensor binary(const Tensor& a, const Tensor& b, const char* op, F f, DA dfa, DB dfb) {
  auto plan = std::make_shared<BroadcastPlan>(plan_broadcast(a.shape(), b.shape(), op));
  const std::size_t n = numel(plan->out);
  std::vector<double> out(n);
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t ia = plan->same ? i : plan->a_index[i];
    const std::size_t ib = plan->same ? i : plan->b_index[i];
    out[i] = f(av[ia], bv[ib]);
  }
  Tape* tape = tracking({&a, &b});
  Tensor result(plan->out, std::move(out), tape != nullptr);
  if (tape) {
    tape->record([a, b, result, plan, dfa, dfb] {
      const auto g = result.grad();
      if (g.empty()) return;
      const auto av = a.values();
      const auto bv = b.values();
      const auto zv = result.values();
      std::span<double> ga = a.requires_grad() ? a.grad_buffer() : std::span<double>{};
      std::span<double> gb = b.requires_grad() ? b.grad_buffer() : std::span<double>{};
      for (std::size_t i = 0; i < g.size(); ++i) {
        const std::size_t ia = plan->same ? i : plan->a_index[i];
        const std::size_t ib = plan->same ? i : plan->b_index[i];
        if (!ga.empty()) ga[ia] += g[i] * dfa(av[ia], bv[ib], zv[i]);
        if (!gb.empty()) gb[ib] += g[i] * dfb(av[ia], bv[ib], zv[i]);
      }
    });
  }
  return result;
}

// f(x) -> y ; df(x, y) -> dy/dx
template <typename F, typename DF>
Tensor unary(const Tensor& a, F f, DF df) {
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  Tape* tape = tracking({&a});
  Tensor result(a.shape(), std::move(out), tape != nullptr);
  if (tape) {
    tape->record([a, result, df] {
      const auto g = result.grad();
      if (g.empty()) return;
      const auto av = a.values();
      const auto yv = result.values();
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(av[i], yv[i]);
    });
  }
  return result;
}

Shape drop_last(const Shape& s) { return Shape(s.begin(), s.end() - 1); }

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double z) { return -z / y; });
}

Tensor scale(const Tensor& a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  auto mismatch = [&] {
    return ShapeError("matmul: incompatible shapes " + to_string(a.shape()) + " and " +
                      to_string(b.shape()));
  };
  if (a.rank() < 2 || b.rank() < 2) throw mismatch();
  const std::size_t k = a.shape().back();
  if (b.dim(b.rank() - 2) != k) throw mismatch();
  const std::size_t n = b.shape().back();

  std::size_t batch = 1;
  std::size_t m = 0;
  bool shared_rhs = b.rank() == 2;
  Shape out_shape = drop_last(a.shape());
  out_shape.push_back(n);
  if (shared_rhs) {
    m = a.numel() / k;
  } else {
    if (a.rank() != b.rank()) throw mismatch();
    for (std::size_t i = 0; i + 2 < a.rank(); ++i) {
      if (a.dim(i) != b.dim(i)) throw mismatch();
      batch *= a.dim(i);
    }
    m = a.dim(a.rank() - 2);
  }

  std::vector<double> out(numel(out_shape));
  if (shared_rhs) {
    MutMap(out.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n)).noalias() =
        ConstMap(a.values().data(), m, k) * ConstMap(b.values().data(), k, n);
  } else {
    for (std::size_t t = 0; t < batch; ++t) {
      MutMap(out.data() + t * m * n, m, n).noalias() =
          ConstMap(a.values().data() + t * m * k, m, k) *
          ConstMap(b.values().data() + t * k * n, k, n);
    }
  }
  Tape* tape = tracking({&a, &b});
  Tensor result(out_shape, std::move(out), tape != nullptr);
  if (tape) {
    tape->record([a, b, result, batch, m, k, n, shared_rhs] {
      const auto g = result.grad();
      if (g.empty()) return;
      const std::size_t steps = shared_rhs ? 1 : batch;
      const std::size_t rows = m;
      for (std::size_t t = 0; t < steps; ++t) {
        ConstMap gm(g.data() + t * rows * n, rows, n);
        if (a.requires_grad()) {
          MutMap(a.grad_buffer().data() + t * rows * k, rows, k).noalias() +=
              gm * ConstMap(b.values().data() + (shared_rhs ? 0 : t * k * n), k, n).transpose();
        }
        if (b.requires_grad()) {
          MutMap(b.grad_buffer().data() + (shared_rhs ? 0 : t * k * n), k, n).noalias() +=
              ConstMap(a.values().data() + t * rows * k, rows, k).transpose() * gm;
        }
      }
    });
  }
  return result;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ArgumentError("concat: no inputs");
  const Shape& first = parts.front().shape();
  const std::size_t ax = norm_axis(axis, first.size(), "concat");
  Shape out_shape = first;
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == ax || s[i] == first[i];
    if (!ok) {
      throw ShapeError("concat: incompatible shapes " + to_string(first) + " and " + to_string(s));
    }
    out_shape[ax] += s[ax];
  }
  const Lanes l = lanes(out_shape, ax);
  std::vector<double> out(numel(out_shape));
  std::vector<std::size_t> starts;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    starts.push_back(offset);
    const std::size_t len = p.dim(ax);
    const auto pv = p.values();
    for (std::size_t o = 0; o < l.outer; ++o) {
      std::copy_n(pv.data() + o * len * l.inner, len * l.inner,
                  out.data() + (o * l.len + offset) * l.inner);
    }
    offset += len;
  }
  Tape* tape = active_tape();
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (!any) tape = nullptr;
  Tensor result(out_shape, std::move(out), tape != nullptr);
  if (tape) {
    tape->record([parts, result, starts, l, ax] {
      const auto g = result.grad();
      if (g.empty()) return;
      for (std::size_t i = 0; i < parts.size(); ++i) {
        const Tensor& p = parts[i];
        if (!p.requires_grad()) continue;
        const std::size_t len = p.dim(ax);
        auto gp = p.grad_buffer();
        for (std::size_t o = 0; o < l.outer; ++o) {
          const double* src = g.data() + (o * l.len + starts[i]) * l.inner;
          double* dst = gp.data() + o * len * l.inner;
          for (std::size_t j = 0; j < len * l.inner; ++j) dst[j] += src[j];
        }
      }
    });
  }
  return result;
}

Tensor slice(const Tensor& a, int axis, std::size_t begin, std::size_t end) {
  const std::size_t ax = norm_axis(axis, a.rank(), "slice");
  if (begin > end || end > a.dim(ax)) {
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") out of bounds for " + to_string(a.shape()));
  }
  const Lanes l = lanes(a.shape(), ax);
  Shape out_shape = a.shape();
  out_shape[ax] = end - begin;
  const std::size_t len = end - begin;
  std::vector<double> out(numel(out_shape));
  const auto av = a.values();
  for (std::size_t o = 0; o < l.outer; ++o) {
    std::copy_n(av.data() + (o * l.len + begin) * l.inner, len * l.inner,
                out.data() + o * len * l.inner);
  }
  Tape* tape = tracking({&a});
  Tensor result(out_shape, std::move(out), tape != nullptr);
  if (tape) {
    tape->record([a, result, l, begin, len] {
      const auto g = result.grad();
      if (g.empty()) return;
      auto ga = a.grad_buffer();
      for (std::size_t o = 0; o < l.outer; ++o) {
        double* dst = ga.data() + (o * l.len + begin) * l.inner;
        const double* src = g.data() + o * len * l.inner;
        for (std::size_t j = 0; j < len * l.inner; ++j) dst[j] += src[j];
      }
    });
  }
  return result;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  }
  Tape* tape = tracking({&a});
  Tensor result(std::move(shape), std::vector<double>(a.values().begin(), a.values().end()),
                tape != nullptr);
  if (tape) {
    tape->record([a, result] {
      const auto g = result.grad();
      if (g.empty()) return;
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  }
  return result;
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
  const std::size_t r = a.rank();
  std::vector<bool> seen(r, false);
  bool ok = axes.size() == r;
  for (std::size_t i = 0; ok && i < r; ++i) {
    ok = axes[i] < r && !seen[axes[i]];
    if (ok) seen[axes[i]] = true;
  }
  if (!ok) throw ShapeError("permute: invalid axis order for shape " + to_string(a.shape()));

  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = a.dim(axes[i]);
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * a.dim(i);

  const std::size_t n = a.numel();
  auto src_index = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t src = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    (*src_index)[flat] = src;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      src += in_stride[axes[d]];
      if (idx[d] < out_shape[d]) break;
      src -= in_stride[axes[d]] * idx[d];
      idx[d] = 0;
    }
  }
  std::vector<double> out(n);
  const auto av = a.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[(*src_index)[i]];
  Tape* tape = tracking({&a});
  Tensor result(out_shape, std::move(out), tape != nullptr);
  if (tape) {
    tape->record([a, result, src_index] {
      const auto g = result.grad();
      if (g.empty()) return;
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[(*src_index)[i]] += g[i];
    });
  }
  return result;
}

Tensor sum(const Tensor& a, int axis, bool keepdim) {
  const std::size_t ax = norm_axis(axis, a.rank(), "sum");
  const Lanes l = lanes(a.shape(), ax);
  Shape out_shape = a.shape();
  if (keepdim) {
    out_shape[ax] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  }
  std::vector<double> out(l.outer * l.inner, 0.0);
  const auto av = a.values();
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t j = 0; j < l.len; ++j) {
      const double* row = av.data() + (o * l.len + j) * l.inner;
      double* dst = out.data() + o * l.inner;
      for (std::size_t i = 0; i < l.inner; ++i) dst[i] += row[i];
    }
  }
  Tape* tape = tracking({&a});
  Tensor result(out_shape, std::move(out), tape != nullptr);
  if (tape) {
    tape->record([a, result, l] {
      const auto g = result.grad();
      if (g.empty()) return;
      auto ga = a.grad_buffer();
      for (std::size_t o = 0; o < l.outer; ++o) {
        for (std::size_t j = 0; j < l.len; ++j) {
          double* dst = ga.data() + (o * l.len + j) * l.inner;
          const double* src = g.data() + o * l.inner;
          for (std::size_t i = 0; i < l.inner; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return result;
}

Tensor mean(const Tensor& a, int axis, bool keepdim) {
  const std::size_t ax = norm_axis(axis, a.rank(), "mean");
  const std::size_t len = a.dim(ax);
  if (len == 0) throw ShapeError("mean: empty axis in " + to_string(a.shape()));
  return scale(sum(a, axis, keepdim), 1.0 / static_cast<double>(len));
}

Tensor sum_all(const Tensor& a) {
  double s = 0.0;
  for (double x : a.values()) s += x;
  Tape* tape = tracking({&a});
  Tensor result(Shape{}, {s}, tape != nullptr);
  if (tape) {
    tape->record([a, result] {
      const auto g = result.grad();
      if (g.empty()) return;
      auto ga = a.grad_buffer();
      for (double& x : ga) x += g[0];
    });
  }
  return result;
}

Tensor mean_all(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean_all: empty tensor");
  return scale(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor softmax(const Tensor& a, int axis, double temperature) {
  if (!(temperature > 0.0)) throw ArgumentError("softmax: temperature must be positive");
  const std::size_t ax = norm_axis(axis, a.rank(), "softmax");
  const Lanes l = lanes(a.shape(), ax);
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t i = 0; i < l.inner; ++i) {
      const std::size_t base = o * l.len * l.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < l.len; ++j) mx = std::max(mx, av[base + j * l.inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < l.len; ++j) {
        const double e = std::exp((av[base + j * l.inner] - mx) / temperature);
        out[base + j * l.inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < l.len; ++j) out[base + j * l.inner] /= z;
    }
  }
  Tape* tape = tracking({&a});
  Tensor result(a.shape(), std::move(out), tape != nullptr);
  if (tape) {
    tape->record([a, result, l, temperature] {
      const auto g = result.grad();
      if (g.empty()) return;
      const auto y = result.values();
      auto ga = a.grad_buffer();
      for (std::size_t o = 0; o < l.outer; ++o) {
        for (std::size_t i = 0; i < l.inner; ++i) {
          const std::size_t base = o * l.len * l.inner + i;
          double dot = 0.0;
          for (std::size_t j = 0; j < l.len; ++j) {
            dot += g[base + j * l.inner] * y[base + j * l.inner];
          }
          for (std::size_t j = 0; j < l.len; ++j) {
            const std::size_t p = base + j * l.inner;
            ga[p] += y[p] * (g[p] - dot) / temperature;
          }
        }
      }
    });
  }
  return result;
}

Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps) {
  if (a.rank() == 0) throw ShapeError("layer_norm: scalar input");
  const std::size_t d = a.shape().back();
  if (gain.numel() != d || bias.numel() != d) {
    throw ShapeError("layer_norm: input " + to_string(a.shape()) + " with gain " +
                     to_string(gain.shape()) + " and bias " + to_string(bias.shape()));
  }
  const std::size_t rows = d == 0 ? 0 : a.numel() / d;
  const auto av = a.values();
  const auto gv = gain.values();
  const auto bv = bias.values();
  auto xhat = std::make_shared<std::vector<double>>(av.size());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(av.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = av.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += x[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= static_cast<double>(d);
    const double s = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = s;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (x[j] - mu) * s;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  Tape* tape = tracking({&a, &gain, &bias});
  Tensor result(a.shape(), std::move(out), tape != nullptr);
  if (tape) {
    tape->record([a, gain, bias, result, xhat, rstd, d, rows] {
      const auto g = result.grad();
      if (g.empty()) return;
      const auto gv = gain.values();
      std::span<double> ga = a.requires_grad() ? a.grad_buffer() : std::span<double>{};
      std::span<double> gg = gain.requires_grad() ? gain.grad_buffer() : std::span<double>{};
      std::span<double> gb = bias.requires_grad() ? bias.grad_buffer() : std::span<double>{};
      std::vector<double> dh(d);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* gy = g.data() + r * d;
        const double* h = xhat->data() + r * d;
        double mean_dh = 0.0;
        double mean_dh_h = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          dh[j] = gy[j] * gv[j];
          mean_dh += dh[j];
          mean_dh_h += dh[j] * h[j];
          if (!gg.empty()) gg[j] += gy[j] * h[j];
          if (!gb.empty()) gb[j] += gy[j];
        }
        mean_dh /= static_cast<double>(d);
        mean_dh_h /= static_cast<double>(d);
        if (!ga.empty()) {
          for (std::size_t j = 0; j < d; ++j) {
            ga[r * d + j] += (*rstd)[r] * (dh[j] - mean_dh - h[j] * mean_dh_h);
          }
        }
      }
    });
  }
  return result;
}

Tensor elu(const Tensor& a, double alpha) {
  return unary(
      a, [alpha](double x) { return x > 0.0 ? x : alpha * std::expm1(x); },
      [alpha](double x, double y) { return x > 0.0 ? 1.0 : y + alpha; });
}

Tensor relu(const Tensor& a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor leaky_relu(const Tensor& a, double slope) {
  return unary(
      a, [slope](double x) { return x > 0.0 ? x : slope * x; },
      [slope](double x, double) { return x > 0.0 ? 1.0 : slope; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor log_sigmoid(const Tensor& a) {
  return unary(
      a, [](double x) { return std::min(x, 0.0) - std::log1p(std::exp(-std::abs(x))); },
      [](double x, double) {
        // d/dx log sigmoid(x) = sigmoid(-x)
        if (x >= 0.0) {
          const double e = std::exp(-x);
          return e / (1.0 + e);
        }
        return 1.0 / (1.0 + std::exp(x));
      });
}

Tensor exp(const Tensor& a) {
  return unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a, double eps) {
  return unary(
      a, [eps](double x) { return std::log(std::max(x, eps)); },
      [eps](double x, double) { return x > eps ? 1.0 / x : 0.0; });
}

Tensor pow(const Tensor& a, double p) {
  if (!(p >= 1.0)) throw ArgumentError("pow: exponent must be >= 1");
  return unary(
      a, [p](double x) { return x > 0.0 ? std::pow(x, p) : 0.0; },
      [p](double x, double) { return x > 0.0 ? p * std::pow(x, p - 1.0) : 0.0; });
}

Tensor l2_norm(const Tensor& a, double eps) {
  if (a.rank() == 0) throw ShapeError("l2_norm: scalar input");
  const std::size_t d = a.shape().back();
  const std::size_t rows = d == 0 ? 0 : a.numel() / d;
  const auto av = a.values();
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += av[r * d + j] * av[r * d + j];
    out[r] = std::max(std::sqrt(s), eps);
  }
  Tape* tape = tracking({&a});
  Tensor result(drop_last(a.shape()), std::move(out), tape != nullptr);
  if (tape) {
    tape->record([a, result, d, rows, eps] {
      const auto g = result.grad();
      if (g.empty()) return;
      const auto av = a.values();
      const auto y = result.values();
      auto ga = a.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += av[r * d + j] * av[r * d + j];
        if (std::sqrt(s) <= eps) continue;
        for (std::size_t j = 0; j < d; ++j) ga[r * d + j] += g[r] * av[r * d + j] / y[r];
      }
    });
  }
  return result;
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b, double eps) {
  if (a.shape() != b.shape() || a.rank() == 0) {
    throw ShapeError("cosine_similarity: shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
  }
  const std::size_t d = a.shape().back();
  const std::size_t rows = d == 0 ? 0 : a.numel() / d;
  const auto av = a.values();
  const auto bv = b.values();
  auto na = std::make_shared<std::vector<double>>(rows);
  auto nb = std::make_shared<std::vector<double>>(rows);
  auto clamped_a = std::make_shared<std::vector<char>>(rows);
  auto clamped_b = std::make_shared<std::vector<char>>(rows);
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double dot = 0.0, sa = 0.0, sb = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double x = av[r * d + j];
      const double y = bv[r * d + j];
      dot += x * y;
      sa += x * x;
      sb += y * y;
    }
    const double ra = std::sqrt(sa);
    const double rb = std::sqrt(sb);
    (*clamped_a)[r] = ra <= eps;
    (*clamped_b)[r] = rb <= eps;
    (*na)[r] = std::max(ra, eps);
    (*nb)[r] = std::max(rb, eps);
    out[r] = dot / ((*na)[r] * (*nb)[r]);
  }
  Tape* tape = tracking({&a, &b});
  Tensor result(drop_last(a.shape()), std::move(out), tape != nullptr);
  if (tape) {
    tape->record([a, b, result, na, nb, clamped_a, clamped_b, d, rows] {
      const auto g = result.grad();
      if (g.empty()) return;
      const auto av = a.values();
      const auto bv = b.values();
      const auto c = result.values();
      std::span<double> ga = a.requires_grad() ? a.grad_buffer() : std::span<double>{};
      std::span<double> gb = b.requires_grad() ? b.grad_buffer() : std::span<double>{};
      for (std::size_t r = 0; r < rows; ++r) {
        const double inv = 1.0 / ((*na)[r] * (*nb)[r]);
        const double ca = (*clamped_a)[r] ? 0.0 : c[r] / ((*na)[r] * (*na)[r]);
        const double cb = (*clamped_b)[r] ? 0.0 : c[r] / ((*nb)[r] * (*nb)[r]);
        for (std::size_t j = 0; j < d; ++j) {
          const double x = av[r * d + j];
          const double y = bv[r * d + j];
          if (!ga.empty()) ga[r * d + j] += g[r] * (y * inv - ca * x);
          if (!gb.empty()) gb[r * d + j] += g[r] * (x * inv - cb * y);
        }
      }
    });
  }
  return result;
}

Tensor embedding_lookup(const Tensor& table, std::span<const std::size_t> indices) {
  if (table.rank() == 0) throw ShapeError("embedding_lookup: scalar table");
  const std::size_t vocab = table.dim(0);
  const std::size_t width = vocab == 0 ? 0 : table.numel() / vocab;
  Shape out_shape = table.shape();
  out_shape[0] = indices.size();
  std::vector<double> out(indices.size() * width);
  const auto tv = table.values();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= vocab) {
      throw IndexError("embedding_lookup: index " + std::to_string(indices[i]) +
                       " out of range for table with " + std::to_string(vocab) + " rows");
    }
    std::copy_n(tv.data() + indices[i] * width, width, out.data() + i * width);
  }
  Tape* tape = tracking({&table});
  Tensor result(out_shape, std::move(out), tape != nullptr);
  if (tape) {
    auto idx = std::make_shared<std::vector<std::size_t>>(indices.begin(), indices.end());
    tape->record([table, result, idx, width] {
      const auto g = result.grad();
      if (g.empty()) return;
      auto gt = table.grad_buffer();
      for (std::size_t i = 0; i < idx->size(); ++i) {
        double* dst = gt.data() + (*idx)[i] * width;
        const double* src = g.data() + i * width;
        for (std::size_t j = 0; j < width; ++j) dst[j] += src[j];
      }
    });
  }
  return result;
}

Tensor cross_entropy_with_logits(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size() || labels.empty()) {
    throw ShapeError("cross_entropy_with_logits: logits " + to_string(logits.shape()) + " with " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = logits.dim(0);
  const std::size_t c = logits.dim(1);
  const auto lv = logits.values();
  auto probs = std::make_shared<std::vector<double>>(n * c);
  auto ys = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw IndexError("cross_entropy_with_logits: label " + std::to_string(y) +
                       " out of range for " + std::to_string(c) + " classes");
    }
    const double* row = lv.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) (*probs)[i * c + j] = std::exp(row[j] - lse);
    total += lse - row[static_cast<std::size_t>(y)];
  }
  Tape* tape = tracking({&logits});
  Tensor result(Shape{}, {total / static_cast<double>(n)}, tape != nullptr);
  if (tape) {
    tape->record([logits, result, probs, ys, n, c] {
      const auto g = result.grad();
      if (g.empty()) return;
      auto gl = logits.grad_buffer();
      const double s = g[0] / static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
          const double onehot = static_cast<int>(j) == (*ys)[i] ? 1.0 : 0.0;
          gl[i * c + j] += s * ((*probs)[i * c + j] - onehot);
        }
      }
    });
  }
  return result;
}

Tensor dropout(const Tensor& a, double rate, Rng& rng) {
  if (rate <= 0.0) return a;
  if (rate >= 1.0) throw ArgumentError("dropout: rate must be < 1");
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<double> mask(a.numel());
  const double keep = 1.0 / (1.0 - rate);
  for (double& m : mask) m = unif(rng) < rate ? 0.0 : keep;
  return mul(a, Tensor(a.shape(), std::move(mask)));
}

Tensor spmm(const NormalizedAdjacency& p, const Tensor& x) {
  if (x.rank() != 2 || x.dim(0) != p.num_nodes) {
    throw ShapeError("spmm: sparse operator over " + std::to_string(p.num_nodes) +
                     " nodes applied to " + to_string(x.shape()));
  }
  const std::size_t f = x.dim(1);
  const auto xv = x.values();
  std::vector<double> out(p.num_nodes * f, 0.0);
  for (std::size_t i = 0; i < p.num_nodes; ++i) {
    double* dst = out.data() + i * f;
    for (std::size_t e = p.offsets[i]; e < p.offsets[i + 1]; ++e) {
      const double w = p.values[e];
      const double* src = xv.data() + static_cast<std::size_t>(p.cols[e]) * f;
      for (std::size_t j = 0; j < f; ++j) dst[j] += w * src[j];
    }
  }
  Tape* tape = tracking({&x});
  Tensor result({p.num_nodes, f}, std::move(out), tape != nullptr);
  if (tape) {
    auto op = std::make_shared<const NormalizedAdjacency>(p);
    tape->record([op, x, result, f] {
      const auto g = result.grad();
      if (g.empty()) return;
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < op->num_nodes; ++i) {
        const double* src = g.data() + i * f;
        for (std::size_t e = op->offsets[i]; e < op->offsets[i + 1]; ++e) {
          double* dst = gx.data() + static_cast<std::size_t>(op->cols[e]) * f;
          for (std::size_t j = 0; j < f; ++j) dst[j] += op->values[e] * src[j];
        }
      }
    });
  }
  return result;
}

Tensor segment_softmax(const Tensor& scores, std::span<const std::size_t> offsets) {
  if (scores.rank() != 1 || offsets.empty() || offsets.back() != scores.numel()) {
    throw ShapeError("segment_softmax: scores " + to_string(scores.shape()) +
                     " do not match the segment offsets");
  }
  auto segs = std::make_shared<std::vector<std::size_t>>(offsets.begin(), offsets.end());
  const auto sv = scores.values();
  std::vector<double> out(sv.size());
  for (std::size_t s = 0; s + 1 < segs->size(); ++s) {
    const std::size_t lo = (*segs)[s], hi = (*segs)[s + 1];
    if (lo == hi) continue;
    const double mx = *std::max_element(sv.begin() + static_cast<std::ptrdiff_t>(lo),
                                        sv.begin() + static_cast<std::ptrdiff_t>(hi));
    double z = 0.0;
    for (std::size_t e = lo; e < hi; ++e) z += (out[e] = std::exp(sv[e] - mx));
    for (std::size_t e = lo; e < hi; ++e) out[e] /= z;
  }
  Tape* tape = tracking({&scores});
  Tensor result(scores.shape(), std::move(out), tape != nullptr);
  if (tape) {
    tape->record([scores, result, segs] {
      const auto g = result.grad();
      if (g.empty()) return;
      const auto y = result.values();
      auto gs = scores.grad_buffer();
      for (std::size_t s = 0; s + 1 < segs->size(); ++s) {
        const std::size_t lo = (*segs)[s], hi = (*segs)[s + 1];
        double dot = 0.0;
        for (std::size_t e = lo; e < hi; ++e) dot += g[e] * y[e];
        for (std::size_t e = lo; e < hi; ++e) gs[e] += y[e] * (g[e] - dot);
      }
    });
  }
  return result;
}

Tensor segment_weighted_sum(std::span<const std::size_t> offsets, std::span<const NodeId> cols,
                            const Tensor& weights, const Tensor& x) {
  if (offsets.empty() || weights.rank() != 1 || weights.numel() != cols.size() ||
      offsets.back() != cols.size() || x.rank() != 2) {
    throw ShapeError("segment_weighted_sum: weights " + to_string(weights.shape()) + ", values " +
                     to_string(x.shape()) + ", " + std::to_string(cols.size()) + " arcs");
  }
  const std::size_t rows = offsets.size() - 1;
  const std::size_t f = x.dim(1);
  for (NodeId c : cols) {
    if (c >= x.dim(0)) throw IndexError("segment_weighted_sum: column index out of range");
  }
  auto segs = std::make_shared<std::vector<std::size_t>>(offsets.begin(), offsets.end());
  auto idx = std::make_shared<std::vector<NodeId>>(cols.begin(), cols.end());
  const auto wv = weights.values();
  const auto xv = x.values();
  std::vector<double> out(rows * f, 0.0);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t e = (*segs)[i]; e < (*segs)[i + 1]; ++e) {
      const double* src = xv.data() + static_cast<std::size_t>((*idx)[e]) * f;
      for (std::size_t j = 0; j < f; ++j) out[i * f + j] += wv[e] * src[j];
    }
  }
  Tape* tape = tracking({&weights, &x});
  Tensor result({rows, f}, std::move(out), tape != nullptr);
  if (tape) {
    tape->record([weights, x, result, segs, idx, rows, f] {
      const auto g = result.grad();
      if (g.empty()) return;
      const auto wv = weights.values();
      const auto xv = x.values();
      std::span<double> gw = weights.requires_grad() ? weights.grad_buffer() : std::span<double>{};
      std::span<double> gx = x.requires_grad() ? x.grad_buffer() : std::span<double>{};
      for (std::size_t i = 0; i < rows; ++i) {
        const double* gi = g.data() + i * f;
        for (std::size_t e = (*segs)[i]; e < (*segs)[i + 1]; ++e) {
          const std::size_t col = (*idx)[e];
          if (!gw.empty()) {
            double dot = 0.0;
            for (std::size_t j = 0; j < f; ++j) dot += gi[j] * xv[col * f + j];
            gw[e] += dot;
          }
          if (!gx.empty()) {
            for (std::size_t j = 0; j < f; ++j) gx[col * f + j] += wv[e] * gi[j];
          }
        }
      }
    });
  }
  return result;
}

}  // namespace graphtok::diff

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "graphtok/tensor.hpp"

namespace graphtok::diff {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

using ParameterList = std::vector<NamedTensor>;

// Compares the reverse-mode gradient of scalar `f` at `point` with central
// differences of step `h`, perturbing `point` in place. Returns the worst
// elementwise |a - b| / max(|a|, |b|, 1e-6); the floor keeps gradients that are
// exactly zero from being judged on finite-difference roundoff alone.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point,
                  double h = 1e-5);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::uint64_t step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
};

// One bias-corrected Adam update of every tensor in `params` from its
// accumulated gradient (a missing gradient counts as zero).
void adam_step(std::span<const Tensor> params, AdamState& state, const AdamConfig& cfg);

class Adam {
 public:
  Adam(const ParameterList& params, AdamConfig cfg);

  void step();
  void zero_grad();
  const AdamState& state() const { return state_; }

 private:
  std::vector<Tensor> params_;
  AdamState state_;
  AdamConfig cfg_;
};

void zero_grad(const ParameterList& params);

// Named-tensor container: header, u32 count, then per tensor the name,
// u32 rank, u64 dims and raw f64 values.
void save_checkpoint(const std::filesystem::path& path, const ParameterList& params);
ParameterList load_checkpoint(const std::filesystem::path& path);

// Copies values by name into `dst`. Every destination name must be present
// in `src` with an identical shape.
void assign(const ParameterList& dst, const ParameterList& src);

}  // namespace graphtok::diff

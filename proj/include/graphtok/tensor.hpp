#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "graphtok/matrix.hpp"

namespace graphtok::diff {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

// Clamp used wherever a log or a norm would otherwise hit an exact zero.
inline constexpr double kEpsilon = 1e-12;

// Dense real array. Copies are shallow: two handles to the same tensor share
// values and gradient, which is how parameters are shared between modules.
class Tensor {
 public:
  Tensor() = default;
  // Zero-filled.
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad);

  static Tensor scalar(double value);
  static Tensor from_matrix(const Matrix& m, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const { return shape().at(axis); }
  std::size_t numel() const;

  std::span<const double> values() const;
  std::span<double> data() const;
  double item() const;
  Matrix to_matrix() const;

  bool requires_grad() const;
  void set_requires_grad(bool flag) const;
  bool has_grad() const;
  // Empty span until a backward pass has written to this tensor.
  std::span<const double> grad() const;
  // Allocates a zeroed gradient buffer on first use.
  std::span<double> grad_buffer() const;
  void zero_grad() const;

  // Value copy that is a constant with respect to every tape.
  Tensor detach() const;
  // Deep copy of values, preserving requires_grad but not the gradient.
  Tensor clone() const;

  bool same_storage(const Tensor& other) const { return s_ == other.s_; }

 private:
  struct Storage {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> s_;
};

// Ordered record of executed primitives. Backward replays the adjoint
// closures strictly in reverse execution order; gradients accumulate.
class Tape {
 public:
  using Adjoint = std::function<void()>;

  void record(Adjoint adjoint) { entries_.push_back(std::move(adjoint)); }
  void backward(const Tensor& loss);
  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

 private:
  std::vector<Adjoint> entries_;
};

// Tape that primitives on this thread record into, or nullptr.
Tape* active_tape();

// Installs `tape` as the active tape for the current thread until destroyed.
// Passing nullptr suspends recording (evaluation / teacher forward passes).
class TapeScope {
 public:
  explicit TapeScope(Tape* tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

class NoGradScope : public TapeScope {
 public:
  NoGradScope() : TapeScope(nullptr) {}
};

}  // namespace graphtok::diff

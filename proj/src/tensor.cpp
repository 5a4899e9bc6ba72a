#include "graphtok/tensor.hpp"

#include <sstream>

#include "graphtok/errors.hpp"

namespace graphtok::diff {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape) : s_(std::make_shared<Storage>()) {
  s_->values.assign(diff::numel(shape), 0.0);
  s_->shape = std::move(shape);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  Tensor t(std::move(shape));
  t.set_requires_grad(requires_grad);
  return t;
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : s_(std::make_shared<Storage>()) {
  if (values.size() != diff::numel(shape)) {
    throw ShapeError("tensor of shape " + diff::to_string(shape) + " given " +
                     std::to_string(values.size()) + " values");
  }
  s_->shape = std::move(shape);
  s_->values = std::move(values);
  s_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

Tensor Tensor::from_matrix(const Matrix& m, bool requires_grad) {
  return Tensor({m.rows, m.cols}, m.data, requires_grad);
}

const Shape& Tensor::shape() const { return s_->shape; }
std::size_t Tensor::numel() const { return s_->values.size(); }
std::span<const double> Tensor::values() const { return s_->values; }
std::span<double> Tensor::data() const { return s_->values; }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + diff::to_string(shape()));
  return s_->values[0];
}

Matrix Tensor::to_matrix() const {
  if (rank() != 2) throw ShapeError("to_matrix() needs rank 2, got " + diff::to_string(shape()));
  return Matrix(dim(0), dim(1), s_->values);
}

bool Tensor::requires_grad() const { return s_ && s_->requires_grad; }
void Tensor::set_requires_grad(bool flag) const { s_->requires_grad = flag; }
bool Tensor::has_grad() const { return s_ && !s_->grad.empty(); }
std::span<const double> Tensor::grad() const { return s_->grad; }

std::span<double> Tensor::grad_buffer() const {
  if (s_->grad.empty()) s_->grad.assign(s_->values.size(), 0.0);
  return s_->grad;
}

void Tensor::zero_grad() const { s_->grad.clear(); }

Tensor Tensor::detach() const { return Tensor(s_->shape, s_->values, false); }

Tensor Tensor::clone() const { return Tensor(s_->shape, s_->values, s_->requires_grad); }

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ArgumentError("backward needs a scalar loss, got shape " + to_string(loss.shape()));
  }
  if (!loss.requires_grad()) return;
  loss.grad_buffer()[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
}

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape* active_tape() { return g_active_tape; }

TapeScope::TapeScope(Tape* tape) : previous_(g_active_tape) { g_active_tape = tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

}  // namespace graphtok::diff

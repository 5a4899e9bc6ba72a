#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "graphtok/graph.hpp"
#include "graphtok/random.hpp"
#include "graphtok/tensor.hpp"

// Differentiable primitives. Each op computes its forward value and, when a
// tape is active and an input requires a gradient, records its exact adjoint.
// Negative axes count from the end.
namespace graphtok::diff {

// Elementwise binary ops with NumPy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);

// [m,k]x[k,n]; [..,m,k]x[k,n] (rhs shared across leading dims);
// [B,m,k]x[B,k,n] batched.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, std::size_t begin, std::size_t end);
Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes);

Tensor sum(const Tensor& a, int axis, bool keepdim = false);
Tensor mean(const Tensor& a, int axis, bool keepdim = false);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

Tensor softmax(const Tensor& a, int axis, double temperature = 1.0);
// Normalizes over the last axis, then applies gain and bias of shape [d].
Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

Tensor elu(const Tensor& a, double alpha = 1.0);
Tensor relu(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope);
Tensor sigmoid(const Tensor& a);
Tensor log_sigmoid(const Tensor& a);
Tensor exp(const Tensor& a);
// log(max(x, eps)); the gradient is zero where the clamp is active.
Tensor log(const Tensor& a, double eps = kEpsilon);
// max(x, 0)^p for p >= 1.
Tensor pow(const Tensor& a, double p);

// Euclidean norm over the last axis, clamped below at eps.
Tensor l2_norm(const Tensor& a, double eps = kEpsilon);
// Row-wise cosine over the last axis; each norm is clamped at eps, so a zero
// row has similarity 0 with anything.
Tensor cosine_similarity(const Tensor& a, const Tensor& b, double eps = kEpsilon);

// Rows of `table` (first axis) selected by `indices`.
Tensor embedding_lookup(const Tensor& table, std::span<const std::size_t> indices);

// Mean over rows of -log softmax(logits)[label].
Tensor cross_entropy_with_logits(const Tensor& logits, std::span<const int> labels);

// Inverted dropout; identity when rate == 0.
Tensor dropout(const Tensor& a, double rate, Rng& rng);

// P * X for a constant sparse P.
Tensor spmm(const NormalizedAdjacency& p, const Tensor& x);

// Softmax of per-arc scores within each CSR row segment.
Tensor segment_softmax(const Tensor& scores, std::span<const std::size_t> offsets);
// out[i] = sum over arcs e of row i of weights[e] * x[cols[e]].
Tensor segment_weighted_sum(std::span<const std::size_t> offsets, std::span<const NodeId> cols,
                            const Tensor& weights, const Tensor& x);

}  // namespace graphtok::diff

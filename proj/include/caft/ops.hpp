#pragma once

// Differentiable operations over caft::Tensor.
//
// Broadcasting is limited to leading-batch expansion: the second operand of
// add/mul/masked_fill may have a shape equal to a suffix of the first
// operand's shape. Anything else is a ShapeError naming the operation.

#include <cstdint>
#include <vector>

#include "caft/tensor.hpp"

namespace caft::ops {

/// [..., m, k] x [k, n] or [..., m, k] x [..., k, n] with equal leading dims.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
/// Multiplies by a single-element tensor (differentiable in both operands).
Tensor scale(const Tensor& a, const Tensor& factor);
/// Axis permutation; output axis i is input axis perm[i].
Tensor transpose(const Tensor& a, const std::vector<std::size_t>& perm);
/// Swaps the last two axes.
Tensor transpose_last2(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);
/// Half-open range [begin, end) along `axis`.
Tensor slice(const Tensor& a, int axis, std::size_t begin, std::size_t end);
Tensor softmax_last(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor log(const Tensor& a);
Tensor exp(const Tensor& a);
/// Log-sigmoid computed as -softplus(-x) without forming sigmoid(x).
Tensor log_sigmoid(const Tensor& a);
/// Normalizes over the last axis; `gain`/`bias` (shape [last]) may be undefined.
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
/// Exact (erf) GELU.
Tensor gelu(const Tensor& a);
/// Reductions drop `axis` (a rank-1 input reduces to shape [1]).
Tensor mean_axis(const Tensor& a, int axis);
Tensor sum_axis(const Tensor& a, int axis);
Tensor l2_normalize_last(const Tensor& a);
/// Rows of `table` ([V, D]) gathered by `ids`; output shape is `lead` + [D].
Tensor embedding_lookup(const Tensor& table, const std::vector<std::size_t>& ids, Shape lead);
Tensor embedding_lookup(const Tensor& table, const std::vector<std::size_t>& ids);
/// Entries where `mask` is nonzero are replaced by `value` (mask: suffix shape of x).
Tensor masked_fill(const Tensor& x, const std::vector<std::uint8_t>& mask, const Shape& mask_shape, double value);

/// Sum of all entries as a [1] tensor.
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
/// Sum of all entries added in ascending order, so any permutation of `a` gives the same bits.
Tensor sum_unordered(const Tensor& a);

}  // namespace caft::ops

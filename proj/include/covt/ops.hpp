// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "covt/tensor.hpp"

namespace covt {

/// Numpy-style broadcast of two shapes: trailing axes aligned, each pair
/// equal or one.
Shape broadcast_shapes(const Shape& a, const Shape& b);

// Elementwise, with broadcasting. Backward reduces over broadcast axes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& x, double s);
Tensor mul_scalar(const Tensor& x, double s);

Tensor relu(const Tensor& x);
/// Exact (erf) GELU.
Tensor gelu(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);

/// [.., M, K] x [.., K, P] -> [.., M, P]; leading axes broadcast.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm);
Tensor transpose(const Tensor& x, int axis0, int axis1);
Tensor broadcast_to(const Tensor& x, const Shape& shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);
/// Half-open range [begin, end) along `axis`.
Tensor slice(const Tensor& x, int axis, std::size_t begin, std::size_t end);

/// Sum of every element, as a scalar.
Tensor sum(const Tensor& x);
Tensor sum_over_axis(const Tensor& x, int axis, bool keep);
/// Arithmetic mean along `axis`. The reduction is evaluated in sorted order
/// relative to the smallest element, so it is invariant to permutations of
/// the axis and returns the common value exactly when all entries agree.
Tensor mean_over_axis(const Tensor& x, int axis, bool keep);

/// max-shifted softmax along `axis`.
Tensor softmax(const Tensor& x, int axis);
Tensor log_softmax(const Tensor& x, int axis);

/// Normalizes over the last axis with population variance.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);

/// out[i] = x[i, index[i]] for x viewed as [rows, K].
Tensor take_along_last(const Tensor& x, std::span<const std::size_t> index);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

/// Tape op kinds for which a gradient check must exist.
const std::vector<std::string>& differentiable_ops();

namespace detail {

std::size_t normalize_axis(int axis, std::size_t rank);

}  // namespace detail

}  // namespace covt

#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

#include "oraclesage/rng.hpp"
#include "oraclesage/tensor.hpp"

namespace oraclesage {

enum class Mode { Train, Eval };

// Linear algebra. Rank-1 operands are read as a single row.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
/// scale * x + shift.
Tensor affine(const Tensor& x, double scale, double shift = 0.0);

/// Adds a length-n bias to every row of an m x n matrix.
Tensor add_row(const Tensor& x, const Tensor& bias);
/// Multiplies row r of an m x n matrix by column[r] (column is m x 1 or m).
Tensor mul_col(const Tensor& x, const Tensor& column);

// Reductions.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Column-wise sum over rows: m x n -> 1 x n.
Tensor sum_rows(const Tensor& x);
/// Column-wise mean over rows: m x n -> 1 x n.
Tensor mean_rows(const Tensor& x);
/// Row-wise mean over columns: m x n -> m x 1.
Tensor mean_cols(const Tensor& x);
/// Sum of absolute values; subgradient 0 at exact zeros.
Tensor l1_norm(const Tensor& x);
/// Sum of squares.
Tensor frobenius_sq(const Tensor& x);

// Structure.
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end);
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);
/// out[index[e]] += x[e] over rows; out has `out_rows` rows.
Tensor scatter_add_rows(const Tensor& x, std::span<const std::size_t> index, std::size_t out_rows);
/// Gradient-blocking view of the same values.
Tensor stop_gradient(const Tensor& x);

// Normalization.
/// Softmax along `axis` with max subtraction.
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x, std::size_t axis);
/// Softmax over the rows sharing a segment id, independently per column.
Tensor segment_softmax(const Tensor& logits, std::span<const std::size_t> segment,
                       std::size_t num_segments);
/// Normalizes over the last axis, then applies gain and bias (each of that length).
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// Activations.
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor leaky_relu(const Tensor& x, double slope = 0.2);
/// Exact (erf) GELU.
Tensor gelu(const Tensor& x);

/// Inverted dropout: identity in eval mode, scaled survivors in train mode.
Tensor dropout(const Tensor& x, double rate, Mode mode, Rng& rng);

// Losses.
/// -log softmax(logits)[label]; logits is a single row.
Tensor cross_entropy(const Tensor& logits, std::size_t label);
/// Summed binary cross-entropy over all elements, with logits.
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets);

/// Per-head dot products: x is N x (H*k), a is H x k, out[n,h] = <x[n, h*k:(h+1)*k], a[h]>.
Tensor head_dot(const Tensor& x, const Tensor& a);

}  // namespace oraclesage

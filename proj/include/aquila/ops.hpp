// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "aquila/autograd.hpp"
#include "aquila/tensor.hpp"

// Differentiable operations on tape variables. Each op checks its shapes,
// computes the forward value eagerly and records a backward closure only
// when at least one input requires a gradient.
namespace aquila::ops {

// y = x W + b over the trailing axis of x. b may be omitted.
template <typename Real>
Var<Real> linear(Var<Real> x, Var<Real> w, std::optional<Var<Real>> b);

template <typename Real>
Var<Real> linear(Var<Real> x, Var<Real> w, Var<Real> b) {
  return linear(x, w, std::optional<Var<Real>>(b));
}

template <typename Real>
Var<Real> linear(Var<Real> x, Var<Real> w) {
  return linear(x, w, std::optional<Var<Real>>());
}

// [m,k] x [k,n] -> [m,n]
template <typename Real>
Var<Real> matmul(Var<Real> a, Var<Real> b);

// [m,k] x [n,k]^T -> [m,n]
template <typename Real>
Var<Real> matmul_nt(Var<Real> a, Var<Real> b);

template <typename Real>
Var<Real> add(Var<Real> a, Var<Real> b);

template <typename Real>
Var<Real> scale(Var<Real> x, Real factor);

template <typename Real>
Var<Real> gelu(Var<Real> x);

// Softmax over the trailing axis.
template <typename Real>
Var<Real> softmax(Var<Real> x);

// Row-wise softmax of a square [T,T] score matrix where row i only sees
// columns 0..i. Masked entries are exactly zero.
template <typename Real>
Var<Real> causal_softmax(Var<Real> scores);

// Normalise over the trailing axis, then scale/shift by gamma and beta.
template <typename Real>
Var<Real> layer_norm(Var<Real> x, Var<Real> gamma, Var<Real> beta, Real eps = Real(1e-5));

// Channel-wise layer norm of a [C,H,W] map: each spatial cell is normalised
// across its C channels.
template <typename Real>
Var<Real> channel_layer_norm(Var<Real> x, Var<Real> gamma, Var<Real> beta,
                             Real eps = Real(1e-6));

// 2-D convolution of x[C,H,W] with w[O,C,k,k] and bias b[O].
template <typename Real>
Var<Real> conv2d(Var<Real> x, Var<Real> w, Var<Real> b, std::size_t stride,
                 std::size_t padding);

template <typename Real>
Var<Real> reshape(Var<Real> x, Shape shape);

template <typename Real>
Var<Real> transpose(Var<Real> x);

template <typename Real>
Var<Real> slice_rows(Var<Real> x, std::size_t start, std::size_t count);

template <typename Real>
Var<Real> slice_cols(Var<Real> x, std::size_t start, std::size_t count);

// Stack pieces along the row axis. A rank-1 piece of width D counts as one row.
template <typename Real>
Var<Real> concat_rows(std::span<const Var<Real>> pieces);

template <typename Real>
Var<Real> concat_cols(std::span<const Var<Real>> pieces);

// Embedding lookup: rows of table[V,D] selected by ids.
template <typename Real>
Var<Real> gather_rows(Var<Real> table, std::span<const std::int32_t> ids);

// Weighted mean over the spatial cells of features[C,H,W] with constant
// weights[H,W]. Returns [C]. Weights must have a positive sum.
template <typename Real>
Var<Real> weighted_spatial_mean(Var<Real> features, const Tensor<Real>& weights);

template <typename Real>
Var<Real> sum(Var<Real> x);

// sum(x * w) with a constant w of the same shape; a scalar readout for tests.
template <typename Real>
Var<Real> dot_constant(Var<Real> x, const Tensor<Real>& w);

// Mean over positions with mask set of -log softmax(logits[t])[targets[t]].
// Rows whose mask is unset are never read.
template <typename Real>
Var<Real> cross_entropy(Var<Real> logits, std::span<const std::int32_t> targets,
                        std::span<const std::uint8_t> loss_mask);

// Plain-tensor helpers shared by ops and tests.
template <typename Real>
Tensor<Real> softmax_rows(const Tensor<Real>& x);

}  // namespace aquila::ops

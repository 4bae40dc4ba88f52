#pragma once

// Differentiable primitives. Shape requirements are listed per op; violations
// throw std::invalid_argument naming both shapes.

#include <vector>

#include "uad/nn/tensor.hpp"

namespace uad::nn {

// Elementwise, identical shapes.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T s);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T s);

/// x + y where y's shape equals the trailing dims of x (bias, positional table).
template <typename T> Tensor<T> add_broadcast(const Tensor<T>& x, const Tensor<T>& y);

template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);
/// Mean over one axis, which is removed from the shape.
template <typename T> Tensor<T> mean_axis(const Tensor<T>& a, std::size_t axis);

/// [m,k] x [k,n] -> [m,n]
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
/// x[..., in] * w[in, out] + b[out]; `b` may be undefined.
template <typename T> Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);
/// Batched: a[B,m,k] x b[B,k,n], or b[B,n,k] transposed when `transpose_b`.
template <typename T> Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false);

/// Normalizes over the last dim, then gamma * xhat + beta (gamma, beta: [d]).
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5));
/// Over the last dim.
template <typename T> Tensor<T> softmax(const Tensor<T>& x);
/// Exact (erf) form.
template <typename T> Tensor<T> gelu(const Tensor<T>& x);
template <typename T> Tensor<T> relu(const Tensor<T>& x);

template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T> Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& xs, std::size_t axis);

/// x[B,C,H,W], w[O,C,k,k] (k odd), b[O] or undefined. Stride 1, zero "same" padding.
template <typename T> Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);
/// [B,C,H,W] -> [B,C,2H,2W]
template <typename T> Tensor<T> upsample_nearest2x(const Tensor<T>& x);
/// [B,C,H,W] -> [B,C,h,w], window centered (offset floor((H-h)/2)).
template <typename T> Tensor<T> crop_center(const Tensor<T>& x, std::size_t h, std::size_t w);
/// [B,C,H,W] -> [B, (H/p)(W/p), C*p*p]; tokens in raster order, features (c, py, px).
template <typename T> Tensor<T> patchify(const Tensor<T>& x, std::size_t patch);
/// Separable "valid" filter of x[N,H,W] with a fixed 1D kernel along both axes.
template <typename T>
Tensor<T> separable_filter_valid(const Tensor<T>& x, const std::vector<T>& kernel);

template <typename T>
struct AttentionWeights {
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;  // w: [d, d], b: [d]
};

/// softmax(Q K^T / sqrt(d_head)) V per head; heads concatenated then projected.
/// q_in, k_in, v_in: [B, N, d].
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q_in, const Tensor<T>& k_in, const Tensor<T>& v_in,
                               const AttentionWeights<T>& w, std::size_t heads);

}  // namespace uad::nn

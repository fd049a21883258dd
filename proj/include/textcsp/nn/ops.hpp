#pragma once

#include <cmath>
#include <type_traits>
#include <vector>

#include "textcsp/nn/autograd.hpp"

// Differentiable operations. All are instantiated for float and double.
// Layout conventions: volumes are [B, C, D, H, W]; token sequences are
// [B, S, E]; masks are 0/1 tensors of the same scalar type.
namespace textcsp::nn {

// Overflow-free logistic function; the sigmoid op uses exactly this.
template <typename T>
inline T stable_sigmoid(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T s);
// a + b where b's shape equals the trailing dims of a.
template <typename T> Var<T> add_broadcast(const Var<T>& a, const Var<T>& b);

template <typename T> Var<T> sigmoid(const Var<T>& a);
template <typename T> Var<T> relu(const Var<T>& a);
template <typename T> Var<T> leaky_relu(const Var<T>& a, T slope);
// Exact (erf) GELU.
template <typename T> Var<T> gelu(const Var<T>& a);

template <typename T> Var<T> sum(const Var<T>& a);
template <typename T> Var<T> mean(const Var<T>& a);
template <typename T> Var<T> reshape(const Var<T>& a, Shape shape);

// Concatenate / slice along one axis.
template <typename T> Var<T> concat(const Var<T>& a, const Var<T>& b, int axis);
template <typename T> Var<T> slice(const Var<T>& a, int axis, Index start, Index length);

// y = x W^T + b over the last axis. w: [out, in]; bias may be undefined.
template <typename T> Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& bias);

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps);
// x: [B, C, ...]; statistics per (sample, group of C/groups channels).
template <typename T>
Var<T> group_norm(const Var<T>& x, int groups, const Var<T>& gamma, const Var<T>& beta, T eps);

// x: [B, Cin, D, H, W]; w: [Cout, Cin, k, k, k]; bias [Cout] or undefined.
template <typename T>
Var<T> conv3d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, int stride, int pad);
// Kernel 2, stride 2. w: [Cin, Cout, 2, 2, 2]; output spatial dims double.
template <typename T>
Var<T> conv_transpose3d_2x(const Var<T>& x, const Var<T>& w, const Var<T>& bias);

// table: [V, E]; ids: row-major [B, L] -> [B, L, E].
template <typename T>
Var<T> embedding(const Var<T>& table, const std::vector<Index>& ids, Index batch, Index length);
// prefix [K, E] shared across the batch; x [B, L, E] -> [B, K + L, E].
template <typename T> Var<T> prepend_rows(const Var<T>& prefix, const Var<T>& x);
// Mean over positions with mask == 1; rows with an all-zero mask give zeros.
template <typename T> Var<T> masked_mean(const Var<T>& x, const Tensor<T>& mask);

// Scaled dot-product multi-head attention. key_mask [B, Sk] (nullptr = all
// valid). Query rows with no valid key produce zeros.
template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads,
                 const std::type_identity_t<Tensor<T>>* key_mask);

// x [B, C, ...] * g[B, C] broadcast over the spatial dims.
template <typename T> Var<T> channel_gate(const Var<T>& x, const Var<T>& g);
// x [B, C, ...] * (1 + a[B, 1, ...]) broadcast over channels.
template <typename T> Var<T> spatial_gate(const Var<T>& x, const Var<T>& a);

// [B, C, S] <-> [B, S, C] with the spatial dims flattened into S.
template <typename T> Var<T> channels_to_tokens(const Var<T>& x);
template <typename T> Var<T> tokens_to_channels(const Var<T>& x, const Shape& spatial);

// Mean binary cross-entropy on logits.
template <typename T> Var<T> bce_with_logits(const Var<T>& logits, const Tensor<T>& target);
// Batch mean of 1 - (2 sum(p t) + eps) / (sum p + sum t + eps), p = sigmoid(logits).
template <typename T>
Var<T> soft_dice_loss(const Var<T>& logits, const Tensor<T>& target, T eps);

}  // namespace textcsp::nn

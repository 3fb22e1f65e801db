#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "sambay/tensor.hpp"

// Differentiable tensor operations. Binary elementwise ops broadcast their
// second operand only in two ways: a rank-1 tensor matching the trailing
// dimension, or a single-element tensor.
namespace sambay {

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);

template <typename T>
Tensor<T> silu(const Tensor<T>& x);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T>
Tensor<T> exp(const Tensor<T>& x);
template <typename T>
Tensor<T> softplus(const Tensor<T>& x);

// Sum of all elements, shape [1].
template <typename T>
Tensor<T> sum(const Tensor<T>& x);
// [..., d] -> [...]; a rank-1 input reduces to shape [1].
template <typename T>
Tensor<T> sum_lastdim(const Tensor<T>& x);

// [m,k] x [k,n] -> [m,n]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
// x [m,k], weight [n,k] -> x * weight^T [m,n]
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight);

// Softmax over the last dimension. mask (same element count, nonzero = keep)
// zeroes masked entries exactly; a row with no kept entry is an error.
template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x, std::span<const std::uint8_t> mask = {});

// y = x / sqrt(mean(x^2) + eps) * weight over the last dimension.
template <typename T>
Tensor<T> rmsnorm(const Tensor<T>& x, const Tensor<T>& weight, T eps);
// Standard LayerNorm with affine weight and bias over the last dimension.
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, T eps);

// x [n,c], kernel [c,k]: y[t,c] = sum_j kernel[c,j] * x[t-k+1+j, c], zero
// left padding.
template <typename T>
Tensor<T> conv1d_depthwise_causal(const Tensor<T>& x, const Tensor<T>& kernel);

// table [V,d], ids -> [n,d]
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids);
// x [n,d] -> [rows.size(), d]
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const int> rows);
// x [n,d] -> [n, cols.size()]
template <typename T>
Tensor<T> gather_cols(const Tensor<T>& x, std::span<const int> cols);
template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t end);
template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts);
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);
// [k] -> [k*r], each element repeated r times consecutively.
template <typename T>
Tensor<T> repeat_elements(const Tensor<T>& x, std::size_t repeats);

// Rotary position embedding on x [n, heads*head_dim], rotating the pairs
// (i, i + head_dim/2) of every head by position * base^(-2i/head_dim).
template <typename T>
Tensor<T> rope(const Tensor<T>& x, std::size_t heads, std::size_t head_dim,
               std::span<const int> positions, double base);

struct AttentionShape {
  std::size_t n_heads = 1;
  std::size_t n_kv_heads = 1;
  std::size_t qk_dim = 1;
  std::size_t v_dim = 1;
  double scale = 1.0;
  // Keys older than window-1 positions before the query are masked.
  std::optional<std::size_t> window;
};

// Causal multi-head attention with grouped KV heads.
// q [n, H*qk_dim] at absolute positions q_positions (ascending), k [m,
// Hkv*qk_dim] and v [m, Hkv*v_dim] at positions 0..m-1. Query head h reads kv
// head h / (H/Hkv). Output [n, H*v_dim].
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    std::span<const int> q_positions, const AttentionShape& shape);

// Selective state-space scan.
// u, delta [n, c]; a [c, s] (negative decay rates); b, cmat [n, s]; d [c].
// h[t] = exp(delta[t] a) * h[t-1] + delta[t] b[t] u[t];  y[t] = h[t] cmat[t] + d u[t].
// Evaluated with the associative parallel scan. Optionally returns h at the
// final position, [c, s].
template <typename T>
Tensor<T> selective_scan(const Tensor<T>& u, const Tensor<T>& delta, const Tensor<T>& a,
                         const Tensor<T>& b, const Tensor<T>& cmat, const Tensor<T>& d,
                         std::vector<T>* final_state = nullptr);

// Mean cross-entropy of logits [n,V] against targets over rows with nonzero
// weight. Returns shape [1].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets,
                        std::span<const std::uint8_t> weights = {});

}  // namespace sambay

#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "sambay/ops.hpp"
#include "sambay/tensor.hpp"

// Token-mixing and channel-mixing layers. Every forward here builds an
// autodiff graph; the *_step / cached variants are the graph-free decoding
// paths used by the runtime.
namespace sambay {

enum class NormKind { RMS, Layer };

template <typename T>
struct NormParams {
  Tensor<T> weight;
  Tensor<T> bias;  // LayerNorm only
  NormKind kind = NormKind::RMS;
  T eps = T(1e-5);
};

template <typename T>
Tensor<T> norm_forward(const Tensor<T>& x, const NormParams<T>& p);

// ---------------------------------------------------------------------------
// Gated memory unit: y = (m * SiLU(x W1^T)) W2, with W1, W2 in R^{d_h x d_m}.
// The normalized variant applies RMSNorm after the product.

template <typename T>
struct GmuParams {
  Tensor<T> w1;
  Tensor<T> w2;
  std::optional<Tensor<T>> norm_weight;
  T eps = T(1e-5);

  std::size_t d_h() const { return w1.dim(0); }
  std::size_t d_m() const { return w1.dim(1); }
};

template <typename T>
Tensor<T> gmu_forward(const Tensor<T>& x, const Tensor<T>& m, const GmuParams<T>& p);
template <typename T>
Tensor<T> ngmu_forward(const Tensor<T>& x, const Tensor<T>& m, const GmuParams<T>& p);
// nGMU when p.norm_weight is set, GMU otherwise.
template <typename T>
Tensor<T> gated_memory_forward(const Tensor<T>& x, const Tensor<T>& m, const GmuParams<T>& p);

// ---------------------------------------------------------------------------
// Selective SSM block (Mamba-1 layout).

template <typename T>
struct SsmParams {
  Tensor<T> in_proj;      // [2*d_inner, d_m]
  Tensor<T> conv_weight;  // [d_inner, conv_kernel]
  Tensor<T> conv_bias;    // [d_inner]
  Tensor<T> x_proj;       // [dt_rank + 2*state_dim, d_inner]
  Tensor<T> dt_proj;      // [d_inner, dt_rank]
  Tensor<T> dt_bias;      // [d_inner]
  Tensor<T> a_log;        // [d_inner, state_dim]
  Tensor<T> d;            // [d_inner]
  Tensor<T> out_proj;     // [d_m, d_inner]
  std::size_t d_inner = 0;
  std::size_t state_dim = 16;
  std::size_t conv_kernel = 4;
  std::size_t dt_rank = 1;
};

// Recurrent state: scan state h [d_inner, state_dim] and the last
// conv_kernel-1 pre-conv inputs, oldest first, [conv_kernel-1, d_inner].
template <typename T>
struct SsmState {
  std::vector<T> h;
  std::vector<T> conv;

  std::size_t floats() const { return h.size() + conv.size(); }
};

template <typename T>
std::size_t ssm_state_floats(const SsmParams<T>& p) {
  return p.d_inner * p.state_dim + p.d_inner * (p.conv_kernel - 1);
}

template <typename T>
SsmState<T> ssm_zero_state(const SsmParams<T>& p);

template <typename T>
struct SsmOutput {
  Tensor<T> y;    // [n, d_m]
  Tensor<T> tap;  // [n, d_inner]: scan output incl. D skip, before SiLU(z) gating
};

// Whole-sequence evaluation with the parallel scan. If final_state is given
// it receives the recurrent state after the last position.
template <typename T>
SsmOutput<T> ssm_forward_parallel(const Tensor<T>& x, const SsmParams<T>& p,
                                  SsmState<T>* final_state = nullptr);

template <typename T>
struct SsmStepOutput {
  std::vector<T> y;    // [d_m]
  std::vector<T> tap;  // [d_inner]
};

// One position; updates state in place. O(1) in the history length.
template <typename T>
SsmStepOutput<T> ssm_step(std::span<const T> x_t, SsmState<T>& state, const SsmParams<T>& p);

// ---------------------------------------------------------------------------
// Attention. Self-attention layers own k_proj/v_proj; cross-attention layers
// leave them undefined and read a shared KvPair.

template <typename T>
struct AttnParams {
  Tensor<T> q_proj;  // [n_heads*head_dim, d_m]
  Tensor<T> k_proj;  // [n_kv_heads*head_dim, d_m]
  Tensor<T> v_proj;  // [n_kv_heads*v_head_dim, d_m]
  Tensor<T> o_proj;  // [d_m, n_heads*v_head_dim]
  std::size_t n_heads = 1;
  std::size_t n_kv_heads = 1;
  std::size_t head_dim = 1;
  std::size_t v_head_dim = 1;
  std::optional<std::size_t> window;
  double scale = 1.0;
  bool rope = false;
  double rope_base = 10000.0;

  // Differential attention. q/k heads are split into two halves of
  // head_dim/2; each head has its own lambda vectors [n_heads, head_dim].
  bool differential = false;
  Tensor<T> lambda_q1, lambda_k1, lambda_q2, lambda_k2;
  double lambda_init = 0.0;
  Tensor<T> head_norm;  // [v_head_dim], shared across heads
  T eps = T(1e-5);

  bool has_kv_proj() const { return k_proj.defined(); }
  std::size_t q_width() const { return n_heads * head_dim; }
  std::size_t k_width() const { return n_kv_heads * head_dim; }
  std::size_t v_width() const { return n_kv_heads * v_head_dim; }
  std::size_t out_width() const { return n_heads * v_head_dim; }
};

template <typename T>
struct KvPair {
  Tensor<T> k;  // [m, n_kv_heads*head_dim], RoPE applied if enabled
  Tensor<T> v;  // [m, n_kv_heads*v_head_dim]
};

// lambda_init(l) = 0.8 - 0.6 exp(-0.3 l)
double diff_lambda_init(double layer_index);

// Per-head lambda = exp(<lq1,lk1>) - exp(<lq2,lk2>) + lambda_init, shape [n_heads].
template <typename T>
Tensor<T> diff_lambda(const AttnParams<T>& p);

// k/v for the rows of x at the given absolute positions (0..m-1 in order).
template <typename T>
KvPair<T> project_kv(const Tensor<T>& x, std::span<const int> positions, const AttnParams<T>& p);

// Per-head outputs before o_proj, [n, n_heads*v_head_dim]. Queries are the
// rows of x at q_positions; keys are kv rows at positions 0..m-1.
template <typename T>
Tensor<T> attention_heads(const Tensor<T>& x, std::span<const int> q_positions,
                          const KvPair<T>& kv, const AttnParams<T>& p);

template <typename T>
Tensor<T> attention_forward(const Tensor<T>& x, std::span<const int> q_positions,
                            const KvPair<T>& kv, const AttnParams<T>& p);

// Causal self-attention over x at positions 0..n-1.
template <typename T>
Tensor<T> self_attention_forward(const Tensor<T>& x, const AttnParams<T>& p);

// Cached single-query evaluation. q is one projected (and rotated) query
// row; keys/values are rows [0, count) of row-major buffers with widths
// p.k_width() and p.v_width(). lambda is diff_lambda(p) for differential
// layers, empty otherwise. Writes n_heads*v_head_dim values to out.
template <typename T>
void attention_heads_cached(std::span<const T> q, const T* keys, const T* values, std::size_t count,
                            const AttnParams<T>& p, std::span<const T> lambda, std::span<T> out);

// ---------------------------------------------------------------------------
// SwiGLU MLP. The tap is the up-projection branch.

template <typename T>
struct MlpParams {
  Tensor<T> gate_proj;  // [w_mlp, d_m]
  Tensor<T> up_proj;    // [w_mlp, d_m]
  Tensor<T> down_proj;  // [d_m, w_mlp]
};

template <typename T>
struct MlpOutput {
  Tensor<T> y;
  Tensor<T> tap;
};

template <typename T>
MlpOutput<T> swiglu_forward(const Tensor<T>& x, const MlpParams<T>& p);

}  // namespace sambay

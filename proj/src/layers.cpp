#include "sambay/layers.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sambay/kernels.hpp"

namespace sambay {

namespace {

std::vector<int> iota_positions(std::size_t n) {
  std::vector<int> pos(n);
  std::iota(pos.begin(), pos.end(), 0);
  return pos;
}

// Columns [half*hd/2, (half+1)*hd/2) of every head.
std::vector<int> half_head_cols(std::size_t heads, std::size_t hd, std::size_t half) {
  std::vector<int> cols;
  cols.reserve(heads * hd / 2);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < hd / 2; ++i)
      cols.push_back(static_cast<int>(h * hd + half * (hd / 2) + i));
  return cols;
}

template <typename T>
void matvec(const Tensor<T>& w, const T* x, T* y) {
  // y = W x with W [out, in]
  kernels::gemm<T>(false, true, 1, w.dim(0), w.dim(1), T{1}, x, w.ptr(), T{0}, y);
}

}  // namespace

template <typename T>
Tensor<T> norm_forward(const Tensor<T>& x, const NormParams<T>& p) {
  if (p.kind == NormKind::Layer) {
    return layernorm(x, p.weight, p.bias, p.eps);
  }
  return rmsnorm(x, p.weight, p.eps);
}

template <typename T>
Tensor<T> gmu_forward(const Tensor<T>& x, const Tensor<T>& m, const GmuParams<T>& p) {
  if (m.cols() != p.d_h() || x.cols() != p.d_m() || m.rows() != x.rows()) {
    throw ShapeError("gmu: memory " + shape_str(m.shape()) + " / input " + shape_str(x.shape()) +
                     " do not match W1 " + shape_str(p.w1.shape()));
  }
  return matmul(mul(m, silu(linear(x, p.w1))), p.w2);
}

template <typename T>
Tensor<T> ngmu_forward(const Tensor<T>& x, const Tensor<T>& m, const GmuParams<T>& p) {
  if (!p.norm_weight) {
    throw ConfigError("ngmu: norm weight missing");
  }
  if (m.cols() != p.d_h() || x.cols() != p.d_m() || m.rows() != x.rows()) {
    throw ShapeError("ngmu: memory " + shape_str(m.shape()) + " / input " +
                     shape_str(x.shape()) + " do not match W1 " + shape_str(p.w1.shape()));
  }
  return matmul(rmsnorm(mul(m, silu(linear(x, p.w1))), *p.norm_weight, p.eps), p.w2);
}

template <typename T>
Tensor<T> gated_memory_forward(const Tensor<T>& x, const Tensor<T>& m, const GmuParams<T>& p) {
  return p.norm_weight ? ngmu_forward(x, m, p) : gmu_forward(x, m, p);
}

template <typename T>
SsmState<T> ssm_zero_state(const SsmParams<T>& p) {
  SsmState<T> s;
  s.h.assign(p.d_inner * p.state_dim, T{0});
  s.conv.assign(p.d_inner * (p.conv_kernel - 1), T{0});
  return s;
}

template <typename T>
SsmOutput<T> ssm_forward_parallel(const Tensor<T>& x, const SsmParams<T>& p,
                                  SsmState<T>* final_state) {
  if (x.rank() != 2 || x.rows() == 0) {
    throw ShapeError("ssm: expected non-empty [n, d_m] input, got " + shape_str(x.shape()));
  }
  const std::size_t di = p.d_inner, N = p.state_dim, R = p.dt_rank;
  const auto xz = linear(x, p.in_proj);
  const auto xs = slice_cols(xz, 0, di);
  const auto z = slice_cols(xz, di, 2 * di);
  const auto xc = silu(add(conv1d_depthwise_causal(xs, p.conv_weight), p.conv_bias));
  const auto dbc = linear(xc, p.x_proj);
  const auto dt_low = slice_cols(dbc, 0, R);
  const auto b = slice_cols(dbc, R, R + N);
  const auto c = slice_cols(dbc, R + N, R + 2 * N);
  const auto delta = softplus(add(linear(dt_low, p.dt_proj), p.dt_bias));
  const auto a = scale(exp(p.a_log), T{-1});
  std::vector<T> h_last;
  auto scan = selective_scan(xc, delta, a, b, c, p.d, final_state ? &h_last : nullptr);
  auto y = linear(mul(scan, silu(z)), p.out_proj);
  if (final_state) {
    final_state->h = std::move(h_last);
    const std::size_t keep = p.conv_kernel - 1;
    const std::size_t n = x.rows();
    final_state->conv.assign(keep * di, T{0});
    for (std::size_t r = 0; r < keep && r < n; ++r) {
      // Most recent input goes to the last buffer row.
      const std::size_t src = n - 1 - r;
      const std::size_t dst = keep - 1 - r;
      std::copy_n(xs.ptr() + src * di, di, final_state->conv.data() + dst * di);
    }
  }
  return {y, scan};
}

template <typename T>
SsmStepOutput<T> ssm_step(std::span<const T> x_t, SsmState<T>& state, const SsmParams<T>& p) {
  const std::size_t dm = p.in_proj.dim(1), di = p.d_inner, N = p.state_dim, R = p.dt_rank,
                    K = p.conv_kernel;
  if (x_t.size() != dm || state.h.size() != di * N || state.conv.size() != di * (K - 1)) {
    throw ShapeError("ssm_step: input or state does not match parameters");
  }
  std::vector<T> xz(2 * di);
  matvec(p.in_proj, x_t.data(), xz.data());
  const T* xs = xz.data();
  const T* z = xz.data() + di;

  std::vector<T> xc(di);
  for (std::size_t c = 0; c < di; ++c) {
    T acc = p.conv_bias[c];
    for (std::size_t j = 0; j + 1 < K; ++j) acc += p.conv_weight[c * K + j] * state.conv[j * di + c];
    acc += p.conv_weight[c * K + K - 1] * xs[c];
    xc[c] = kernels::silu(acc);
  }
  if (K > 1) {
    std::copy(state.conv.begin() + static_cast<std::ptrdiff_t>(di), state.conv.end(),
              state.conv.begin());
    std::copy_n(xs, di, state.conv.end() - static_cast<std::ptrdiff_t>(di));
  }

  std::vector<T> dbc(R + 2 * N);
  matvec(p.x_proj, xc.data(), dbc.data());
  std::vector<T> dt(di);
  matvec(p.dt_proj, dbc.data(), dt.data());
  const T* b = dbc.data() + R;
  const T* cvec = dbc.data() + R + N;

  SsmStepOutput<T> out;
  out.tap.assign(di, T{0});
  std::vector<T> gated(di);
  for (std::size_t c = 0; c < di; ++c) {
    const T delta = kernels::softplus(dt[c] + p.dt_bias[c]);
    T acc = p.d[c] * xc[c];
    T* h = state.h.data() + c * N;
    for (std::size_t s = 0; s < N; ++s) {
      const T a = -std::exp(p.a_log[c * N + s]);
      h[s] = std::exp(delta * a) * h[s] + delta * b[s] * xc[c];
      acc += h[s] * cvec[s];
    }
    out.tap[c] = acc;
    gated[c] = acc * kernels::silu(z[c]);
  }
  out.y.assign(dm, T{0});
  matvec(p.out_proj, gated.data(), out.y.data());
  return out;
}

double diff_lambda_init(double layer_index) { return 0.8 - 0.6 * std::exp(-0.3 * layer_index); }

template <typename T>
Tensor<T> diff_lambda(const AttnParams<T>& p) {
  const auto l1 = exp(sum_lastdim(mul(p.lambda_q1, p.lambda_k1)));
  const auto l2 = exp(sum_lastdim(mul(p.lambda_q2, p.lambda_k2)));
  return add(sub(l1, l2), Tensor<T>::scalar(static_cast<T>(p.lambda_init)));
}

template <typename T>
KvPair<T> project_kv(const Tensor<T>& x, std::span<const int> positions, const AttnParams<T>& p) {
  if (!p.has_kv_proj()) {
    throw ConfigError("attention: layer has no k/v projections");
  }
  if (positions.size() != x.rows()) {
    throw ShapeError("project_kv: one position per row required");
  }
  KvPair<T> kv{linear(x, p.k_proj), linear(x, p.v_proj)};
  if (p.rope) {
    kv.k = rope(kv.k, p.n_kv_heads, p.head_dim, positions, p.rope_base);
  }
  return kv;
}

template <typename T>
Tensor<T> attention_heads(const Tensor<T>& x, std::span<const int> q_positions,
                          const KvPair<T>& kv, const AttnParams<T>& p) {
  if (!kv.k.defined() || !kv.v.defined()) {
    throw ConfigError("attention: cross mode requires a shared KV cache");
  }
  if (p.window && *p.window == 0) {
    throw ConfigError("attention: sliding window must be >= 1");
  }
  auto q = linear(x, p.q_proj);
  if (p.rope) {
    q = rope(q, p.n_heads, p.head_dim, q_positions, p.rope_base);
  }
  if (!p.differential) {
    AttentionShape s{p.n_heads, p.n_kv_heads, p.head_dim, p.v_head_dim, p.scale, p.window};
    return attention(q, kv.k, kv.v, q_positions, s);
  }
  if (p.head_dim % 2 != 0) {
    throw ConfigError("differential attention: head_dim must be even");
  }
  const std::size_t half = p.head_dim / 2;
  AttentionShape s{p.n_heads, p.n_kv_heads, half, p.v_head_dim, p.scale, p.window};
  const auto qc1 = half_head_cols(p.n_heads, p.head_dim, 0);
  const auto qc2 = half_head_cols(p.n_heads, p.head_dim, 1);
  const auto kc1 = half_head_cols(p.n_kv_heads, p.head_dim, 0);
  const auto kc2 = half_head_cols(p.n_kv_heads, p.head_dim, 1);
  const auto a1 = attention(gather_cols(q, qc1), gather_cols(kv.k, kc1), kv.v, q_positions, s);
  const auto a2 = attention(gather_cols(q, qc2), gather_cols(kv.k, kc2), kv.v, q_positions, s);
  const auto lam = repeat_elements(diff_lambda(p), p.v_head_dim);
  const auto diff = sub(a1, mul(a2, lam));
  const std::size_t n = x.rows();
  const auto normed = rmsnorm(reshape(diff, {n * p.n_heads, p.v_head_dim}), p.head_norm, p.eps);
  return reshape(normed, {n, p.out_width()});
}

template <typename T>
Tensor<T> attention_forward(const Tensor<T>& x, std::span<const int> q_positions,
                            const KvPair<T>& kv, const AttnParams<T>& p) {
  return linear(attention_heads(x, q_positions, kv, p), p.o_proj);
}

template <typename T>
Tensor<T> self_attention_forward(const Tensor<T>& x, const AttnParams<T>& p) {
  if (x.rank() != 2 || x.rows() == 0) {
    throw ShapeError("attention: expected non-empty [n, d_m] input");
  }
  const auto pos = iota_positions(x.rows());
  return attention_forward(x, pos, project_kv(x, pos, p), p);
}

template <typename T>
void attention_heads_cached(std::span<const T> q, const T* keys, const T* values, std::size_t count,
                            const AttnParams<T>& p, std::span<const T> lambda, std::span<T> out) {
  if (count == 0) {
    throw ConfigError("attention: empty KV cache");
  }
  const std::size_t H = p.n_heads, hd = p.head_dim, vhd = p.v_head_dim;
  const std::size_t group = H / p.n_kv_heads;
  const std::size_t kw = p.k_width(), vw = p.v_width();
  const T sc = static_cast<T>(p.scale);
  std::vector<T> probs(count);
  if (!p.differential) {
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t g = h / group;
      kernels::attend_row<T>(q.data() + h * hd, hd, {keys, kw, g * hd}, {values, vw, g * vhd}, vhd,
                             0, count, sc, probs.data(), out.data() + h * vhd);
    }
    return;
  }
  const std::size_t half = hd / 2;
  std::vector<T> o1(vhd), o2(vhd);
  for (std::size_t h = 0; h < H; ++h) {
    const std::size_t g = h / group;
    kernels::attend_row<T>(q.data() + h * hd, half, {keys, kw, g * hd}, {values, vw, g * vhd}, vhd,
                           0, count, sc, probs.data(), o1.data());
    kernels::attend_row<T>(q.data() + h * hd + half, half, {keys, kw, g * hd + half},
                           {values, vw, g * vhd}, vhd, 0, count, sc, probs.data(), o2.data());
    T ms{0};
    for (std::size_t i = 0; i < vhd; ++i) {
      o1[i] -= lambda[h] * o2[i];
      ms += o1[i] * o1[i];
    }
    const T r = T{1} / std::sqrt(ms / static_cast<T>(vhd) + p.eps);
    for (std::size_t i = 0; i < vhd; ++i) out[h * vhd + i] = o1[i] * r * p.head_norm[i];
  }
}

template <typename T>
MlpOutput<T> swiglu_forward(const Tensor<T>& x, const MlpParams<T>& p) {
  auto up = linear(x, p.up_proj);
  auto y = linear(mul(silu(linear(x, p.gate_proj)), up), p.down_proj);
  return {y, up};
}

#define SAMBAY_INSTANTIATE_LAYERS(T)                                                            \
  template Tensor<T> norm_forward(const Tensor<T>&, const NormParams<T>&);                      \
  template Tensor<T> gmu_forward(const Tensor<T>&, const Tensor<T>&, const GmuParams<T>&);      \
  template Tensor<T> ngmu_forward(const Tensor<T>&, const Tensor<T>&, const GmuParams<T>&);     \
  template Tensor<T> gated_memory_forward(const Tensor<T>&, const Tensor<T>&,                   \
                                          const GmuParams<T>&);                                 \
  template SsmState<T> ssm_zero_state(const SsmParams<T>&);                                     \
  template SsmOutput<T> ssm_forward_parallel(const Tensor<T>&, const SsmParams<T>&,             \
                                             SsmState<T>*);                                     \
  template SsmStepOutput<T> ssm_step(std::span<const T>, SsmState<T>&, const SsmParams<T>&);    \
  template Tensor<T> diff_lambda(const AttnParams<T>&);                                         \
  template KvPair<T> project_kv(const Tensor<T>&, std::span<const int>, const AttnParams<T>&);  \
  template Tensor<T> attention_heads(const Tensor<T>&, std::span<const int>, const KvPair<T>&,  \
                                     const AttnParams<T>&);                                     \
  template Tensor<T> attention_forward(const Tensor<T>&, std::span<const int>,                  \
                                       const KvPair<T>&, const AttnParams<T>&);                 \
  template Tensor<T> self_attention_forward(const Tensor<T>&, const AttnParams<T>&);            \
  template void attention_heads_cached(std::span<const T>, const T*, const T*, std::size_t,     \
                                       const AttnParams<T>&, std::span<const T>, std::span<T>); \
  template MlpOutput<T> swiglu_forward(const Tensor<T>&, const MlpParams<T>&);

SAMBAY_INSTANTIATE_LAYERS(float)
SAMBAY_INSTANTIATE_LAYERS(double)

}  // namespace sambay

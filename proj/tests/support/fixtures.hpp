#pragma once

// Random layer instances for tests.

#include <cmath>
#include <random>

#include "sambay/layers.hpp"

namespace fixture {

using namespace sambay;

template <typename T>
Tensor<T> rand_tensor(Shape shape, std::mt19937_64& rng, double std, bool grad = true) {
  std::normal_distribution<double> nd(0.0, std);
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(nd(rng));
  Tensor<T> t(std::move(shape), std::move(v));
  t.set_requires_grad(grad);
  return t;
}

template <typename T>
Tensor<T> weight(std::size_t out, std::size_t in, std::mt19937_64& rng) {
  return rand_tensor<T>({out, in}, rng, 1.0 / std::sqrt(static_cast<double>(in)));
}

template <typename T>
GmuParams<T> gmu(std::size_t dm, std::size_t dh, std::mt19937_64& rng, bool normalized = false) {
  GmuParams<T> p;
  p.w1 = weight<T>(dh, dm, rng);
  p.w2 = rand_tensor<T>({dh, dm}, rng, 1.0 / std::sqrt(static_cast<double>(dh)));
  if (normalized) {
    auto w = rand_tensor<T>({dh}, rng, 0.2);
    auto d = w.mutable_data();
    for (auto& x : d) x += T{1};
    p.norm_weight = w;
  }
  return p;
}

template <typename T>
SsmParams<T> ssm(std::size_t dm, std::mt19937_64& rng, bool zero_conv_bias = false) {
  SsmParams<T> p;
  p.d_inner = 2 * dm;
  p.state_dim = 4;
  p.conv_kernel = 4;
  p.dt_rank = (dm + 15) / 16;
  const std::size_t di = p.d_inner, N = p.state_dim;
  p.in_proj = weight<T>(2 * di, dm, rng);
  p.conv_weight = rand_tensor<T>({di, p.conv_kernel}, rng, 0.5);
  p.conv_bias = rand_tensor<T>({di}, rng, zero_conv_bias ? 0.0 : 0.1);
  p.x_proj = weight<T>(p.dt_rank + 2 * N, di, rng);
  p.dt_proj = weight<T>(di, p.dt_rank, rng);
  p.dt_bias = rand_tensor<T>({di}, rng, 0.3);
  std::vector<T> alog(di * N);
  for (std::size_t c = 0; c < di; ++c)
    for (std::size_t s = 0; s < N; ++s) alog[c * N + s] = static_cast<T>(std::log(double(s + 1)));
  p.a_log = Tensor<T>({di, N}, alog);
  p.a_log.set_requires_grad(true);
  p.d = Tensor<T>({di}, T{1});
  p.d.set_requires_grad(true);
  p.out_proj = weight<T>(dm, di, rng);
  return p;
}

template <typename T>
AttnParams<T> attn(std::size_t dm, std::size_t heads, std::size_t kv_heads, std::size_t hd,
                   std::mt19937_64& rng, bool with_kv = true, bool differential = false) {
  AttnParams<T> p;
  p.n_heads = heads;
  p.n_kv_heads = kv_heads;
  p.head_dim = hd;
  p.v_head_dim = hd;
  p.scale = 1.0 / std::sqrt(static_cast<double>(differential ? hd / 2 : hd));
  p.q_proj = weight<T>(heads * hd, dm, rng);
  if (with_kv) {
    p.k_proj = weight<T>(kv_heads * hd, dm, rng);
    p.v_proj = weight<T>(kv_heads * hd, dm, rng);
  }
  p.o_proj = weight<T>(dm, heads * hd, rng);
  if (differential) {
    p.differential = true;
    p.lambda_q1 = rand_tensor<T>({heads, hd}, rng, 0.1);
    p.lambda_k1 = rand_tensor<T>({heads, hd}, rng, 0.1);
    p.lambda_q2 = rand_tensor<T>({heads, hd}, rng, 0.1);
    p.lambda_k2 = rand_tensor<T>({heads, hd}, rng, 0.1);
    p.lambda_init = diff_lambda_init(1.0);
    p.head_norm = rand_tensor<T>({hd}, rng, 0.1);
    for (auto& x : p.head_norm.mutable_data()) x += T{1};
  }
  return p;
}

template <typename T>
MlpParams<T> mlp(std::size_t dm, std::size_t wm, std::mt19937_64& rng) {
  return {weight<T>(wm, dm, rng), weight<T>(wm, dm, rng), weight<T>(dm, wm, rng)};
}

// Same values at another precision.
template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t) {
  if (!t.defined()) return {};
  std::vector<To> v(t.data().begin(), t.data().end());
  return Tensor<To>(t.shape(), std::move(v));
}

template <typename To, typename From>
SsmParams<To> cast(const SsmParams<From>& p) {
  SsmParams<To> q;
  q.in_proj = cast<To>(p.in_proj);
  q.conv_weight = cast<To>(p.conv_weight);
  q.conv_bias = cast<To>(p.conv_bias);
  q.x_proj = cast<To>(p.x_proj);
  q.dt_proj = cast<To>(p.dt_proj);
  q.dt_bias = cast<To>(p.dt_bias);
  q.a_log = cast<To>(p.a_log);
  q.d = cast<To>(p.d);
  q.out_proj = cast<To>(p.out_proj);
  q.d_inner = p.d_inner;
  q.state_dim = p.state_dim;
  q.conv_kernel = p.conv_kernel;
  q.dt_rank = p.dt_rank;
  return q;
}

}  // namespace fixture

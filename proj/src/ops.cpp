#include "sambay/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "sambay/kernels.hpp"

namespace sambay {

namespace {

using kernels::gemm;

enum class Bcast { Same, Trailing, Scalar };

Bcast broadcast_kind(const Shape& a, const Shape& b, const char* op) {
  if (a == b) {
    return Bcast::Same;
  }
  if (b.size() == 1 && !a.empty() && b[0] == a.back()) {
    return Bcast::Trailing;
  }
  if (numel(b) == 1) {
    return Bcast::Scalar;
  }
  throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(b) + " onto " +
                   shape_str(a));
}

inline std::size_t bidx(Bcast kind, std::size_t i, std::size_t trailing) {
  switch (kind) {
    case Bcast::Same:
      return i;
    case Bcast::Trailing:
      return i % trailing;
    case Bcast::Scalar:
      return 0;
  }
  return 0;
}

void require_rank2(const Shape& s, const char* op) {
  if (s.size() != 2) {
    throw ShapeError(std::string(op) + ": expected rank-2 tensor, got " + shape_str(s));
  }
}

template <typename T>
using NodeT = detail::Node<T>;

template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(const Tensor<T>& x, const char* op, Fwd fwd, Deriv deriv) {
  std::vector<T> out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = fwd(in[i]);
  }
  return detail::make_result<T>(x.shape(), std::move(out), op, {x}, [deriv](NodeT<T>& self) {
    auto& in0 = *self.inputs[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      in0.grad[i] += self.grad[i] * deriv(in0.data[i], self.data[i]);
    }
  });
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const Bcast kind = broadcast_kind(a.shape(), b.shape(), "add");
  const std::size_t tr = a.shape().empty() ? 1 : a.shape().back();
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = a[i] + b[bidx(kind, i, tr)];
  }
  return detail::make_result<T>(a.shape(), std::move(out), "add", {a, b},
                                [kind, tr](NodeT<T>& self) {
                                  auto& x = *self.inputs[0];
                                  auto& y = *self.inputs[1];
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                    if (x.requires_grad) x.grad[i] += self.grad[i];
                                    if (y.requires_grad) y.grad[bidx(kind, i, tr)] += self.grad[i];
                                  }
                                });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  const Bcast kind = broadcast_kind(a.shape(), b.shape(), "sub");
  const std::size_t tr = a.shape().empty() ? 1 : a.shape().back();
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = a[i] - b[bidx(kind, i, tr)];
  }
  return detail::make_result<T>(a.shape(), std::move(out), "sub", {a, b},
                                [kind, tr](NodeT<T>& self) {
                                  auto& x = *self.inputs[0];
                                  auto& y = *self.inputs[1];
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                    if (x.requires_grad) x.grad[i] += self.grad[i];
                                    if (y.requires_grad) y.grad[bidx(kind, i, tr)] -= self.grad[i];
                                  }
                                });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  const Bcast kind = broadcast_kind(a.shape(), b.shape(), "mul");
  const std::size_t tr = a.shape().empty() ? 1 : a.shape().back();
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = a[i] * b[bidx(kind, i, tr)];
  }
  return detail::make_result<T>(a.shape(), std::move(out), "mul", {a, b},
                                [kind, tr](NodeT<T>& self) {
                                  auto& x = *self.inputs[0];
                                  auto& y = *self.inputs[1];
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                    const std::size_t j = bidx(kind, i, tr);
                                    if (x.requires_grad) x.grad[i] += self.grad[i] * y.data[j];
                                    if (y.requires_grad) y.grad[j] += self.grad[i] * x.data[i];
                                  }
                                });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  return unary<T>(
      a, "scale", [factor](T x) { return x * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  return unary<T>(
      x, "silu", [](T v) { return kernels::silu(v); },
      [](T v, T) {
        const T s = kernels::sigmoid(v);
        return s * (T{1} + v * (T{1} - s));
      });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary<T>(
      x, "sigmoid", [](T v) { return kernels::sigmoid(v); },
      [](T, T y) { return y * (T{1} - y); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return unary<T>(
      x, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
  return unary<T>(
      x, "softplus", [](T v) { return kernels::softplus(v); },
      [](T v, T) { return kernels::sigmoid(v); });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total{0};
  for (T v : x.data()) {
    total += v;
  }
  return detail::make_result<T>(Shape{1}, {total}, "sum", {x}, [](NodeT<T>& self) {
    auto& in = *self.inputs[0];
    for (auto& g : in.grad) {
      g += self.grad[0];
    }
  });
}

template <typename T>
Tensor<T> sum_lastdim(const Tensor<T>& x) {
  const std::size_t d = x.cols();
  const std::size_t rows = x.numel() / d;
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  if (out_shape.empty()) {
    out_shape = {1};
  }
  std::vector<T> out(rows, T{0});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < d; ++c) {
      out[r] += x[r * d + c];
    }
  }
  return detail::make_result<T>(out_shape, std::move(out), "sum_lastdim", {x},
                                [d](NodeT<T>& self) {
                                  auto& in = *self.inputs[0];
                                  for (std::size_t i = 0; i < in.grad.size(); ++i) {
                                    in.grad[i] += self.grad[i / d];
                                  }
                                });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank2(a.shape(), "matmul");
  require_rank2(b.shape(), "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  std::vector<T> out(m * n);
  gemm<T>(false, false, m, n, k, T{1}, a.ptr(), b.ptr(), T{0}, out.data());
  return detail::make_result<T>(Shape{m, n}, std::move(out), "matmul", {a, b},
                                [m, k, n](NodeT<T>& self) {
                                  auto& A = *self.inputs[0];
                                  auto& B = *self.inputs[1];
                                  if (A.requires_grad)
                                    gemm<T>(false, true, m, k, n, T{1}, self.grad.data(),
                                            B.data.data(), T{1}, A.grad.data());
                                  if (B.requires_grad)
                                    gemm<T>(true, false, k, n, m, T{1}, A.data.data(),
                                            self.grad.data(), T{1}, B.grad.data());
                                });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight) {
  require_rank2(x.shape(), "linear");
  require_rank2(weight.shape(), "linear");
  const std::size_t m = x.dim(0), k = x.dim(1), n = weight.dim(0);
  if (weight.dim(1) != k) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                     shape_str(weight.shape()));
  }
  std::vector<T> out(m * n);
  gemm<T>(false, true, m, n, k, T{1}, x.ptr(), weight.ptr(), T{0}, out.data());
  return detail::make_result<T>(Shape{m, n}, std::move(out), "linear", {x, weight},
                                [m, k, n](NodeT<T>& self) {
                                  auto& X = *self.inputs[0];
                                  auto& W = *self.inputs[1];
                                  if (X.requires_grad)
                                    gemm<T>(false, false, m, k, n, T{1}, self.grad.data(),
                                            W.data.data(), T{1}, X.grad.data());
                                  if (W.requires_grad)
                                    gemm<T>(true, false, n, k, m, T{1}, self.grad.data(),
                                            X.data.data(), T{1}, W.grad.data());
                                });
}

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x, std::span<const std::uint8_t> mask) {
  const std::size_t d = x.cols();
  if (d == 0) {
    throw ShapeError("softmax_lastdim: empty last dimension");
  }
  if (!mask.empty() && mask.size() != x.numel()) {
    throw ShapeError("softmax_lastdim: mask size does not match input");
  }
  const std::size_t rows = x.numel() / d;
  std::vector<T> out(x.numel(), T{0});
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.ptr() + r * d;
    T* o = out.data() + r * d;
    auto keep = [&](std::size_t c) { return mask.empty() || mask[r * d + c] != 0; };
    T mx = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (std::size_t c = 0; c < d; ++c) {
      if (keep(c)) {
        mx = std::max(mx, in[c]);
        any = true;
      }
    }
    if (!any) {
      throw ConfigError("softmax_lastdim: row " + std::to_string(r) + " is fully masked");
    }
    T denom{0};
    for (std::size_t c = 0; c < d; ++c) {
      if (keep(c)) {
        o[c] = std::exp(in[c] - mx);
        denom += o[c];
      }
    }
    for (std::size_t c = 0; c < d; ++c) {
      o[c] /= denom;
    }
  }
  return detail::make_result<T>(x.shape(), std::move(out), "softmax", {x},
                                [d, rows](NodeT<T>& self) {
                                  auto& in = *self.inputs[0];
                                  for (std::size_t r = 0; r < rows; ++r) {
                                    const T* y = self.data.data() + r * d;
                                    const T* g = self.grad.data() + r * d;
                                    T dot{0};
                                    for (std::size_t c = 0; c < d; ++c) dot += y[c] * g[c];
                                    for (std::size_t c = 0; c < d; ++c)
                                      in.grad[r * d + c] += y[c] * (g[c] - dot);
                                  }
                                });
}

template <typename T>
Tensor<T> rmsnorm(const Tensor<T>& x, const Tensor<T>& weight, T eps) {
  const std::size_t d = x.cols();
  if (weight.numel() != d) {
    throw ShapeError("rmsnorm: weight " + shape_str(weight.shape()) + " vs input " +
                     shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  std::vector<T> out(x.numel());
  auto inv = std::make_shared<std::vector<T>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.ptr() + r * d;
    T ms{0};
    for (std::size_t c = 0; c < d; ++c) ms += in[c] * in[c];
    const T rinv = T{1} / std::sqrt(ms / static_cast<T>(d) + eps);
    (*inv)[r] = rinv;
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = in[c] * rinv * weight[c];
  }
  return detail::make_result<T>(
      x.shape(), std::move(out), "rmsnorm", {x, weight}, [d, rows, inv](NodeT<T>& self) {
        auto& X = *self.inputs[0];
        auto& W = *self.inputs[1];
        for (std::size_t r = 0; r < rows; ++r) {
          const T rinv = (*inv)[r];
          const T* in = X.data.data() + r * d;
          const T* g = self.grad.data() + r * d;
          T dot{0};
          for (std::size_t c = 0; c < d; ++c) dot += g[c] * W.data[c] * in[c] * rinv;
          dot /= static_cast<T>(d);
          for (std::size_t c = 0; c < d; ++c) {
            const T xhat = in[c] * rinv;
            if (X.requires_grad) X.grad[r * d + c] += rinv * (g[c] * W.data[c] - xhat * dot);
            if (W.requires_grad) W.grad[c] += g[c] * xhat;
          }
        }
      });
}

template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, T eps) {
  const std::size_t d = x.cols();
  if (weight.numel() != d || bias.numel() != d) {
    throw ShapeError("layernorm: affine parameters do not match " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  std::vector<T> out(x.numel());
  auto stats = std::make_shared<std::vector<T>>(2 * rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.ptr() + r * d;
    T mean{0};
    for (std::size_t c = 0; c < d; ++c) mean += in[c];
    mean /= static_cast<T>(d);
    T var{0};
    for (std::size_t c = 0; c < d; ++c) var += (in[c] - mean) * (in[c] - mean);
    var /= static_cast<T>(d);
    const T rinv = T{1} / std::sqrt(var + eps);
    (*stats)[2 * r] = mean;
    (*stats)[2 * r + 1] = rinv;
    for (std::size_t c = 0; c < d; ++c)
      out[r * d + c] = (in[c] - mean) * rinv * weight[c] + bias[c];
  }
  return detail::make_result<T>(
      x.shape(), std::move(out), "layernorm", {x, weight, bias},
      [d, rows, stats](NodeT<T>& self) {
        auto& X = *self.inputs[0];
        auto& W = *self.inputs[1];
        auto& B = *self.inputs[2];
        for (std::size_t r = 0; r < rows; ++r) {
          const T mean = (*stats)[2 * r];
          const T rinv = (*stats)[2 * r + 1];
          const T* in = X.data.data() + r * d;
          const T* g = self.grad.data() + r * d;
          T mg{0}, mgx{0};
          for (std::size_t c = 0; c < d; ++c) {
            const T gw = g[c] * W.data[c];
            mg += gw;
            mgx += gw * (in[c] - mean) * rinv;
          }
          mg /= static_cast<T>(d);
          mgx /= static_cast<T>(d);
          for (std::size_t c = 0; c < d; ++c) {
            const T xhat = (in[c] - mean) * rinv;
            if (X.requires_grad)
              X.grad[r * d + c] += rinv * (g[c] * W.data[c] - mg - xhat * mgx);
            if (W.requires_grad) W.grad[c] += g[c] * xhat;
            if (B.requires_grad) B.grad[c] += g[c];
          }
        }
      });
}

template <typename T>
Tensor<T> conv1d_depthwise_causal(const Tensor<T>& x, const Tensor<T>& kernel) {
  require_rank2(x.shape(), "conv1d_depthwise_causal");
  require_rank2(kernel.shape(), "conv1d_depthwise_causal");
  const std::size_t n = x.dim(0), c = x.dim(1), k = kernel.dim(1);
  if (kernel.dim(0) != c || k == 0) {
    throw ShapeError("conv1d_depthwise_causal: kernel " + shape_str(kernel.shape()) +
                     " does not match channels of " + shape_str(x.shape()));
  }
  std::vector<T> out(n * c, T{0});
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t j = 0; j < k; ++j) {
      if (t + j + 1 < k) continue;
      const std::size_t s = t + j + 1 - k;
      const T* xs = x.ptr() + s * c;
      T* o = out.data() + t * c;
      for (std::size_t ch = 0; ch < c; ++ch) o[ch] += kernel[ch * k + j] * xs[ch];
    }
  }
  return detail::make_result<T>(
      Shape{n, c}, std::move(out), "conv1d", {x, kernel}, [n, c, k](NodeT<T>& self) {
        auto& X = *self.inputs[0];
        auto& K = *self.inputs[1];
        for (std::size_t t = 0; t < n; ++t) {
          const T* g = self.grad.data() + t * c;
          for (std::size_t j = 0; j < k; ++j) {
            if (t + j + 1 < k) continue;
            const std::size_t s = t + j + 1 - k;
            for (std::size_t ch = 0; ch < c; ++ch) {
              if (X.requires_grad) X.grad[s * c + ch] += g[ch] * K.data[ch * k + j];
              if (K.requires_grad) K.grad[ch * k + j] += g[ch] * X.data[s * c + ch];
            }
          }
        }
      });
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids) {
  require_rank2(table.shape(), "embedding");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<int> idx(ids.begin(), ids.end());
  std::vector<T> out(idx.size() * d);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= vocab) {
      throw ConfigError("embedding: token id " + std::to_string(idx[i]) + " outside vocab of " +
                        std::to_string(vocab));
    }
    std::copy_n(table.ptr() + static_cast<std::size_t>(idx[i]) * d, d, out.data() + i * d);
  }
  return detail::make_result<T>(Shape{idx.size(), d}, std::move(out), "embedding", {table},
                                [idx, d](NodeT<T>& self) {
                                  auto& W = *self.inputs[0];
                                  for (std::size_t i = 0; i < idx.size(); ++i) {
                                    T* g = W.grad.data() + static_cast<std::size_t>(idx[i]) * d;
                                    for (std::size_t c = 0; c < d; ++c) g[c] += self.grad[i * d + c];
                                  }
                                });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const int> rows) {
  require_rank2(x.shape(), "gather_rows");
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<int> idx(rows.begin(), rows.end());
  std::vector<T> out(idx.size() * d);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= n) {
      throw ShapeError("gather_rows: row " + std::to_string(idx[i]) + " out of range");
    }
    std::copy_n(x.ptr() + static_cast<std::size_t>(idx[i]) * d, d, out.data() + i * d);
  }
  return detail::make_result<T>(Shape{idx.size(), d}, std::move(out), "gather_rows", {x},
                                [idx, d](NodeT<T>& self) {
                                  auto& X = *self.inputs[0];
                                  for (std::size_t i = 0; i < idx.size(); ++i) {
                                    T* g = X.grad.data() + static_cast<std::size_t>(idx[i]) * d;
                                    for (std::size_t c = 0; c < d; ++c) g[c] += self.grad[i * d + c];
                                  }
                                });
}

template <typename T>
Tensor<T> gather_cols(const Tensor<T>& x, std::span<const int> cols) {
  require_rank2(x.shape(), "gather_cols");
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<int> idx(cols.begin(), cols.end());
  for (int c : idx) {
    if (c < 0 || static_cast<std::size_t>(c) >= d) {
      throw ShapeError("gather_cols: column " + std::to_string(c) + " out of range");
    }
  }
  const std::size_t w = idx.size();
  std::vector<T> out(n * w);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < w; ++j) out[r * w + j] = x[r * d + static_cast<std::size_t>(idx[j])];
  }
  return detail::make_result<T>(Shape{n, w}, std::move(out), "gather_cols", {x},
                                [idx, n, d, w](NodeT<T>& self) {
                                  auto& X = *self.inputs[0];
                                  for (std::size_t r = 0; r < n; ++r)
                                    for (std::size_t j = 0; j < w; ++j)
                                      X.grad[r * d + static_cast<std::size_t>(idx[j])] +=
                                          self.grad[r * w + j];
                                });
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  require_rank2(x.shape(), "slice_cols");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (begin > end || end > d) {
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") out of " + std::to_string(d));
  }
  const std::size_t w = end - begin;
  std::vector<T> out(n * w);
  for (std::size_t r = 0; r < n; ++r) std::copy_n(x.ptr() + r * d + begin, w, out.data() + r * w);
  return detail::make_result<T>(Shape{n, w}, std::move(out), "slice_cols", {x},
                                [n, d, w, begin](NodeT<T>& self) {
                                  auto& X = *self.inputs[0];
                                  for (std::size_t r = 0; r < n; ++r)
                                    for (std::size_t j = 0; j < w; ++j)
                                      X.grad[r * d + begin + j] += self.grad[r * w + j];
                                });
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) {
    throw ShapeError("concat_cols: no inputs");
  }
  const std::size_t n = parts[0].rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_rank2(p.shape(), "concat_cols");
    if (p.dim(0) != n) {
      throw ShapeError("concat_cols: row counts differ");
    }
    widths.push_back(p.dim(1));
    total += p.dim(1);
  }
  std::vector<T> out(n * total);
  std::size_t off = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    for (std::size_t r = 0; r < n; ++r)
      std::copy_n(parts[i].ptr() + r * widths[i], widths[i], out.data() + r * total + off);
    off += widths[i];
  }
  return detail::make_result<T>(Shape{n, total}, std::move(out), "concat_cols", parts,
                                [n, total, widths](NodeT<T>& self) {
                                  std::size_t o = 0;
                                  for (std::size_t i = 0; i < widths.size(); ++i) {
                                    auto& P = *self.inputs[i];
                                    if (P.requires_grad)
                                      for (std::size_t r = 0; r < n; ++r)
                                        for (std::size_t j = 0; j < widths[i]; ++j)
                                          P.grad[r * widths[i] + j] += self.grad[r * total + o + j];
                                    o += widths[i];
                                  }
                                });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  return detail::make_result<T>(std::move(shape), std::move(out), "reshape", {x},
                                [](NodeT<T>& self) {
                                  auto& X = *self.inputs[0];
                                  for (std::size_t i = 0; i < self.grad.size(); ++i)
                                    X.grad[i] += self.grad[i];
                                });
}

template <typename T>
Tensor<T> repeat_elements(const Tensor<T>& x, std::size_t repeats) {
  const std::size_t k = x.numel();
  std::vector<T> out(k * repeats);
  for (std::size_t i = 0; i < k; ++i) std::fill_n(out.data() + i * repeats, repeats, x[i]);
  return detail::make_result<T>(Shape{k * repeats}, std::move(out), "repeat_elements", {x},
                                [repeats](NodeT<T>& self) {
                                  auto& X = *self.inputs[0];
                                  for (std::size_t i = 0; i < self.grad.size(); ++i)
                                    X.grad[i / repeats] += self.grad[i];
                                });
}

template <typename T>
Tensor<T> rope(const Tensor<T>& x, std::size_t heads, std::size_t head_dim,
               std::span<const int> positions, double base) {
  require_rank2(x.shape(), "rope");
  const std::size_t n = x.dim(0);
  if (x.dim(1) != heads * head_dim || head_dim % 2 != 0 || positions.size() != n) {
    throw ShapeError("rope: bad shape " + shape_str(x.shape()));
  }
  const std::size_t half = head_dim / 2;
  auto table = std::make_shared<std::vector<T>>(2 * n * half);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
      const double ang = static_cast<double>(positions[r]) * freq;
      (*table)[2 * (r * half + i)] = static_cast<T>(std::cos(ang));
      (*table)[2 * (r * half + i) + 1] = static_cast<T>(std::sin(ang));
    }
  }
  const std::size_t width = x.dim(1);
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t h = 0; h < heads; ++h) {
      const T* in = x.ptr() + r * width + h * head_dim;
      T* o = out.data() + r * width + h * head_dim;
      for (std::size_t i = 0; i < half; ++i) {
        const T cs = (*table)[2 * (r * half + i)], sn = (*table)[2 * (r * half + i) + 1];
        o[i] = in[i] * cs - in[i + half] * sn;
        o[i + half] = in[i] * sn + in[i + half] * cs;
      }
    }
  }
  return detail::make_result<T>(
      x.shape(), std::move(out), "rope", {x}, [n, heads, head_dim, half, width, table](NodeT<T>& self) {
        auto& X = *self.inputs[0];
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t h = 0; h < heads; ++h) {
            const T* g = self.grad.data() + r * width + h * head_dim;
            T* gx = X.grad.data() + r * width + h * head_dim;
            for (std::size_t i = 0; i < half; ++i) {
              const T cs = (*table)[2 * (r * half + i)], sn = (*table)[2 * (r * half + i) + 1];
              gx[i] += g[i] * cs + g[i + half] * sn;
              gx[i + half] += -g[i] * sn + g[i + half] * cs;
            }
          }
        }
      });
}

template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    std::span<const int> q_positions, const AttentionShape& shape) {
  require_rank2(q.shape(), "attention");
  require_rank2(k.shape(), "attention");
  require_rank2(v.shape(), "attention");
  const std::size_t H = shape.n_heads, Hkv = shape.n_kv_heads, dq = shape.qk_dim,
                    dv = shape.v_dim;
  const std::size_t n = q.dim(0), m = k.dim(0);
  if (Hkv == 0 || H % Hkv != 0) {
    throw ShapeError("attention: query heads must be a multiple of kv heads");
  }
  if (q.dim(1) != H * dq || k.dim(1) != Hkv * dq || v.dim(1) != Hkv * dv || v.dim(0) != m) {
    throw ShapeError("attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                     ", v " + shape_str(v.shape()) + " inconsistent with head layout");
  }
  if (q_positions.size() != n) {
    throw ShapeError("attention: one position per query row required");
  }
  if (shape.window && *shape.window == 0) {
    throw ConfigError("attention: window must be >= 1");
  }
  const std::size_t group = H / Hkv;
  const T sc = static_cast<T>(shape.scale);
  // Visible key range per query row.
  auto ranges = std::make_shared<std::vector<std::pair<std::size_t, std::size_t>>>(n);
  std::size_t prob_total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (q_positions[i] < 0 || static_cast<std::size_t>(q_positions[i]) >= m) {
      throw ShapeError("attention: query position " + std::to_string(q_positions[i]) +
                       " has no key (cache holds " + std::to_string(m) + ")");
    }
    const std::size_t pos = static_cast<std::size_t>(q_positions[i]);
    const std::size_t hi = pos + 1;
    const std::size_t lo = shape.window && pos + 1 > *shape.window ? pos + 1 - *shape.window : 0;
    (*ranges)[i] = {lo, hi};
    prob_total += hi - lo;
  }
  const bool keep = grad_enabled() && (q.requires_grad() || k.requires_grad() || v.requires_grad());
  auto probs = std::make_shared<std::vector<T>>(keep ? prob_total * H : 0);
  std::vector<T> scratch(keep ? 0 : m);
  std::vector<T> out(n * H * dv);
  std::size_t off = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto [lo, hi] = (*ranges)[i];
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t kvh = h / group;
      T* p = keep ? probs->data() + (off * H) + h * (hi - lo) : scratch.data();
      kernels::attend_row<T>(q.ptr() + i * H * dq + h * dq, dq, {k.ptr(), Hkv * dq, kvh * dq},
                             {v.ptr(), Hkv * dv, kvh * dv}, dv, lo, hi, sc, p,
                             out.data() + i * H * dv + h * dv);
    }
    off += hi - lo;
  }
  return detail::make_result<T>(
      Shape{n, H * dv}, std::move(out), "attention", {q, k, v},
      [=](NodeT<T>& self) {
        auto& Q = *self.inputs[0];
        auto& K = *self.inputs[1];
        auto& V = *self.inputs[2];
        std::vector<T> dp;
        std::size_t o = 0;
        for (std::size_t i = 0; i < n; ++i) {
          const auto [lo, hi] = (*ranges)[i];
          const std::size_t cnt = hi - lo;
          dp.resize(cnt);
          for (std::size_t h = 0; h < H; ++h) {
            const std::size_t kvh = h / group;
            const T* p = probs->data() + o * H + h * cnt;
            const T* g = self.grad.data() + i * H * dv + h * dv;
            const T* qr = Q.data.data() + i * H * dq + h * dq;
            T dot{0};
            for (std::size_t j = 0; j < cnt; ++j) {
              const T* vr = V.data.data() + (lo + j) * Hkv * dv + kvh * dv;
              T acc{0};
              for (std::size_t c = 0; c < dv; ++c) acc += g[c] * vr[c];
              dp[j] = acc;
              dot += acc * p[j];
              if (V.requires_grad) {
                T* gv = V.grad.data() + (lo + j) * Hkv * dv + kvh * dv;
                for (std::size_t c = 0; c < dv; ++c) gv[c] += p[j] * g[c];
              }
            }
            for (std::size_t j = 0; j < cnt; ++j) {
              const T ds = p[j] * (dp[j] - dot) * sc;
              const T* kr = K.data.data() + (lo + j) * Hkv * dq + kvh * dq;
              if (Q.requires_grad) {
                T* gq = Q.grad.data() + i * H * dq + h * dq;
                for (std::size_t c = 0; c < dq; ++c) gq[c] += ds * kr[c];
              }
              if (K.requires_grad) {
                T* gk = K.grad.data() + (lo + j) * Hkv * dq + kvh * dq;
                for (std::size_t c = 0; c < dq; ++c) gk[c] += ds * qr[c];
              }
            }
          }
          o += cnt;
        }
      });
}

template <typename T>
Tensor<T> selective_scan(const Tensor<T>& u, const Tensor<T>& delta, const Tensor<T>& a,
                         const Tensor<T>& b, const Tensor<T>& cmat, const Tensor<T>& d,
                         std::vector<T>* final_state) {
  require_rank2(u.shape(), "selective_scan");
  const std::size_t n = u.dim(0), c = u.dim(1);
  if (a.rank() != 2 || a.dim(0) != c) {
    throw ShapeError("selective_scan: decay " + shape_str(a.shape()) + " vs channels " +
                     std::to_string(c));
  }
  const std::size_t s = a.dim(1);
  if (delta.shape() != u.shape() || b.shape() != Shape{n, s} || cmat.shape() != Shape{n, s} ||
      d.numel() != c) {
    throw ShapeError("selective_scan: inconsistent input shapes");
  }
  const std::size_t lanes = c * s;
  std::vector<T> A(n * lanes), B(n * lanes);
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T dt = delta[t * c + ch];
      const T du = dt * u[t * c + ch];
      for (std::size_t j = 0; j < s; ++j) {
        A[t * lanes + ch * s + j] = std::exp(dt * a[ch * s + j]);
        B[t * lanes + ch * s + j] = du * b[t * s + j];
      }
    }
  }
  auto H = std::make_shared<std::vector<T>>(n * lanes);
  kernels::linear_recurrence_scan<T>(n, lanes, A, B, *H);
  std::vector<T> out(n * c);
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* h = H->data() + t * lanes + ch * s;
      const T* cr = cmat.ptr() + t * s;
      T acc = d[ch] * u[t * c + ch];
      for (std::size_t j = 0; j < s; ++j) acc += h[j] * cr[j];
      out[t * c + ch] = acc;
    }
  }
  if (final_state) {
    final_state->assign(H->end() - static_cast<std::ptrdiff_t>(lanes), H->end());
  }
  return detail::make_result<T>(
      Shape{n, c}, std::move(out), "selective_scan", {u, delta, a, b, cmat, d},
      [n, c, s, lanes, H](NodeT<T>& self) {
        auto& U = *self.inputs[0];
        auto& Dt = *self.inputs[1];
        auto& Aw = *self.inputs[2];
        auto& Bm = *self.inputs[3];
        auto& Cm = *self.inputs[4];
        auto& Dw = *self.inputs[5];
        const T* dy = self.grad.data();
        // Reverse recurrence g[t] = dy[t] C[t] + a[t+1] g[t+1], scanned on
        // reversed time.
        std::vector<T> ra(n * lanes), rb(n * lanes), G(n * lanes);
        for (std::size_t t = 0; t < n; ++t) {
          const std::size_t tau = n - 1 - t;
          for (std::size_t ch = 0; ch < c; ++ch) {
            const T dtn = t + 1 < n ? Dt.data[(t + 1) * c + ch] : T{0};
            for (std::size_t j = 0; j < s; ++j) {
              const std::size_t l = ch * s + j;
              ra[tau * lanes + l] = t + 1 < n ? std::exp(dtn * Aw.data[l]) : T{0};
              rb[tau * lanes + l] = dy[t * c + ch] * Cm.data[t * s + j];
            }
          }
        }
        kernels::linear_recurrence_scan<T>(n, lanes, ra, rb, G);
        for (std::size_t t = 0; t < n; ++t) {
          const std::size_t tau = n - 1 - t;
          for (std::size_t ch = 0; ch < c; ++ch) {
            const T dt = Dt.data[t * c + ch];
            const T uu = U.data[t * c + ch];
            const T gy = dy[t * c + ch];
            T g_delta{0}, g_u = gy * Dw.data[ch];
            if (Dw.requires_grad) Dw.grad[ch] += gy * uu;
            for (std::size_t j = 0; j < s; ++j) {
              const std::size_t l = ch * s + j;
              const T g = G[tau * lanes + l];
              const T hprev = t > 0 ? (*H)[(t - 1) * lanes + l] : T{0};
              const T at = std::exp(dt * Aw.data[l]);
              const T ga = g * hprev * at;
              const T bt = Bm.data[t * s + j];
              g_delta += ga * Aw.data[l] + g * bt * uu;
              g_u += g * dt * bt;
              if (Aw.requires_grad) Aw.grad[l] += ga * dt;
              if (Bm.requires_grad) Bm.grad[t * s + j] += g * dt * uu;
              if (Cm.requires_grad) Cm.grad[t * s + j] += gy * (*H)[t * lanes + l];
            }
            if (Dt.requires_grad) Dt.grad[t * c + ch] += g_delta;
            if (U.requires_grad) U.grad[t * c + ch] += g_u;
          }
        }
      });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets,
                        std::span<const std::uint8_t> weights) {
  require_rank2(logits.shape(), "cross_entropy");
  const std::size_t n = logits.dim(0), V = logits.dim(1);
  if (targets.size() != n || (!weights.empty() && weights.size() != n)) {
    throw ShapeError("cross_entropy: targets/weights do not match logits rows");
  }
  std::vector<int> tgt(targets.begin(), targets.end());
  std::vector<std::uint8_t> keep(n, 1);
  if (!weights.empty()) {
    std::copy(weights.begin(), weights.end(), keep.begin());
  }
  std::size_t count = 0;
  T total{0};
  auto probs = std::make_shared<std::vector<T>>(n * V, T{0});
  for (std::size_t r = 0; r < n; ++r) {
    if (!keep[r]) continue;
    if (tgt[r] < 0 || static_cast<std::size_t>(tgt[r]) >= V) {
      throw ConfigError("cross_entropy: target " + std::to_string(tgt[r]) + " outside vocab");
    }
    const T* row = logits.ptr() + r * V;
    const T mx = *std::max_element(row, row + V);
    T denom{0};
    for (std::size_t j = 0; j < V; ++j) denom += std::exp(row[j] - mx);
    const T lse = mx + std::log(denom);
    total += lse - row[tgt[r]];
    for (std::size_t j = 0; j < V; ++j) (*probs)[r * V + j] = std::exp(row[j] - lse);
    ++count;
  }
  if (count == 0) {
    throw ConfigError("cross_entropy: no rows selected");
  }
  const T inv = T{1} / static_cast<T>(count);
  return detail::make_result<T>(Shape{1}, {total * inv}, "cross_entropy", {logits},
                                [n, V, tgt, keep, probs, inv](NodeT<T>& self) {
                                  auto& L = *self.inputs[0];
                                  const T g = self.grad[0] * inv;
                                  for (std::size_t r = 0; r < n; ++r) {
                                    if (!keep[r]) continue;
                                    for (std::size_t j = 0; j < V; ++j)
                                      L.grad[r * V + j] += g * (*probs)[r * V + j];
                                    L.grad[r * V + static_cast<std::size_t>(tgt[r])] -= g;
                                  }
                                });
}

#define SAMBAY_INSTANTIATE_OPS(T)                                                              \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> scale(const Tensor<T>&, T);                                               \
  template Tensor<T> silu(const Tensor<T>&);                                                   \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                \
  template Tensor<T> exp(const Tensor<T>&);                                                    \
  template Tensor<T> softplus(const Tensor<T>&);                                               \
  template Tensor<T> sum(const Tensor<T>&);                                                    \
  template Tensor<T> sum_lastdim(const Tensor<T>&);                                            \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> softmax_lastdim(const Tensor<T>&, std::span<const std::uint8_t>);         \
  template Tensor<T> rmsnorm(const Tensor<T>&, const Tensor<T>&, T);                           \
  template Tensor<T> layernorm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);       \
  template Tensor<T> conv1d_depthwise_causal(const Tensor<T>&, const Tensor<T>&);              \
  template Tensor<T> embedding(const Tensor<T>&, std::span<const int>);                        \
  template Tensor<T> gather_rows(const Tensor<T>&, std::span<const int>);                      \
  template Tensor<T> gather_cols(const Tensor<T>&, std::span<const int>);                      \
  template Tensor<T> slice_cols(const Tensor<T>&, std::size_t, std::size_t);                   \
  template Tensor<T> concat_cols(const std::vector<Tensor<T>>&);                               \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                         \
  template Tensor<T> repeat_elements(const Tensor<T>&, std::size_t);                           \
  template Tensor<T> rope(const Tensor<T>&, std::size_t, std::size_t, std::span<const int>,    \
                          double);                                                             \
  template Tensor<T> attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,           \
                               std::span<const int>, const AttentionShape&);                   \
  template Tensor<T> selective_scan(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,      \
                                    const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,      \
                                    std::vector<T>*);                                          \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const int>,                     \
                                   std::span<const std::uint8_t>);

SAMBAY_INSTANTIATE_OPS(float)
SAMBAY_INSTANTIATE_OPS(double)

}  // namespace sambay

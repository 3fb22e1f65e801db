#pragma once

#include <cmath>
#include <cstddef>
#include <span>

// Raw numeric kernels on contiguous row-major buffers. These carry no graph
// and are shared by the autodiff ops and the stepwise decoding runtime.
namespace sambay::kernels {

// C[m,n] = alpha * op(A) * op(B) + beta * C, where op(A) is [m,k] and op(B) is
// [k,n]. A is stored [m,k] (or [k,m] if trans_a) and likewise for B.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha,
          const T* a, const T* b, T beta, T* c);

// Strided view of one head inside a row-major [rows, row_stride] buffer.
template <typename T>
struct HeadView {
  const T* base = nullptr;
  std::size_t row_stride = 0;
  std::size_t offset = 0;

  const T* row(std::size_t r) const { return base + r * row_stride + offset; }
};

// Softmax attention of one query row over keys [key_begin, key_end).
// Writes `probs` (length key_end - key_begin) and `out` (length dv).
template <typename T>
void attend_row(const T* q, std::size_t dqk, HeadView<T> keys, HeadView<T> values, std::size_t dv,
                std::size_t key_begin, std::size_t key_end, T scale, T* probs, T* out);

// Inclusive scan of the first-order recurrence h[t] = a[t] * h[t-1] + b[t]
// with h[-1] = 0, over `steps` time steps and `lanes` independent lanes laid
// out [steps, lanes]. Uses the work-efficient up-sweep / down-sweep tree on
// the associative pair operator (a1,b1) . (a2,b2) = (a1 a2, a2 b1 + b2).
// Results are written to h.
template <typename T>
void linear_recurrence_scan(std::size_t steps, std::size_t lanes, std::span<const T> a,
                            std::span<const T> b, std::span<T> h);

template <typename T>
inline T sigmoid(T x) {
  return x >= T{0} ? T{1} / (T{1} + std::exp(-x)) : std::exp(x) / (T{1} + std::exp(x));
}

template <typename T>
inline T silu(T x) {
  return x * sigmoid(x);
}

template <typename T>
inline T softplus(T x) {
  return x > T{20} ? x : std::log1p(std::exp(x));
}

}  // namespace sambay::kernels

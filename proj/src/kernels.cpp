#include "sambay/kernels.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace sambay::kernels {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using Map = Eigen::Map<RowMat<T>>;

}  // namespace

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha,
          const T* a, const T* b, T beta, T* c) {
  const auto M = static_cast<Eigen::Index>(m);
  const auto N = static_cast<Eigen::Index>(n);
  const auto K = static_cast<Eigen::Index>(k);
  Map<T> C(c, M, N);
  if (beta == T{0}) {
    C.setZero();
  } else if (beta != T{1}) {
    C *= beta;
  }
  if (m == 0 || n == 0 || k == 0) {
    return;
  }
  if (!trans_a && !trans_b) {
    C.noalias() += alpha * ConstMap<T>(a, M, K) * ConstMap<T>(b, K, N);
  } else if (!trans_a && trans_b) {
    C.noalias() += alpha * ConstMap<T>(a, M, K) * ConstMap<T>(b, N, K).transpose();
  } else if (trans_a && !trans_b) {
    C.noalias() += alpha * ConstMap<T>(a, K, M).transpose() * ConstMap<T>(b, K, N);
  } else {
    C.noalias() += alpha * ConstMap<T>(a, K, M).transpose() * ConstMap<T>(b, N, K).transpose();
  }
}

template <typename T>
void attend_row(const T* q, std::size_t dqk, HeadView<T> keys, HeadView<T> values, std::size_t dv,
                std::size_t key_begin, std::size_t key_end, T scale, T* probs, T* out) {
  const std::size_t count = key_end - key_begin;
  T max_logit = -std::numeric_limits<T>::infinity();
  for (std::size_t j = 0; j < count; ++j) {
    const T* kr = keys.row(key_begin + j);
    T dot{0};
    for (std::size_t i = 0; i < dqk; ++i) {
      dot += q[i] * kr[i];
    }
    probs[j] = dot * scale;
    max_logit = std::max(max_logit, probs[j]);
  }
  T denom{0};
  for (std::size_t j = 0; j < count; ++j) {
    probs[j] = std::exp(probs[j] - max_logit);
    denom += probs[j];
  }
  std::fill(out, out + dv, T{0});
  for (std::size_t j = 0; j < count; ++j) {
    probs[j] /= denom;
    const T* vr = values.row(key_begin + j);
    const T p = probs[j];
    for (std::size_t i = 0; i < dv; ++i) {
      out[i] += p * vr[i];
    }
  }
}

template <typename T>
void linear_recurrence_scan(std::size_t steps, std::size_t lanes, std::span<const T> a,
                            std::span<const T> b, std::span<T> h) {
  if (steps == 0) {
    return;
  }
  std::size_t padded = 1;
  while (padded < steps) {
    padded <<= 1;
  }
  // Padding uses the identity element (1, 0).
  std::vector<T> A(padded * lanes, T{1});
  std::vector<T> B(padded * lanes, T{0});
  std::copy(a.begin(), a.begin() + static_cast<std::ptrdiff_t>(steps * lanes), A.begin());
  std::copy(b.begin(), b.begin() + static_cast<std::ptrdiff_t>(steps * lanes), B.begin());

  // Up-sweep: node at `right` accumulates the composition of its subtree.
  for (std::size_t stride = 1; stride < padded; stride <<= 1) {
    for (std::size_t right = 2 * stride - 1; right < padded; right += 2 * stride) {
      const std::size_t left = right - stride;
      T* ar = &A[right * lanes];
      T* br = &B[right * lanes];
      const T* al = &A[left * lanes];
      const T* bl = &B[left * lanes];
      for (std::size_t l = 0; l < lanes; ++l) {
        br[l] = ar[l] * bl[l] + br[l];
        ar[l] = al[l] * ar[l];
      }
    }
  }
  // Down-sweep to an exclusive scan, seeded with the identity at the root.
  std::fill_n(&A[(padded - 1) * lanes], lanes, T{1});
  std::fill_n(&B[(padded - 1) * lanes], lanes, T{0});
  std::vector<T> ta(lanes), tb(lanes);
  for (std::size_t stride = padded >> 1; stride >= 1; stride >>= 1) {
    for (std::size_t right = 2 * stride - 1; right < padded; right += 2 * stride) {
      const std::size_t left = right - stride;
      T* ar = &A[right * lanes];
      T* br = &B[right * lanes];
      T* al = &A[left * lanes];
      T* bl = &B[left * lanes];
      // left <- prefix(right); right <- prefix(right) . old(left)
      std::copy_n(al, lanes, ta.data());
      std::copy_n(bl, lanes, tb.data());
      std::copy_n(ar, lanes, al);
      std::copy_n(br, lanes, bl);
      for (std::size_t l = 0; l < lanes; ++l) {
        // Compose prefix (ar, br) followed by the left subtree (ta, tb).
        br[l] = ta[l] * br[l] + tb[l];
        ar[l] = ar[l] * ta[l];
      }
    }
    if (stride == 1) {
      break;
    }
  }
  // Exclusive prefix applied to h[-1] = 0 gives B; fold in the step itself.
  for (std::size_t t = 0; t < steps; ++t) {
    const T* at = &a[t * lanes];
    const T* bt = &b[t * lanes];
    const T* prev = &B[t * lanes];
    T* ht = &h[t * lanes];
    for (std::size_t l = 0; l < lanes; ++l) {
      ht[l] = at[l] * prev[l] + bt[l];
    }
  }
}

template void gemm<float>(bool, bool, std::size_t, std::size_t, std::size_t, float, const float*,
                          const float*, float, float*);
template void gemm<double>(bool, bool, std::size_t, std::size_t, std::size_t, double,
                           const double*, const double*, double, double*);
template void attend_row<float>(const float*, std::size_t, HeadView<float>, HeadView<float>,
                                std::size_t, std::size_t, std::size_t, float, float*, float*);
template void attend_row<double>(const double*, std::size_t, HeadView<double>, HeadView<double>,
                                 std::size_t, std::size_t, std::size_t, double, double*, double*);
template void linear_recurrence_scan<float>(std::size_t, std::size_t, std::span<const float>,
                                            std::span<const float>, std::span<float>);
template void linear_recurrence_scan<double>(std::size_t, std::size_t, std::span<const double>,
                                             std::span<const double>, std::span<double>);

}  // namespace sambay::kernels

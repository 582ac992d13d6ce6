#pragma once

// Matrix kernels. The forward product uses a fixed-order FMA dot product so
// that any subset of output entries can be recomputed bit-identically (the
// gate-first up projection relies on this). Backward products go through
// Eigen, where no such guarantee is needed.

#include <Eigen/Core>
#include <cmath>
#if defined(__AVX512F__) || defined(__AVX__)
#include <immintrin.h>
#endif
#include <cstddef>
#include <span>

#include "bitnet_a48/tensor.hpp"

namespace ba48::kernels {

inline constexpr std::size_t kLanes = 16;

namespace detail {

template <typename T>
inline T reduce_lanes(T (&acc)[kLanes]) {
  for (std::size_t w = kLanes / 2; w > 0; w /= 2)
    for (std::size_t l = 0; l < w; ++l) acc[l] += acc[l + w];
  return acc[0];
}

/// Eigen's products can leave the upper vector state dirty, which makes
/// later legacy-SSE code (libm's round, for one) many times slower.
inline void clear_upper_state() {
#if defined(__AVX__)
  _mm256_zeroupper();
#endif
}

}  // namespace detail

/// Dot product with a fixed accumulation order independent of the caller:
/// lane l accumulates indices l, l + 16, ... by fused multiply-add, and the
/// lanes are then summed pairwise.
template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
  T acc[kLanes] = {};
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes)
    for (std::size_t l = 0; l < kLanes; ++l) acc[l] = std::fma(a[i + l], b[i + l], acc[l]);
  for (std::size_t l = 0; i + l < n; ++l) acc[l] = std::fma(a[i + l], b[i + l], acc[l]);
  return detail::reduce_lanes(acc);
}

/// Four dot products against a shared right operand. Each result is
/// bit-identical to dot(a_r, b, n).
template <typename T>
void dot4(const T* a0, const T* a1, const T* a2, const T* a3, const T* b, std::size_t n,
          T* out) {
  out[0] = dot(a0, b, n);
  out[1] = dot(a1, b, n);
  out[2] = dot(a2, b, n);
  out[3] = dot(a3, b, n);
}

#if defined(__AVX512F__)
namespace detail {

inline float reduce_vector(__m512 v) {
  alignas(64) float acc[kLanes];
  _mm512_store_ps(acc, v);
  return reduce_lanes(acc);
}

inline __mmask16 tail_mask(std::size_t rem) {
  return static_cast<__mmask16>((1u << rem) - 1u);
}

}  // namespace detail

// Lanes that the tail does not reach keep their value, as in the scalar
// loop; masked-off loads read nothing past the end.
template <>
inline float dot<float>(const float* a, const float* b, std::size_t n) {
  __m512 acc = _mm512_setzero_ps();
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes)
    acc = _mm512_fmadd_ps(_mm512_loadu_ps(a + i), _mm512_loadu_ps(b + i), acc);
  if (i < n) {
    const __mmask16 m = detail::tail_mask(n - i);
    acc = _mm512_mask3_fmadd_ps(_mm512_maskz_loadu_ps(m, a + i), _mm512_maskz_loadu_ps(m, b + i),
                                acc, m);
  }
  return detail::reduce_vector(acc);
}

template <>
inline void dot4<float>(const float* a0, const float* a1, const float* a2, const float* a3,
                        const float* b, std::size_t n, float* out) {
  __m512 c0 = _mm512_setzero_ps(), c1 = c0, c2 = c0, c3 = c0;
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes) {
    const __m512 w = _mm512_loadu_ps(b + i);
    c0 = _mm512_fmadd_ps(_mm512_loadu_ps(a0 + i), w, c0);
    c1 = _mm512_fmadd_ps(_mm512_loadu_ps(a1 + i), w, c1);
    c2 = _mm512_fmadd_ps(_mm512_loadu_ps(a2 + i), w, c2);
    c3 = _mm512_fmadd_ps(_mm512_loadu_ps(a3 + i), w, c3);
  }
  if (i < n) {
    const __mmask16 m = detail::tail_mask(n - i);
    const __m512 w = _mm512_maskz_loadu_ps(m, b + i);
    c0 = _mm512_mask3_fmadd_ps(_mm512_maskz_loadu_ps(m, a0 + i), w, c0, m);
    c1 = _mm512_mask3_fmadd_ps(_mm512_maskz_loadu_ps(m, a1 + i), w, c1, m);
    c2 = _mm512_mask3_fmadd_ps(_mm512_maskz_loadu_ps(m, a2 + i), w, c2, m);
    c3 = _mm512_mask3_fmadd_ps(_mm512_maskz_loadu_ps(m, a3 + i), w, c3, m);
  }
  out[0] = detail::reduce_vector(c0);
  out[1] = detail::reduce_vector(c1);
  out[2] = detail::reduce_vector(c2);
  out[3] = detail::reduce_vector(c3);
}
#endif

/// y[t, j] = dot(x[t, :], w[j, :]) for x of shape [..., in] and w [out, in].
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& x, const Tensor<T>& w) {
  require(w.rank() == 2, "matmul_nt: weight must be 2-D");
  const std::size_t in = w.dim(1), out = w.dim(0);
  require(x.cols() == in, "matmul_nt: input width " + std::to_string(x.cols()) +
                              " does not match weight in-features " + std::to_string(in));
  Shape ys = x.shape();
  ys.back() = out;
  Tensor<T> y(ys);
  const std::size_t rows = x.rows();
  const T* xd = x.data().data();
  const T* wd = w.data().data();
  T* yd = y.data().data();
  std::size_t t = 0;
  for (; t + 4 <= rows; t += 4) {
    const T* a0 = xd + t * in;
    T buf[4];
    for (std::size_t j = 0; j < out; ++j) {
      dot4(a0, a0 + in, a0 + 2 * in, a0 + 3 * in, wd + j * in, in, buf);
      for (std::size_t r = 0; r < 4; ++r) yd[(t + r) * out + j] = buf[r];
    }
  }
  for (; t < rows; ++t)
    for (std::size_t j = 0; j < out; ++j) yd[t * out + j] = dot(xd + t * in, wd + j * in, in);
  return y;
}

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

template <typename T>
ConstMatMap<T> as_matrix(const Tensor<T>& t) {
  return ConstMatMap<T>(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                        static_cast<Eigen::Index>(t.cols()));
}

template <typename T>
MatMap<T> as_matrix(Tensor<T>& t) {
  return MatMap<T>(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                   static_cast<Eigen::Index>(t.cols()));
}

/// dx = dy * w for dy [rows, out], w [out, in].
template <typename T>
Tensor<T> matmul_backward_input(const Tensor<T>& dy, const Tensor<T>& w) {
  Shape xs = dy.shape();
  xs.back() = w.dim(1);
  Tensor<T> dx(xs);
  as_matrix(dx).noalias() = as_matrix(dy) * as_matrix(w);
  detail::clear_upper_state();
  return dx;
}

/// dw += dy^T * x for dy [rows, out], x [rows, in].
template <typename T>
void matmul_backward_weight(const Tensor<T>& dy, const Tensor<T>& x, Tensor<T>& dw) {
  as_matrix(dw).noalias() += as_matrix(dy).transpose() * as_matrix(x);
  detail::clear_upper_state();
}

}  // namespace ba48::kernels

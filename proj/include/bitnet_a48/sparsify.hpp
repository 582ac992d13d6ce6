#pragma once

// Top-K magnitude masking per token row and the sparsify-then-quantize
// composite used for the attention output projection.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "bitnet_a48/quant.hpp"
#include "bitnet_a48/tensor.hpp"

namespace ba48 {

struct TopKMask {
  Shape shape;
  std::vector<std::uint8_t> mask;  // 1 = kept
  double k_fraction = 1.0;
  std::size_t kept_per_row = 0;

  bool kept(std::size_t i) const { return mask[i] != 0; }
};

/// Entries kept in a row of width n: max(1, round(k * n)).
inline std::size_t topk_kept_count(double k_fraction, std::size_t n) {
  const auto k = static_cast<std::size_t>(std::llround(k_fraction * static_cast<double>(n)));
  return std::clamp<std::size_t>(k, 1, n);
}

inline void require_k_fraction(double k_fraction) {
  require(k_fraction > 0.0 && k_fraction <= 1.0, "top-k fraction must lie in (0, 1]");
}

/// Marks the largest-magnitude entries of each innermost row. Ties are
/// broken by the lower index.
template <typename T>
TopKMask topk_mask(const Tensor<T>& x, double k_fraction) {
  require_k_fraction(k_fraction);
  require(!x.empty(), "topk_mask: empty tensor");
  const std::size_t n = x.cols();
  const std::size_t kept = topk_kept_count(k_fraction, n);
  TopKMask m{x.shape(), std::vector<std::uint8_t>(x.size(), 0), k_fraction, kept};
  if (kept == n) {
    std::fill(m.mask.begin(), m.mask.end(), std::uint8_t{1});
    return m;
  }
  std::vector<std::size_t> idx(n);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    std::span<const T> row = x.row(r);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    auto before = [&](std::size_t a, std::size_t b) {
      const T fa = std::fabs(row[a]), fb = std::fabs(row[b]);
      return fa > fb || (fa == fb && a < b);
    };
    std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(kept), idx.end(),
                     before);
    for (std::size_t i = 0; i < kept; ++i) m.mask[r * n + idx[i]] = 1;
  }
  return m;
}

/// Zeroes dropped entries in place.
template <typename T>
void apply_mask(Tensor<T>& x, const TopKMask& m) {
  require(x.shape() == m.shape, "apply_mask: shape mismatch");
  for (std::size_t i = 0; i < x.size(); ++i)
    if (!m.mask[i]) x[i] = T(0);
}

/// INT8 fake quantization with scales from the unmasked input, then masking.
template <typename T>
Tensor<T> sparsify_then_quantize(const Tensor<T>& x, double k_fraction,
                                 TopKMask* mask_out = nullptr) {
  TopKMask m = topk_mask(x, k_fraction);
  Tensor<T> y = fake_quant(x, QuantScheme::int8());
  apply_mask(y, m);
  if (mask_out) *mask_out = std::move(m);
  return y;
}

/// Fraction of entries that are exactly zero.
template <typename T>
double measure_sparsity(const Tensor<T>& x) {
  require(!x.empty(), "measure_sparsity: empty tensor");
  std::size_t zeros = 0;
  for (const T& v : x.data()) zeros += v == T(0) ? 1 : 0;
  return static_cast<double>(zeros) / static_cast<double>(x.size());
}

/// Per token row, the channels whose gate value is nonzero.
template <typename T>
std::vector<std::vector<std::size_t>> gate_active_channels(const Tensor<T>& gate) {
  std::vector<std::vector<std::size_t>> active(gate.rows());
  for (std::size_t r = 0; r < gate.rows(); ++r) {
    std::span<const T> row = gate.row(r);
    for (std::size_t j = 0; j < row.size(); ++j)
      if (row[j] != T(0)) active[r].push_back(j);
  }
  return active;
}

}  // namespace ba48

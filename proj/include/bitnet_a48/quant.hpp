#pragma once

// Weight and activation quantizers: ternary absmean, INT8 absmax, INT4 absmean,
// FP4 MinMax on an ExMy grid, and unsigned absmax for attention heads.
//
// Every quantizer returns codes plus one scale per scaling group. A scaling
// group is either the whole tensor (PerTensor) or one innermost row
// (PerToken). Rounding is half away from zero throughout.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "bitnet_a48/tensor.hpp"

namespace ba48 {

/// Added to every scale denominator that can be zero.
inline constexpr double kQuantEps = 1e-6;

enum class Granularity : std::uint8_t { PerTensor = 0, PerToken = 1 };

struct QuantScheme {
  enum class Variant : std::uint8_t {
    Identity = 0,
    TernaryAbsmean = 1,
    Int8Absmax = 2,
    Int4Absmean = 3,
    Fp4MinMax = 4,
    UnsignedAbsmax = 5,
  };

  Variant variant = Variant::Identity;
  Granularity granularity = Granularity::PerToken;
  double multiplier = 1.0;  // Int4Absmean: beta = multiplier * mean(|X|)
  int exp_bits = 2;         // Fp4MinMax
  int man_bits = 1;         // Fp4MinMax
  int bits = 4;             // UnsignedAbsmax

  static QuantScheme identity() { return {}; }
  static QuantScheme ternary() {
    return {Variant::TernaryAbsmean, Granularity::PerTensor, 1.0, 2, 1, 2};
  }
  static QuantScheme int8(Granularity g = Granularity::PerToken) {
    return {Variant::Int8Absmax, g, 1.0, 2, 1, 8};
  }
  static QuantScheme int4(double multiplier = 1.0, Granularity g = Granularity::PerToken) {
    return {Variant::Int4Absmean, g, multiplier, 2, 1, 4};
  }
  static QuantScheme fp4(int e = 2, int m = 1, Granularity g = Granularity::PerToken) {
    return {Variant::Fp4MinMax, g, 1.0, e, m, 4};
  }
  static QuantScheme unsigned_absmax(int bits, Granularity g = Granularity::PerToken) {
    return {Variant::UnsignedAbsmax, g, 1.0, 2, 1, bits};
  }

  /// Symmetric schemes map zero to exactly zero.
  bool symmetric() const noexcept { return variant != Variant::UnsignedAbsmax; }

  void validate() const {
    switch (variant) {
      case Variant::Identity:
      case Variant::TernaryAbsmean:
      case Variant::Int8Absmax:
        return;
      case Variant::Int4Absmean:
        require(multiplier == 1.0 || multiplier == 2.0, "Int4Absmean multiplier must be 1 or 2");
        return;
      case Variant::Fp4MinMax:
        require(exp_bits >= 1 && man_bits >= 0 && exp_bits + man_bits == 3,
                "Fp4MinMax needs exponent + mantissa bits == 3");
        return;
      case Variant::UnsignedAbsmax:
        require(bits == 3 || bits == 4, "UnsignedAbsmax bits must be 3 or 4");
        return;
    }
    throw DomainError("unknown quantization scheme");
  }

  std::string name() const {
    switch (variant) {
      case Variant::Identity: return "identity";
      case Variant::TernaryAbsmean: return "ternary";
      case Variant::Int8Absmax: return "int8-absmax";
      case Variant::Int4Absmean: return multiplier == 2.0 ? "int4-absmean-x2" : "int4-absmean";
      case Variant::Fp4MinMax:
        return "fp4-e" + std::to_string(exp_bits) + "m" + std::to_string(man_bits);
      case Variant::UnsignedAbsmax: return "u" + std::to_string(bits) + "-absmax";
    }
    return "unknown";
  }

  /// Inclusive code range of the scheme.
  std::pair<int, int> code_range() const {
    switch (variant) {
      case Variant::TernaryAbsmean: return {-1, 1};
      case Variant::Int8Absmax: return {-128, 127};
      case Variant::Int4Absmean: return {-8, 7};
      case Variant::Fp4MinMax: {
        const int top = (1 << (exp_bits + man_bits)) - 1;
        return {-top, top};
      }
      case Variant::UnsignedAbsmax: return {0, (1 << bits) - 1};
      case Variant::Identity: break;
    }
    throw DomainError("scheme " + name() + " has no integer codes");
  }

  friend bool operator==(const QuantScheme&, const QuantScheme&) = default;
};

/// Inverse of QuantScheme::name(); granularity defaults to PerToken.
inline QuantScheme parse_quant_scheme(const std::string& n,
                                      Granularity g = Granularity::PerToken) {
  if (n == "identity" || n == "none") return QuantScheme::identity();
  if (n == "ternary") return QuantScheme::ternary();
  if (n == "int8-absmax" || n == "int8") return QuantScheme::int8(g);
  if (n == "int4-absmean" || n == "int4") return QuantScheme::int4(1.0, g);
  if (n == "int4-absmean-x2" || n == "int4x2") return QuantScheme::int4(2.0, g);
  if (n == "fp4") return QuantScheme::fp4(2, 1, g);
  // fp4-eXmY
  if (n.size() == 8 && n.rfind("fp4-e", 0) == 0 && n[6] == 'm') {
    QuantScheme s = QuantScheme::fp4(n[5] - '0', n[7] - '0', g);
    s.validate();
    return s;
  }
  if (n == "u4-absmax" || n == "u4") return QuantScheme::unsigned_absmax(4, g);
  if (n == "u3-absmax" || n == "u3") return QuantScheme::unsigned_absmax(3, g);
  throw DomainError("unknown quantization scheme '" + n + "'");
}

template <typename T>
struct QuantizedTensor {
  Shape shape;
  std::vector<std::int32_t> codes;
  std::vector<T> scales;  // alpha, gamma or beta, one per scaling group
  QuantScheme scheme;

  std::size_t group_size() const { return codes.size() / scales.size(); }
};

namespace detail {

template <typename T>
T round_half_away(T v) {
  // Same result as std::round, but inlinable: v - trunc(v) is exact.
  T t = std::trunc(v);
  if (std::fabs(v - t) >= T(0.5)) t += std::copysign(T(1), v);
  return t;
}

template <typename T>
T clamp_round(T v, T lo, T hi) {
  return std::min(std::max(round_half_away(v), lo), hi);
}

/// Number of scaling groups and entries per group.
template <typename T>
std::pair<std::size_t, std::size_t> groups_of(const Tensor<T>& x, Granularity g) {
  require(!x.empty(), "quantizer: empty tensor");
  if (g == Granularity::PerTensor) return {1, x.size()};
  return {x.rows(), x.cols()};
}

template <typename T>
T group_abs_mean(std::span<const T> v) {
  double s = 0.0;
  for (T e : v) s += std::fabs(static_cast<double>(e));
  return static_cast<T>(s / static_cast<double>(v.size()));
}

template <typename T>
T group_abs_max(std::span<const T> v) {
  T m = T(0);
  for (T e : v) m = std::max(m, std::fabs(e));
  return m;
}

}  // namespace detail

/// Magnitudes representable by an ExMy minifloat with bias 2^(E-1)-1,
/// ascending, including zero. E2M1 gives {0, 0.5, 1, 1.5, 2, 3, 4, 6}.
inline std::vector<double> minifloat_grid(int exp_bits, int man_bits) {
  std::vector<double> grid;
  const int bias = (1 << (exp_bits - 1)) - 1;
  const int mant_levels = 1 << man_bits;
  for (int e = 0; e < (1 << exp_bits); ++e) {
    for (int m = 0; m < mant_levels; ++m) {
      const double frac = static_cast<double>(m) / mant_levels;
      const double v = e == 0 ? frac * std::ldexp(1.0, 1 - bias)
                              : (1.0 + frac) * std::ldexp(1.0, e - bias);
      grid.push_back(v);
    }
  }
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  return grid;
}

/// round(x) clipped to [lo, hi], elementwise.
template <typename T>
T round_clip(T x, T lo, T hi) {
  require(lo <= hi, "round_clip: lower bound exceeds upper bound");
  require(std::isfinite(x), "round_clip: non-finite input");
  return detail::clamp_round(x, lo, hi);
}

template <typename T>
Tensor<T> round_clip(const Tensor<T>& x, T lo, T hi) {
  require(lo <= hi, "round_clip: lower bound exceeds upper bound");
  require_finite(x, "round_clip");
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = detail::clamp_round(x[i], lo, hi);
  return y;
}

template <typename T>
QuantizedTensor<T> quantize(const Tensor<T>& x, const QuantScheme& scheme) {
  using V = QuantScheme::Variant;
  scheme.validate();
  require(scheme.variant != V::Identity, "quantize: identity scheme has no codes");
  require_finite(x, "quantize");

  const auto [n_groups, width] = detail::groups_of(x, scheme.granularity);
  QuantizedTensor<T> q{x.shape(), std::vector<std::int32_t>(x.size()), std::vector<T>(n_groups),
                       scheme};
  const T eps = static_cast<T>(kQuantEps);
  const std::vector<double> grid =
      scheme.variant == V::Fp4MinMax ? minifloat_grid(scheme.exp_bits, scheme.man_bits)
                                     : std::vector<double>{};

  for (std::size_t g = 0; g < n_groups; ++g) {
    std::span<const T> v = x.data().subspan(g * width, width);
    std::int32_t* codes = q.codes.data() + g * width;
    switch (scheme.variant) {
      case V::TernaryAbsmean: {
        const T alpha = detail::group_abs_mean(v);
        for (std::size_t i = 0; i < width; ++i)
          codes[i] = static_cast<std::int32_t>(detail::clamp_round(v[i] / (alpha + eps), T(-1), T(1)));
        q.scales[g] = alpha;
        break;
      }
      case V::Int8Absmax: {
        const T gamma = detail::group_abs_max(v);
        for (std::size_t i = 0; i < width; ++i)
          codes[i] = static_cast<std::int32_t>(
              detail::clamp_round(T(127) * v[i] / (gamma + eps), T(-128), T(127)));
        q.scales[g] = gamma;
        break;
      }
      case V::Int4Absmean: {
        const T beta = static_cast<T>(scheme.multiplier) * detail::group_abs_mean(v);
        const T sqrt7 = std::sqrt(T(7));
        for (std::size_t i = 0; i < width; ++i)
          codes[i] = static_cast<std::int32_t>(
              detail::clamp_round(sqrt7 * v[i] / (beta + eps), T(-8), T(7)));
        q.scales[g] = beta;
        break;
      }
      case V::Fp4MinMax: {
        // Nearest grid point after mapping the group max onto the largest
        // grid magnitude; ties go to the larger magnitude, which is what
        // round-half-away inside each binade produces.
        const T gamma = detail::group_abs_max(v);
        const T top = static_cast<T>(grid.back());
        for (std::size_t i = 0; i < width; ++i) {
          if (gamma == T(0)) {
            codes[i] = 0;
            continue;
          }
          const T z = std::fabs(v[i]) / gamma * top;
          std::size_t best = 0;
          for (std::size_t k = 1; k < grid.size(); ++k) {
            const T dk = std::fabs(z - static_cast<T>(grid[k]));
            const T db = std::fabs(z - static_cast<T>(grid[best]));
            if (dk <= db) best = k;
            else break;
          }
          const auto idx = static_cast<std::int32_t>(best);
          codes[i] = std::signbit(v[i]) ? -idx : idx;
        }
        q.scales[g] = gamma;
        break;
      }
      case V::UnsignedAbsmax: {
        const T gamma = detail::group_abs_max(v);
        const T levels = static_cast<T>((1 << scheme.bits) - 1);
        for (std::size_t i = 0; i < width; ++i) {
          const T r = gamma > T(0) ? v[i] / gamma : T(0);
          codes[i] = static_cast<std::int32_t>(
              detail::clamp_round((r + T(1)) / T(2) * levels, T(0), levels));
        }
        q.scales[g] = gamma;
        break;
      }
      case V::Identity:
        break;
    }
  }
  return q;
}

template <typename T>
Tensor<T> dequantize(const QuantizedTensor<T>& q) {
  using V = QuantScheme::Variant;
  q.scheme.validate();
  require(!q.scales.empty() && q.codes.size() % q.scales.size() == 0,
          "dequantize: inconsistent scale count");
  Tensor<T> y(q.shape);
  require(y.size() == q.codes.size(), "dequantize: code count does not match shape");
  const std::size_t width = q.group_size();
  const std::vector<double> grid = q.scheme.variant == V::Fp4MinMax
                                       ? minifloat_grid(q.scheme.exp_bits, q.scheme.man_bits)
                                       : std::vector<double>{};

  for (std::size_t g = 0; g < q.scales.size(); ++g) {
    const T s = q.scales[g];
    for (std::size_t i = g * width; i < (g + 1) * width; ++i) {
      const std::int32_t c = q.codes[i];
      // Level factors are formed first so the extreme code reproduces the
      // scale exactly; that keeps absmax-style schemes idempotent.
      switch (q.scheme.variant) {
        case V::TernaryAbsmean: y[i] = s * static_cast<T>(c); break;
        case V::Int8Absmax: y[i] = s * (static_cast<T>(c) / T(127)); break;
        case V::Int4Absmean: y[i] = s * (static_cast<T>(c) / std::sqrt(T(7))); break;
        case V::Fp4MinMax: {
          const std::size_t idx = static_cast<std::size_t>(c < 0 ? -c : c);
          require(idx < grid.size(), "dequantize: FP4 code outside grid");
          const T level = static_cast<T>(grid[idx] / grid.back());
          y[i] = c < 0 ? -(s * level) : s * level;
          break;
        }
        case V::UnsignedAbsmax: {
          const std::int32_t levels = (1 << q.scheme.bits) - 1;
          y[i] = s * (static_cast<T>(2 * c - levels) / static_cast<T>(levels));
          break;
        }
        case V::Identity: throw DomainError("dequantize: identity scheme has no codes");
      }
    }
  }
  return y;
}

/// Forward of quantization-aware training: dequantize(quantize(x)).
template <typename T>
Tensor<T> fake_quant(const Tensor<T>& x, const QuantScheme& scheme) {
  scheme.validate();
  if (scheme.variant == QuantScheme::Variant::Identity) {
    require_finite(x, "fake_quant");
    return x;
  }
  return dequantize(quantize(x, scheme));
}

template <typename T>
QuantizedTensor<T> quantize_ternary(const Tensor<T>& w) {
  return quantize(w, QuantScheme::ternary());
}

template <typename T>
QuantizedTensor<T> quantize_int8_absmax(const Tensor<T>& x,
                                        Granularity g = Granularity::PerToken) {
  return quantize(x, QuantScheme::int8(g));
}

template <typename T>
QuantizedTensor<T> quantize_int4_absmean(const Tensor<T>& x, double multiplier = 1.0,
                                         Granularity g = Granularity::PerToken) {
  return quantize(x, QuantScheme::int4(multiplier, g));
}

template <typename T>
QuantizedTensor<T> quantize_fp4_minmax(const Tensor<T>& x, Granularity g = Granularity::PerToken) {
  return quantize(x, QuantScheme::fp4(2, 1, g));
}

template <typename T>
QuantizedTensor<T> quantize_unsigned_absmax(const Tensor<T>& x, int bits,
                                            Granularity g = Granularity::PerToken) {
  return quantize(x, QuantScheme::unsigned_absmax(bits, g));
}

}  // namespace ba48

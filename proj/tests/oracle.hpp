#pragma once

// Reference implementations for tests. Everything here works in double
// straight from the defining formulas and shares no code with the library.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

namespace oracle {

inline constexpr double kEps = 1e-6;

inline double round_away(double v) { return v < 0 ? -std::floor(-v + 0.5) : std::floor(v + 0.5); }

inline double round_clip(double v, double lo, double hi) {
  return std::min(std::max(round_away(v), lo), hi);
}

inline double mean_abs(const std::vector<double>& x) {
  double s = 0;
  for (double v : x) s += std::fabs(v);
  return s / static_cast<double>(x.size());
}

inline double max_abs(const std::vector<double>& x) {
  double m = 0;
  for (double v : x) m = std::max(m, std::fabs(v));
  return m;
}

struct Quantized {
  std::vector<int> codes;
  double scale = 0;
};

inline Quantized ternary(const std::vector<double>& w) {
  Quantized q;
  q.scale = mean_abs(w);
  for (double v : w) q.codes.push_back(static_cast<int>(round_clip(v / (q.scale + kEps), -1, 1)));
  return q;
}

inline Quantized int8(const std::vector<double>& x) {
  Quantized q;
  q.scale = max_abs(x);
  for (double v : x)
    q.codes.push_back(static_cast<int>(round_clip(127.0 * v / (q.scale + kEps), -128, 127)));
  return q;
}

inline Quantized int4(const std::vector<double>& x, double multiplier) {
  Quantized q;
  q.scale = multiplier * mean_abs(x);
  for (double v : x)
    q.codes.push_back(static_cast<int>(round_clip(std::sqrt(7.0) * v / (q.scale + kEps), -8, 7)));
  return q;
}

inline Quantized unsigned_absmax(const std::vector<double>& x, int bits) {
  Quantized q;
  q.scale = max_abs(x);
  const double levels = std::pow(2.0, bits) - 1;
  for (double v : x) {
    const double r = q.scale > 0 ? v / q.scale : 0.0;
    q.codes.push_back(static_cast<int>(round_clip((r + 1) / 2 * levels, 0, levels)));
  }
  return q;
}

inline double unsigned_dequant(int code, double gamma, int bits) {
  const double levels = std::pow(2.0, bits) - 1;
  return (2.0 * code / levels - 1.0) * gamma;
}

inline const std::array<double, 8> kE2M1 = {0, 0.5, 1, 1.5, 2, 3, 4, 6};

/// Brute force over all 16 signed E2M1 values; equidistant candidates
/// resolve to the larger magnitude.
inline std::vector<double> fp4_nearest(const std::vector<double>& x) {
  const double gamma = max_abs(x);
  std::vector<double> y;
  for (double v : x) {
    if (gamma == 0) {
      y.push_back(0);
      continue;
    }
    const double z = v / gamma * 6.0;
    double best = 0, best_d = std::numeric_limits<double>::infinity();
    for (double g : kE2M1)
      for (double s : {-1.0, 1.0}) {
        const double c = s * g;
        const double d = std::fabs(z - c);
        if (d < best_d || (d == best_d && std::fabs(c) > std::fabs(best))) {
          best = c;
          best_d = d;
        }
      }
    y.push_back(best / 6.0 * gamma);
  }
  return y;
}

/// Per-element minifloat formula with exponent offset
/// b = log2((2 - 2^-M) / max|x|) + 2^E - 1 and element scale
/// 2^max(floor(log2|x| + b), 1). With `double_floor` the exponent is
/// floor(floor(log2|x|) + b), which only coincides for integral b.
inline std::vector<double> fp4_formula(const std::vector<double>& x, int e_bits, int m_bits,
                                       bool double_floor = false) {
  const double mx = max_abs(x);
  const double b = std::log2((2.0 - std::pow(2.0, -m_bits)) / mx) + std::pow(2.0, e_bits) - 1;
  std::vector<double> y;
  for (double v : x) {
    if (v == 0) {
      y.push_back(0);
      continue;
    }
    const double l = std::log2(std::fabs(v));
    const double e = double_floor ? std::floor(std::floor(l) + b) : std::floor(l + b);
    const double gamma = std::pow(2.0, std::max(e, 1.0));
    const double step = gamma / std::pow(2.0, m_bits + b);
    y.push_back(step * round_away(v / step));
  }
  return y;
}

inline std::vector<double> random_vector(std::mt19937_64& rng, std::size_t n, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  std::vector<double> v(n);
  for (double& x : v) x = normal(rng);
  return v;
}

}  // namespace oracle

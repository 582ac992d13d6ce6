#pragma once

// Sparsity and activated-parameter accounting per projection site,
// activation histograms, and quantization error reports.

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "bitnet_a48/data.hpp"
#include "bitnet_a48/model.hpp"

namespace ba48 {

/// 1 - (1 - input_sparsity) * (1 - gate_sparsity): fraction of up-projection
/// work skipped when it only runs on nonzero inputs of nonzero gate channels.
inline double composed_up_sparsity(double input_sparsity, double gate_sparsity) {
  require(input_sparsity >= 0.0 && input_sparsity <= 1.0 && gate_sparsity >= 0.0 &&
              gate_sparsity <= 1.0,
          "composed_up_sparsity: sparsities must lie in [0, 1]");
  return 1.0 - (1.0 - input_sparsity) * (1.0 - gate_sparsity);
}

struct SiteSparsity {
  Site site;
  std::size_t params;
  double sparsity_pct;
};

struct SparsityReport {
  std::vector<SiteSparsity> rows;  // qkv, out, up, gate, down
  double overall_pct = 0.0;        // parameter-weighted
  double activated_params = 0.0;
  std::size_t total_params = 0;
  // Ingredients of the up row.
  double up_input_pct = 0.0;
  double gate_output_pct = 0.0;
  double up_composed_pct = 0.0;
  std::size_t tokens = 0;

  const SiteSparsity& row(Site s) const {
    for (const SiteSparsity& r : rows)
      if (r.site == s) return r;
    throw DomainError("sparsity report has no row for " + site_name(s));
  }

  double recomputed_overall_pct() const {
    double num = 0.0, den = 0.0;
    for (const SiteSparsity& r : rows) {
      num += static_cast<double>(r.params) * r.sparsity_pct;
      den += static_cast<double>(r.params);
    }
    return num / den;
  }

  std::string csv() const {
    std::ostringstream os;
    os.precision(9);
    os << "site,params,sparsity_pct,activated_params\n";
    for (const SiteSparsity& r : rows)
      os << site_name(r.site) << ',' << r.params << ',' << r.sparsity_pct << ','
         << static_cast<double>(r.params) * (1.0 - r.sparsity_pct / 100.0) << '\n';
    os << "overall," << total_params << ',' << overall_pct << ',' << activated_params << '\n';
    return os.str();
  }

  nlohmann::json json() const {
    nlohmann::json j;
    for (const SiteSparsity& r : rows)
      j["sites"][site_name(r.site)] = {{"params", r.params}, {"sparsity_pct", r.sparsity_pct}};
    j["overall_pct"] = overall_pct;
    j["activated_params"] = activated_params;
    j["total_params"] = total_params;
    j["up_input_pct"] = up_input_pct;
    j["gate_output_pct"] = gate_output_pct;
    j["up_composed_pct"] = up_composed_pct;
    j["tokens"] = tokens;
    return j;
  }
};

namespace detail {

template <typename T>
std::size_t count_zeros(std::span<const T> v) {
  return static_cast<std::size_t>(std::count(v.begin(), v.end(), T(0)));
}

}  // namespace detail

/// Runs n_batches forwards and measures the zero fraction of the input each
/// projection actually consumes. The up row counts skipped multiply-adds of
/// the gate-first evaluation, per token.
template <typename T>
SparsityReport sparsity_report(const TransformerModel<T>& model, DataStream& eval,
                               std::size_t n_batches) {
  require(n_batches > 0, "sparsity_report: empty evaluation stream");
  double zeros[5] = {}, totals[5] = {};
  double up_in_zero = 0, up_in_total = 0, gate_zero = 0, gate_total = 0;
  double up_work = 0, up_work_total = 0;
  auto idx = [](Site s) { return static_cast<std::size_t>(s); };
  std::size_t tokens = 0;
  for (std::size_t b = 0; b < n_batches; ++b) {
    const Batch batch = eval.next();
    typename TransformerModel<T>::Trace tr;
    model.forward(batch.inputs, &tr);
    tokens += batch.inputs.ids.size();
    for (const auto& bt : tr.blocks) {
      auto add = [&](Site s, const Tensor<T>& x) {
        zeros[idx(s)] += static_cast<double>(detail::count_zeros(x.data()));
        totals[idx(s)] += static_cast<double>(x.size());
      };
      add(Site::QKV, bt.attn.q_c.xq);
      add(Site::AttnOut, bt.attn.o_c.xq);
      add(Site::Gate, bt.ffn.gate_c.xq);
      add(Site::Down, bt.ffn.down_c.xq);
      const Tensor<T>& xu = bt.ffn.up_c.xq;
      const Tensor<T>& g = bt.ffn.gate_act;
      for (std::size_t t = 0; t < xu.rows(); ++t) {
        const double nz_x = static_cast<double>(xu.cols() - detail::count_zeros(xu.row(t)));
        const double nz_g = static_cast<double>(g.cols() - detail::count_zeros(g.row(t)));
        up_work += nz_x * nz_g;
        up_work_total += static_cast<double>(xu.cols() * g.cols());
      }
      up_in_zero += static_cast<double>(detail::count_zeros(xu.data()));
      up_in_total += static_cast<double>(xu.size());
      gate_zero += static_cast<double>(detail::count_zeros(g.data()));
      gate_total += static_cast<double>(g.size());
    }
  }
  zeros[idx(Site::Up)] = up_work_total - up_work;
  totals[idx(Site::Up)] = up_work_total;

  SparsityReport rep;
  rep.tokens = tokens;
  const ModelConfig& cfg = model.config;
  double num = 0.0;
  for (Site s : kProjectionSites) {
    const double pct = 100.0 * zeros[idx(s)] / totals[idx(s)];
    const std::size_t params = cfg.site_parameters(s);
    rep.rows.push_back({s, params, pct});
    rep.total_params += params;
    num += static_cast<double>(params) * pct;
    rep.activated_params += static_cast<double>(params) * (1.0 - pct / 100.0);
  }
  rep.overall_pct = num / static_cast<double>(rep.total_params);
  rep.up_input_pct = 100.0 * up_in_zero / up_in_total;
  rep.gate_output_pct = 100.0 * gate_zero / gate_total;
  rep.up_composed_pct =
      100.0 * composed_up_sparsity(rep.up_input_pct / 100.0, rep.gate_output_pct / 100.0);
  return rep;
}

struct HistogramSpec {
  std::string site;
  std::vector<double> edges;  // bins + 1 uniform edges
  std::vector<std::size_t> counts;

  std::size_t total() const {
    std::size_t n = 0;
    for (std::size_t c : counts) n += c;
    return n;
  }

  std::size_t occupied_bins() const {
    return static_cast<std::size_t>(
        std::count_if(counts.begin(), counts.end(), [](std::size_t c) { return c > 0; }));
  }

  std::string csv() const {
    std::ostringstream os;
    os.precision(9);
    os << "bin_left,count\n";
    for (std::size_t i = 0; i < counts.size(); ++i) os << edges[i] << ',' << counts[i] << '\n';
    return os.str();
  }
};

/// Uniform-bin histogram over [min, max] of the values. A constant sample
/// gets a unit-wide range centred on the constant.
inline HistogramSpec histogram(const std::vector<double>& values, std::size_t bins,
                               std::string label = {}) {
  require(bins > 0, "histogram: bin count must be positive");
  HistogramSpec h;
  h.site = std::move(label);
  h.counts.assign(bins, 0);
  double lo = 0.0, hi = 1.0;
  if (!values.empty()) {
    const auto [mn, mx] = std::minmax_element(values.begin(), values.end());
    lo = *mn;
    hi = *mx;
  }
  if (hi <= lo) {
    lo -= 0.5;
    hi += 0.5;
  }
  const double width = (hi - lo) / static_cast<double>(bins);
  for (std::size_t i = 0; i <= bins; ++i) h.edges.push_back(lo + width * static_cast<double>(i));
  for (double v : values) {
    auto b = static_cast<std::size_t>((v - lo) / width);
    h.counts[std::min(b, bins - 1)] += 1;
  }
  return h;
}

inline double sample_skewness(const std::vector<double>& v) {
  require(v.size() > 2, "skewness: need at least three samples");
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double m2 = 0.0, m3 = 0.0;
  for (double x : v) {
    const double d = x - mean;
    m2 += d * d;
    m3 += d * d * d;
  }
  m2 /= static_cast<double>(v.size());
  m3 /= static_cast<double>(v.size());
  return m2 > 0 ? m3 / std::pow(m2, 1.5) : 0.0;
}

inline constexpr std::size_t kHistogramCap = 1'000'000;

/// Pre-quantization inputs seen at a site over n_batches forwards, across
/// all layers (layer < 0) or one layer. Strided subsampling caps the sample.
template <typename T>
std::vector<double> collect_site_inputs(const TransformerModel<T>& model, DataStream& eval,
                                        Site site, std::size_t n_batches, int layer = -1) {
  require(site != Site::Head, "activation histogram: head is not a projection site");
  std::vector<double> values;
  for (std::size_t b = 0; b < n_batches; ++b) {
    const Batch batch = eval.next();
    typename TransformerModel<T>::Trace tr;
    model.forward(batch.inputs, &tr);
    for (std::size_t l = 0; l < tr.blocks.size(); ++l) {
      if (layer >= 0 && static_cast<std::size_t>(layer) != l) continue;
      const auto& bt = tr.blocks[l];
      const Tensor<T>* x = nullptr;
      switch (site) {
        case Site::QKV: x = &bt.attn.q_c.x; break;
        case Site::AttnOut: x = &bt.attn.o_c.x; break;
        case Site::Gate: x = &bt.ffn.gate_c.x; break;
        case Site::Up: x = &bt.ffn.up_c.x; break;
        case Site::Down: x = &bt.ffn.down_c.x; break;
        case Site::Head: break;
      }
      for (T v : x->data()) values.push_back(static_cast<double>(v));
    }
  }
  if (values.size() > kHistogramCap) {
    const std::size_t stride = (values.size() + kHistogramCap - 1) / kHistogramCap;
    std::vector<double> sub;
    for (std::size_t i = 0; i < values.size(); i += stride) sub.push_back(values[i]);
    values.swap(sub);
  }
  return values;
}

template <typename T>
HistogramSpec activation_histogram(const TransformerModel<T>& model, DataStream& eval, Site site,
                                   std::size_t bins, std::size_t n_batches = 1, int layer = -1) {
  return histogram(collect_site_inputs(model, eval, site, n_batches, layer), bins,
                   site_name(site));
}

struct QuantErrorRow {
  std::string scheme;
  double mse = 0.0;
  double max_abs_err = 0.0;
  double sparsity = 0.0;
  HistogramSpec histogram;  // of the fake-quantized values
};

/// Error of each scheme's fake quantization against x, plus the histogram
/// of the values each scheme produces.
template <typename T>
std::vector<QuantErrorRow> quant_error_report(const Tensor<T>& x,
                                              const std::vector<InputScheme>& schemes,
                                              std::size_t bins = 64) {
  require(!x.empty(), "quant_error_report: empty tensor");
  std::vector<QuantErrorRow> out;
  for (const InputScheme& s : schemes) {
    const Tensor<T> y = s.sparsify ? sparsify_then_quantize(x, s.k_fraction) : fake_quant(x, s.quant);
    QuantErrorRow row;
    row.scheme = s.name();
    std::vector<double> vals(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) {
      const double e = static_cast<double>(x[i]) - static_cast<double>(y[i]);
      row.mse += e * e;
      row.max_abs_err = std::max(row.max_abs_err, std::fabs(e));
      vals[i] = static_cast<double>(y[i]);
    }
    row.mse /= static_cast<double>(y.size());
    row.sparsity = measure_sparsity(y);
    row.histogram = histogram(vals, bins, row.scheme);
    out.push_back(std::move(row));
  }
  return out;
}

}  // namespace ba48

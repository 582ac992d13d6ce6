#pragma once

// Transformer sub-layers: BitLinear projections with per-site activation
// schemes, the ReLU^2 GLU feed-forward block, rotary embeddings, a low-bit
// KV cache and causal self-attention.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "bitnet_a48/kernels.hpp"
#include "bitnet_a48/quant.hpp"
#include "bitnet_a48/sparsify.hpp"
#include "bitnet_a48/ste.hpp"
#include "bitnet_a48/tensor.hpp"

namespace ba48 {

enum class Site : std::uint8_t { QKV = 0, AttnOut = 1, Gate = 2, Up = 3, Down = 4, Head = 5 };

inline constexpr Site kProjectionSites[] = {Site::QKV, Site::AttnOut, Site::Up, Site::Gate,
                                            Site::Down};

inline std::string site_name(Site s) {
  switch (s) {
    case Site::QKV: return "qkv";
    case Site::AttnOut: return "out";
    case Site::Gate: return "gate";
    case Site::Up: return "up";
    case Site::Down: return "down";
    case Site::Head: return "head";
  }
  return "unknown";
}

inline Site site_from_name(const std::string& n) {
  for (Site s : {Site::QKV, Site::AttnOut, Site::Gate, Site::Up, Site::Down, Site::Head})
    if (site_name(s) == n) return s;
  throw DomainError("unknown site '" + n + "'");
}

/// How a BitLinear quantizes its input: a plain scheme, or INT8 with top-K
/// sparsification.
struct InputScheme {
  QuantScheme quant = QuantScheme::identity();
  bool sparsify = false;
  double k_fraction = 1.0;

  static InputScheme of(QuantScheme q) { return {q, false, 1.0}; }
  static InputScheme sparsify_then_quantize(double k) {
    require_k_fraction(k);
    return {QuantScheme::int8(), true, k};
  }

  std::string name() const {
    if (!sparsify) return quant.name();
    return "topk" + std::to_string(static_cast<int>(std::lround(k_fraction * 100))) + "-int8";
  }

  friend bool operator==(const InputScheme&, const InputScheme&) = default;
};

/// Accepts every QuantScheme name plus "topkNN-int8" for sparsify-then-quantize.
inline InputScheme parse_input_scheme(const std::string& n) {
  if (n.rfind("topk", 0) == 0 && n.size() > 9 && n.substr(n.size() - 5) == "-int8") {
    const int pct = std::stoi(n.substr(4, n.size() - 9));
    return InputScheme::sparsify_then_quantize(pct / 100.0);
  }
  return InputScheme::of(parse_quant_scheme(n));
}

template <typename T>
struct BitLinear {
  Tensor<T> weight;  // latent full-precision weights, [out, in]
  InputScheme input;
  Site site = Site::QKV;
  QuantScheme weight_scheme = QuantScheme::ternary();
  bool dense_topk_ste = false;

  struct Cache {
    Tensor<T> x;   // raw input
    Tensor<T> xq;  // input actually consumed by the product
    Tensor<T> wq;  // quantized weight
    std::optional<TopKMask> mask;
  };

  std::size_t in_features() const { return weight.dim(1); }
  std::size_t out_features() const { return weight.dim(0); }

  Tensor<T> quantized_weight() const { return fake_quant(weight, weight_scheme); }

  Tensor<T> quantize_input(const Tensor<T>& x, std::optional<TopKMask>* mask = nullptr) const {
    if (input.sparsify) {
      TopKMask m;
      Tensor<T> y = sparsify_then_quantize(x, input.k_fraction, &m);
      if (mask) *mask = std::move(m);
      return y;
    }
    return fake_quant(x, input.quant);
  }

  Tensor<T> forward(const Tensor<T>& x, Cache* cache = nullptr) const {
    require(x.cols() == in_features(), "bitlinear: input width " + std::to_string(x.cols()) +
                                           " != in features " + std::to_string(in_features()));
    std::optional<TopKMask> mask;
    Tensor<T> xq = quantize_input(x, &mask);
    Tensor<T> wq = quantized_weight();
    Tensor<T> y = kernels::matmul_nt(xq, wq);
    if (cache) *cache = Cache{x, std::move(xq), std::move(wq), std::move(mask)};
    return y;
  }

  /// Accumulates the latent-weight gradient into dweight and returns dx.
  Tensor<T> backward(const Cache& c, const Tensor<T>& dy, Tensor<T>& dweight) const {
    kernels::matmul_backward_weight(dy, c.xq, dweight);
    Tensor<T> dxq = kernels::matmul_backward_input(dy, c.wq);
    if (c.mask) return ste_backward(SteOp::TopK, dxq, &*c.mask, dense_topk_ste);
    return ste_backward(SteOp::Quantizer, dxq);
  }
};

template <typename T>
Tensor<T> bitlinear_forward(const BitLinear<T>& layer, const Tensor<T>& x) {
  return layer.forward(x);
}

// ---------------------------------------------------------------------------
// Feed-forward

enum class GateActivation : std::uint8_t { ReLU2 = 0, Swish = 1 };

template <typename T>
T relu2(T x) {
  return x > T(0) ? x * x : T(0);
}

template <typename T>
T swish(T x) {
  return x / (T(1) + std::exp(-x));
}

/// Elementwise GLU product; a zero gate contributes an exact +0.
template <typename T>
T glu_product(T up, T gate) {
  return gate != T(0) ? up * gate : T(0);
}

template <typename T>
Tensor<T> gate_activation(const Tensor<T>& pre, GateActivation act) {
  Tensor<T> g(pre.shape());
  for (std::size_t i = 0; i < pre.size(); ++i)
    g[i] = act == GateActivation::ReLU2 ? relu2(pre[i]) : swish(pre[i]);
  return g;
}

/// (X W_up^T) * ReLU^2(X W_gate^T), computed densely.
template <typename T>
Tensor<T> relu2glu(const Tensor<T>& x, const BitLinear<T>& up, const BitLinear<T>& gate) {
  require(up.in_features() == gate.in_features() && up.out_features() == gate.out_features(),
          "relu2glu: up and gate shapes differ");
  Tensor<T> g = gate_activation(gate.forward(x), GateActivation::ReLU2);
  Tensor<T> u = up.forward(x);
  for (std::size_t i = 0; i < u.size(); ++i) u[i] = glu_product(u[i], g[i]);
  return u;
}

/// Same result as relu2glu, but the up projection is evaluated only on the
/// channels whose gate is nonzero.
template <typename T>
Tensor<T> relu2glu_gate_first(const Tensor<T>& x, const BitLinear<T>& up,
                              const BitLinear<T>& gate) {
  require(up.in_features() == gate.in_features() && up.out_features() == gate.out_features(),
          "relu2glu: up and gate shapes differ");
  Tensor<T> g = gate_activation(gate.forward(x), GateActivation::ReLU2);
  const auto active = gate_active_channels(g);
  const Tensor<T> xq = up.quantize_input(x);
  const Tensor<T> wq = up.quantized_weight();
  const std::size_t in = up.in_features();
  Tensor<T> h(g.shape());
  for (std::size_t t = 0; t < active.size(); ++t)
    for (std::size_t j : active[t]) {
      const T u = kernels::dot(xq.row(t).data(), wq.row(j).data(), in);
      h.at(t, j) = glu_product(u, g.at(t, j));
    }
  return h;
}

template <typename T>
struct FeedForward {
  BitLinear<T> gate, up, down;
  GateActivation activation = GateActivation::ReLU2;

  struct Cache {
    typename BitLinear<T>::Cache gate_c, up_c, down_c;
    Tensor<T> gate_pre, gate_act, up_out;
  };

  Tensor<T> forward(const Tensor<T>& x, Cache* cache = nullptr) const {
    Cache local;
    Cache& c = cache ? *cache : local;
    c.gate_pre = gate.forward(x, &c.gate_c);
    c.gate_act = gate_activation(c.gate_pre, activation);
    c.up_out = up.forward(x, &c.up_c);
    Tensor<T> h(c.up_out.shape());
    for (std::size_t i = 0; i < h.size(); ++i) h[i] = glu_product(c.up_out[i], c.gate_act[i]);
    return down.forward(h, &c.down_c);
  }

  Tensor<T> backward(const Cache& c, const Tensor<T>& dy, Tensor<T>& d_gate, Tensor<T>& d_up,
                     Tensor<T>& d_down) const {
    const Tensor<T> dh = down.backward(c.down_c, dy, d_down);
    Tensor<T> du(dh.shape()), dgp(dh.shape());
    for (std::size_t i = 0; i < dh.size(); ++i) {
      du[i] = dh[i] * c.gate_act[i];
      const T dg = dh[i] * c.up_out[i];
      const T p = c.gate_pre[i];
      T deriv;
      if (activation == GateActivation::ReLU2) {
        deriv = p > T(0) ? T(2) * p : T(0);
      } else {
        const T s = T(1) / (T(1) + std::exp(-p));
        deriv = s + p * s * (T(1) - s);
      }
      dgp[i] = dg * deriv;
    }
    Tensor<T> dx = up.backward(c.up_c, du, d_up);
    const Tensor<T> dxg = gate.backward(c.gate_c, dgp, d_gate);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dxg[i];
    return dx;
  }
};

/// Down projection of the INT8-quantized GLU output. The sparsity of the
/// consumed down-projection input is written to down_input_sparsity.
template <typename T>
Tensor<T> ffn_forward(const Tensor<T>& x, const FeedForward<T>& ffn,
                      double* down_input_sparsity = nullptr) {
  typename FeedForward<T>::Cache c;
  Tensor<T> y = ffn.forward(x, &c);
  if (down_input_sparsity) *down_input_sparsity = measure_sparsity(c.down_c.xq);
  return y;
}

// ---------------------------------------------------------------------------
// Rotary embeddings

struct RopeParams {
  std::size_t head_dim = 32;
  double base = 10000.0;
  std::size_t max_positions = 128;

  void validate() const {
    require(head_dim > 0 && head_dim % 2 == 0, "rope: head_dim must be even");
  }
};

/// Rotates adjacent pairs (2i, 2i+1) of one head vector by pos * base^(-2i/d).
/// A negative direction applies the inverse rotation.
template <typename T>
void rope_rotate(std::span<T> v, std::size_t pos, const RopeParams& rope, int direction = 1) {
  const std::size_t d = rope.head_dim;
  for (std::size_t i = 0; i < d / 2; ++i) {
    const double theta = static_cast<double>(pos) *
                         std::pow(rope.base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
    const T c = static_cast<T>(std::cos(theta));
    const T s = static_cast<T>(direction * std::sin(theta));
    const T a = v[2 * i], b = v[2 * i + 1];
    v[2 * i] = a * c - b * s;
    v[2 * i + 1] = a * s + b * c;
  }
}

/// Cosines and sines for positions [0, n), same values rope_rotate uses.
template <typename T>
struct RopeTable {
  std::size_t half = 0;
  std::vector<T> cos, sin;  // [n, head_dim / 2]

  RopeTable(const RopeParams& rope, std::size_t n) : half(rope.head_dim / 2) {
    cos.resize(n * half);
    sin.resize(n * half);
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t i = 0; i < half; ++i) {
        const double theta =
            static_cast<double>(p) * std::pow(rope.base, -2.0 * static_cast<double>(i) /
                                                             static_cast<double>(rope.head_dim));
        cos[p * half + i] = static_cast<T>(std::cos(theta));
        sin[p * half + i] = static_cast<T>(std::sin(theta));
      }
  }

  void rotate(T* v, std::size_t pos, int direction = 1) const {
    const T* c = cos.data() + pos * half;
    const T* sn = sin.data() + pos * half;
    for (std::size_t i = 0; i < half; ++i) {
      const T s = direction < 0 ? -sn[i] : sn[i];
      const T a = v[2 * i], b = v[2 * i + 1];
      v[2 * i] = a * c[i] - b * s;
      v[2 * i + 1] = a * s + b * c[i];
    }
  }
};

/// Applies rotary embeddings to each innermost row of x (width head_dim);
/// row r is at positions[r].
template <typename T>
Tensor<T> rope_apply(const Tensor<T>& x, const std::vector<std::size_t>& positions,
                     const RopeParams& rope) {
  rope.validate();
  require(x.cols() == rope.head_dim, "rope: last dimension must equal head_dim");
  require(positions.size() == x.rows(), "rope: one position per row required");
  Tensor<T> y = x;
  for (std::size_t r = 0; r < y.rows(); ++r) rope_rotate(y.row(r), positions[r], rope);
  return y;
}

// ---------------------------------------------------------------------------
// KV cache

/// Bits at or above this value mean "unquantized".
inline constexpr int kKvOff = 8;
inline constexpr int kQOff = 16;

/// Append-only cache of post-RoPE K and V heads, quantized per head per
/// position with unsigned absmax. With 3-bit KV the first (bos) position is
/// kept at 4 bits.
template <typename T>
class KvCache {
 public:
  KvCache(std::size_t n_heads, std::size_t head_dim, int kv_bits)
      : n_heads_(n_heads), head_dim_(head_dim), kv_bits_(kv_bits) {
    require(kv_bits == 3 || kv_bits == 4 || kv_bits == kKvOff, "kv_bits must be 3, 4 or 8");
  }

  int kv_bits() const { return kv_bits_; }
  int bos_bits() const { return kv_bits_ == 3 ? 4 : kv_bits_; }
  int bits_at(std::size_t pos) const { return pos == 0 ? bos_bits() : kv_bits_; }
  bool quantized() const { return kv_bits_ < kKvOff; }
  std::size_t size() const { return keys_.size(); }
  std::size_t n_heads() const { return n_heads_; }
  std::size_t head_dim() const { return head_dim_; }

  /// k and v hold n_heads * head_dim values for the next position.
  void append(std::span<const T> k, std::span<const T> v) {
    require(k.size() == n_heads_ * head_dim_ && v.size() == k.size(),
            "kv cache: row width mismatch");
    const Shape s{n_heads_, head_dim_};
    Tensor<T> kt(s, std::vector<T>(k.begin(), k.end()));
    Tensor<T> vt(s, std::vector<T>(v.begin(), v.end()));
    if (quantized()) {
      const QuantScheme scheme = QuantScheme::unsigned_absmax(bits_at(size()));
      qkeys_.push_back(quantize(kt, scheme));
      qvalues_.push_back(quantize(vt, scheme));
      keys_.push_back(dequantize(qkeys_.back()));
      values_.push_back(dequantize(qvalues_.back()));
    } else {
      keys_.push_back(std::move(kt));
      values_.push_back(std::move(vt));
    }
  }

  /// Dequantized K / V at a position, shape [n_heads, head_dim].
  const Tensor<T>& key(std::size_t pos) const { return keys_.at(pos); }
  const Tensor<T>& value(std::size_t pos) const { return values_.at(pos); }

  /// Stored codes; only valid when quantized().
  const QuantizedTensor<T>& quantized_key(std::size_t pos) const { return qkeys_.at(pos); }
  const QuantizedTensor<T>& quantized_value(std::size_t pos) const { return qvalues_.at(pos); }

 private:
  std::size_t n_heads_, head_dim_;
  int kv_bits_;
  std::vector<QuantizedTensor<T>> qkeys_, qvalues_;
  std::vector<Tensor<T>> keys_, values_;
};

// ---------------------------------------------------------------------------
// Attention

struct AttentionOptions {
  std::size_t n_heads = 4;
  RopeParams rope;
  int kv_bits = kKvOff;
  int q_bits = kQOff;
  bool causal = true;

  void validate() const {
    rope.validate();
    require(kv_bits == 3 || kv_bits == 4 || kv_bits == kKvOff, "kv_bits must be 3, 4 or 8");
    require(q_bits == 4 || q_bits == kQOff, "q_bits must be 4 or 16");
  }
};

template <typename T>
struct Attention {
  BitLinear<T> q, k, v, o;
  AttentionOptions opts;

  struct Cache {
    typename BitLinear<T>::Cache q_c, k_c, v_c, o_c;
    Tensor<T> qh, kh, vh;  // post-RoPE, post-quantization heads, [B, S, H*d]
    Tensor<T> probs;       // [B, H, S, S]
    std::size_t batch = 0, seq = 0;
  };

  /// x has shape [B, S, hidden]. When caches is non-null it receives one KV
  /// cache per sequence.
  Tensor<T> forward(const Tensor<T>& x, Cache* cache = nullptr,
                    std::vector<KvCache<T>>* caches = nullptr) const {
    opts.validate();
    require(x.rank() == 3, "attention: input must be [batch, seq, hidden]");
    const std::size_t B = x.dim(0), S = x.dim(1), hidden = x.dim(2);
    const std::size_t H = opts.n_heads;
    require(H > 0 && hidden % H == 0, "attention: hidden size not divisible by head count");
    const std::size_t d = hidden / H;
    require(d == opts.rope.head_dim, "attention: head_dim mismatch with rope params");

    Cache local;
    Cache& c = cache ? *cache : local;
    c.batch = B;
    c.seq = S;
    Tensor<T> qh = q.forward(x, &c.q_c);
    Tensor<T> kh = k.forward(x, &c.k_c);
    Tensor<T> vh = v.forward(x, &c.v_c);

    const RopeTable<T> table(opts.rope, S);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t s = 0; s < S; ++s) {
        const std::size_t r = b * S + s;
        for (std::size_t h = 0; h < H; ++h) {
          table.rotate(qh.row(r).data() + h * d, s);
          table.rotate(kh.row(r).data() + h * d, s);
        }
      }

    if (opts.q_bits < kQOff) {
      for (std::size_t r = 0; r < qh.rows(); ++r) {
        std::span<T> row = qh.row(r);
        Tensor<T> heads(Shape{H, d}, std::vector<T>(row.begin(), row.end()));
        const Tensor<T> fq = fake_quant(heads, QuantScheme::unsigned_absmax(opts.q_bits));
        std::copy(fq.data().begin(), fq.data().end(), row.begin());
      }
    }

    if (caches) caches->clear();
    for (std::size_t b = 0; b < B; ++b) {
      KvCache<T> kv(H, d, opts.kv_bits);
      for (std::size_t s = 0; s < S; ++s) {
        const std::size_t r = b * S + s;
        kv.append(kh.row(r), vh.row(r));
        if (kv.quantized()) {
          std::copy(kv.key(s).data().begin(), kv.key(s).data().end(), kh.row(r).begin());
          std::copy(kv.value(s).data().begin(), kv.value(s).data().end(), vh.row(r).begin());
        }
      }
      if (caches) caches->push_back(std::move(kv));
    }

    Tensor<T> probs(Shape{B, H, S, S}, T(0));
    Tensor<T> out(Shape{B, S, hidden}, T(0));
    const T scale = T(1) / std::sqrt(static_cast<T>(d));
    std::vector<T> scores(S);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < H; ++h) {
        T* P = probs.data().data() + ((b * H + h) * S) * S;
        for (std::size_t i = 0; i < S; ++i) {
          const T* qi = qh.row(b * S + i).data() + h * d;
          const std::size_t last = opts.causal ? i + 1 : S;
          T mx = -std::numeric_limits<T>::infinity();
          for (std::size_t j = 0; j < last; ++j) {
            scores[j] = kernels::dot(qi, kh.row(b * S + j).data() + h * d, d) * scale;
            mx = std::max(mx, scores[j]);
          }
          T sum = T(0);
          for (std::size_t j = 0; j < last; ++j) {
            scores[j] = std::exp(scores[j] - mx);
            sum += scores[j];
          }
          T* oi = out.row(b * S + i).data() + h * d;
          for (std::size_t j = 0; j < last; ++j) {
            const T p = scores[j] / sum;
            P[i * S + j] = p;
            const T* vj = vh.row(b * S + j).data() + h * d;
            for (std::size_t e = 0; e < d; ++e) oi[e] += p * vj[e];
          }
        }
      }

    c.qh = std::move(qh);
    c.kh = std::move(kh);
    c.vh = std::move(vh);
    c.probs = std::move(probs);
    return o.forward(out, &c.o_c);
  }

  struct Grads {
    Tensor<T>&dq, &dk, &dv, &do_;
  };

  Tensor<T> backward(const Cache& c, const Tensor<T>& dy, Grads g) const {
    const std::size_t B = c.batch, S = c.seq, H = opts.n_heads;
    const std::size_t hidden = H * opts.rope.head_dim, d = opts.rope.head_dim;
    const Tensor<T> dout = o.backward(c.o_c, dy, g.do_);
    Tensor<T> dq(Shape{B, S, hidden}, T(0)), dk(Shape{B, S, hidden}, T(0)),
        dv(Shape{B, S, hidden}, T(0));
    const T scale = T(1) / std::sqrt(static_cast<T>(d));
    std::vector<T> dp(S);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < H; ++h) {
        const T* P = c.probs.data().data() + ((b * H + h) * S) * S;
        for (std::size_t i = 0; i < S; ++i) {
          const std::size_t last = opts.causal ? i + 1 : S;
          const T* doi = dout.row(b * S + i).data() + h * d;
          T rowdot = T(0);
          for (std::size_t j = 0; j < last; ++j) {
            dp[j] = kernels::dot(doi, c.vh.row(b * S + j).data() + h * d, d);
            rowdot += P[i * S + j] * dp[j];
            T* dvj = dv.row(b * S + j).data() + h * d;
            const T p = P[i * S + j];
            for (std::size_t e = 0; e < d; ++e) dvj[e] += p * doi[e];
          }
          const T* qi = c.qh.row(b * S + i).data() + h * d;
          T* dqi = dq.row(b * S + i).data() + h * d;
          for (std::size_t j = 0; j < last; ++j) {
            const T ds = P[i * S + j] * (dp[j] - rowdot) * scale;
            const T* kj = c.kh.row(b * S + j).data() + h * d;
            T* dkj = dk.row(b * S + j).data() + h * d;
            for (std::size_t e = 0; e < d; ++e) {
              dqi[e] += ds * kj[e];
              dkj[e] += ds * qi[e];
            }
          }
        }
      }
    // Q/K/V quantizers are straight-through; undo the rotation.
    const RopeTable<T> table(opts.rope, S);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t s = 0; s < S; ++s) {
        const std::size_t r = b * S + s;
        for (std::size_t h = 0; h < H; ++h) {
          table.rotate(dq.row(r).data() + h * d, s, -1);
          table.rotate(dk.row(r).data() + h * d, s, -1);
        }
      }
    Tensor<T> dx = q.backward(c.q_c, dq, g.dq);
    const Tensor<T> dxk = k.backward(c.k_c, dk, g.dk);
    const Tensor<T> dxv = v.backward(c.v_c, dv, g.dv);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dxk[i] + dxv[i];
    return dx;
  }
};

template <typename T>
Tensor<T> attention_forward(const Tensor<T>& x, const Attention<T>& attn,
                            std::vector<KvCache<T>>* caches = nullptr) {
  return attn.forward(x, nullptr, caches);
}

// ---------------------------------------------------------------------------
// RMS normalization (full precision)

template <typename T>
struct RmsNorm {
  Tensor<T> gain;  // [hidden]
  T eps = T(1e-6);

  struct Cache {
    Tensor<T> xhat;
    std::vector<T> inv_rms;
  };

  Tensor<T> forward(const Tensor<T>& x, Cache* cache = nullptr) const {
    const std::size_t n = x.cols();
    require(n == gain.size(), "rmsnorm: width mismatch");
    Tensor<T> y(x.shape());
    Cache local;
    Cache& c = cache ? *cache : local;
    c.xhat = Tensor<T>(x.shape());
    c.inv_rms.assign(x.rows(), T(0));
    for (std::size_t r = 0; r < x.rows(); ++r) {
      std::span<const T> xr = x.row(r);
      T ss = T(0);
      for (T e : xr) ss += e * e;
      const T inv = T(1) / std::sqrt(ss / static_cast<T>(n) + eps);
      c.inv_rms[r] = inv;
      for (std::size_t i = 0; i < n; ++i) {
        c.xhat.at(r, i) = xr[i] * inv;
        y.at(r, i) = c.xhat.at(r, i) * gain[i];
      }
    }
    return y;
  }

  Tensor<T> backward(const Cache& c, const Tensor<T>& dy, Tensor<T>& dgain) const {
    const std::size_t n = dy.cols();
    Tensor<T> dx(dy.shape());
    for (std::size_t r = 0; r < dy.rows(); ++r) {
      T m = T(0);
      for (std::size_t i = 0; i < n; ++i) {
        const T dxh = dy.at(r, i) * gain[i];
        dgain[i] += dy.at(r, i) * c.xhat.at(r, i);
        m += dxh * c.xhat.at(r, i);
      }
      m /= static_cast<T>(n);
      for (std::size_t i = 0; i < n; ++i)
        dx.at(r, i) = c.inv_rms[r] * (dy.at(r, i) * gain[i] - c.xhat.at(r, i) * m);
    }
    return dx;
  }
};

}  // namespace ba48

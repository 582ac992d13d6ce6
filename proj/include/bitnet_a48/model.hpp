#pragma once

// Decoder-only Transformer assembled from BitLinear sub-layers, with
// switchable activation regimes (W1.58A8 first stage, hybrid W1.58A4 second).

#include <cmath>
#include <cstdint>
#include <nlohmann/json.hpp>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "bitnet_a48/layers.hpp"
#include "bitnet_a48/tensor.hpp"

namespace ba48 {

enum class Stage : std::uint8_t { Stage1 = 1, Stage2 = 2 };

/// Input scheme bound to each projection site plus the FFN gate activation.
struct ActivationPlan {
  InputScheme qkv, out, gate, up, down;
  GateActivation activation = GateActivation::ReLU2;

  const InputScheme& at(Site s) const {
    switch (s) {
      case Site::QKV: return qkv;
      case Site::AttnOut: return out;
      case Site::Gate: return gate;
      case Site::Up: return up;
      case Site::Down: return down;
      case Site::Head: break;
    }
    throw DomainError("activation plan has no binding for site " + site_name(s));
  }

  static ActivationPlan uniform(InputScheme s) { return {s, s, s, s, s, GateActivation::ReLU2}; }

  friend bool operator==(const ActivationPlan&, const ActivationPlan&) = default;
};

/// Stage 1: every projection input at INT8. Stage 2: QKV/Gate/Up at INT4
/// absmean (FP4 E2M1 in fp4 mode), attention output top-K then INT8, down
/// projection INT8.
inline ActivationPlan stage_plan(Stage stage, bool fp4_mode, double topk = 0.5) {
  if (stage == Stage::Stage1) return ActivationPlan::uniform(InputScheme::of(QuantScheme::int8()));
  const InputScheme four_bit =
      InputScheme::of(fp4_mode ? QuantScheme::fp4() : QuantScheme::int4());
  return {four_bit, InputScheme::sparsify_then_quantize(topk), four_bit, four_bit,
          InputScheme::of(QuantScheme::int8()), GateActivation::ReLU2};
}

struct ModelConfig {
  std::size_t hidden_size = 128;
  std::size_t glu_size = 344;
  std::size_t n_heads = 4;
  std::size_t n_layers = 4;
  std::size_t vocab_size = 256;
  std::size_t seq_len = 128;
  Stage stage = Stage::Stage1;
  bool fp4_mode = false;
  int kv_bits = kKvOff;
  int q_bits = kQOff;
  double rope_base = 10000.0;
  double init_std = 0.02;
  /// Ternary weight quantization; only switched off by gradient checks.
  bool quantize_weights = true;

  std::size_t head_dim() const { return hidden_size / n_heads; }

  void validate() const {
    require(hidden_size > 0 && glu_size > 0 && n_heads > 0 && n_layers > 0 && vocab_size > 0 &&
                seq_len > 0,
            "model config: dimensions must be positive");
    require(hidden_size % n_heads == 0, "model config: hidden_size % n_heads != 0");
    require(head_dim() % 2 == 0, "model config: head_dim must be even for rotary embeddings");
    require(kv_bits == 3 || kv_bits == 4 || kv_bits == kKvOff, "model config: kv_bits in {3,4,8}");
    require(q_bits == 4 || q_bits == kQOff, "model config: q_bits in {4,16}");
  }

  /// Parameters of all projections at one site, summed over layers.
  std::size_t site_parameters(Site s) const {
    const std::size_t h = hidden_size, g = glu_size;
    switch (s) {
      case Site::QKV: return n_layers * 3 * h * h;
      case Site::AttnOut: return n_layers * h * h;
      case Site::Gate:
      case Site::Up:
      case Site::Down: return n_layers * h * g;
      case Site::Head: return vocab_size * h;
    }
    return 0;
  }

  std::size_t projection_parameters() const {
    std::size_t n = 0;
    for (Site s : kProjectionSites) n += site_parameters(s);
    return n;
  }

  /// Everything except the token embedding and the output head.
  std::size_t non_embedding_parameters() const {
    return n_layers * (4 * hidden_size * hidden_size + 3 * hidden_size * glu_size +
                       2 * hidden_size) +
           hidden_size;
  }
};

inline nlohmann::json plan_to_json(const ActivationPlan& p) {
  return {{"qkv", p.qkv.name()},
          {"out", p.out.name()},
          {"gate", p.gate.name()},
          {"up", p.up.name()},
          {"down", p.down.name()},
          {"activation", p.activation == GateActivation::ReLU2 ? "relu2" : "swish"}};
}

inline ActivationPlan plan_from_json(const nlohmann::json& j) {
  ActivationPlan p;
  p.qkv = parse_input_scheme(j.at("qkv").get<std::string>());
  p.out = parse_input_scheme(j.at("out").get<std::string>());
  p.gate = parse_input_scheme(j.at("gate").get<std::string>());
  p.up = parse_input_scheme(j.at("up").get<std::string>());
  p.down = parse_input_scheme(j.at("down").get<std::string>());
  const std::string act = j.value("activation", "relu2");
  require(act == "relu2" || act == "swish", "unknown gate activation '" + act + "'");
  p.activation = act == "relu2" ? GateActivation::ReLU2 : GateActivation::Swish;
  return p;
}

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"hidden_size", c.hidden_size}, {"glu_size", c.glu_size},
          {"n_heads", c.n_heads},         {"n_layers", c.n_layers},
          {"vocab_size", c.vocab_size},   {"seq_len", c.seq_len},
          {"stage", static_cast<int>(c.stage)},
          {"fp4_mode", c.fp4_mode},       {"kv_bits", c.kv_bits},
          {"q_bits", c.q_bits},           {"rope_base", c.rope_base},
          {"init_std", c.init_std},       {"quantize_weights", c.quantize_weights}};
}

/// Missing keys keep their current values in `base`.
inline ModelConfig config_from_json(const nlohmann::json& j, ModelConfig base = {}) {
  ModelConfig c = base;
  c.hidden_size = j.value("hidden_size", c.hidden_size);
  c.glu_size = j.value("glu_size", c.glu_size);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.n_layers = j.value("n_layers", c.n_layers);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.seq_len = j.value("seq_len", c.seq_len);
  const int stage = j.value("stage", static_cast<int>(c.stage));
  require(stage == 1 || stage == 2, "model config: stage must be 1 or 2");
  c.stage = static_cast<Stage>(stage);
  c.fp4_mode = j.value("fp4_mode", c.fp4_mode);
  c.kv_bits = j.value("kv_bits", c.kv_bits);
  c.q_bits = j.value("q_bits", c.q_bits);
  c.rope_base = j.value("rope_base", c.rope_base);
  c.init_std = j.value("init_std", c.init_std);
  c.quantize_weights = j.value("quantize_weights", c.quantize_weights);
  c.validate();
  return c;
}

/// Token ids laid out [batch, seq].
struct TokenBatch {
  std::size_t batch = 0, seq = 0;
  std::vector<std::int32_t> ids;

  std::int32_t at(std::size_t b, std::size_t s) const { return ids[b * seq + s]; }
};

template <typename T>
struct ParamRef {
  std::string name;
  Tensor<T>* tensor;
  Site site;
  bool decay;
};

template <typename T>
class TransformerModel {
 public:
  struct Block {
    RmsNorm<T> attn_norm;
    Attention<T> attn;
    RmsNorm<T> ffn_norm;
    FeedForward<T> ffn;
  };

  struct BlockTrace {
    typename RmsNorm<T>::Cache attn_norm;
    typename Attention<T>::Cache attn;
    typename RmsNorm<T>::Cache ffn_norm;
    typename FeedForward<T>::Cache ffn;
  };

  /// Everything the backward pass needs from one forward.
  struct Trace {
    TokenBatch tokens;
    std::vector<BlockTrace> blocks;
    typename RmsNorm<T>::Cache final_norm;
    typename BitLinear<T>::Cache head;
  };

  ModelConfig config;
  ActivationPlan plan;
  Tensor<T> embedding;  // [vocab, hidden]
  std::vector<Block> blocks;
  RmsNorm<T> final_norm;
  BitLinear<T> head;  // full precision

  /// Gaussian init (std config.init_std) from a seeded generator.
  static TransformerModel init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    TransformerModel m;
    m.config = cfg;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, cfg.init_std);
    auto gaussian = [&](Shape s) {
      Tensor<T> t(std::move(s));
      for (T& v : t.data()) v = static_cast<T>(normal(rng));
      return t;
    };
    const std::size_t h = cfg.hidden_size, g = cfg.glu_size;
    m.embedding = gaussian({cfg.vocab_size, h});
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      Block b;
      b.attn_norm.gain = Tensor<T>(Shape{h}, T(1));
      b.ffn_norm.gain = Tensor<T>(Shape{h}, T(1));
      b.attn.q.weight = gaussian({h, h});
      b.attn.k.weight = gaussian({h, h});
      b.attn.v.weight = gaussian({h, h});
      b.attn.o.weight = gaussian({h, h});
      b.ffn.gate.weight = gaussian({g, h});
      b.ffn.up.weight = gaussian({g, h});
      b.ffn.down.weight = gaussian({h, g});
      m.blocks.push_back(std::move(b));
    }
    m.final_norm.gain = Tensor<T>(Shape{h}, T(1));
    m.head.weight = gaussian({cfg.vocab_size, h});
    m.head.site = Site::Head;
    m.head.input = InputScheme::of(QuantScheme::identity());
    m.head.weight_scheme = QuantScheme::identity();
    m.refresh_bindings();
    m.apply_plan(stage_plan(cfg.stage, cfg.fp4_mode));
    return m;
  }

  /// Rebinds every projection's input scheme. Latent weights are untouched.
  void apply_plan(const ActivationPlan& p) {
    plan = p;
    for (Block& b : blocks) {
      b.attn.q.input = b.attn.k.input = b.attn.v.input = p.qkv;
      b.attn.o.input = p.out;
      b.ffn.gate.input = p.gate;
      b.ffn.up.input = p.up;
      b.ffn.down.input = p.down;
      b.ffn.activation = p.activation;
    }
  }

  /// Pushes config-level options (weight scheme, attention bits, rope) into
  /// every layer.
  void refresh_bindings() {
    config.validate();
    const QuantScheme ws = config.quantize_weights ? QuantScheme::ternary() : QuantScheme::identity();
    AttentionOptions opts;
    opts.n_heads = config.n_heads;
    opts.rope = RopeParams{config.head_dim(), config.rope_base, config.seq_len};
    opts.kv_bits = config.kv_bits;
    opts.q_bits = config.q_bits;
    for (Block& b : blocks) {
      b.attn.opts = opts;
      b.attn.q.site = b.attn.k.site = b.attn.v.site = Site::QKV;
      b.attn.o.site = Site::AttnOut;
      b.ffn.gate.site = Site::Gate;
      b.ffn.up.site = Site::Up;
      b.ffn.down.site = Site::Down;
      for (BitLinear<T>* l : {&b.attn.q, &b.attn.k, &b.attn.v, &b.attn.o, &b.ffn.gate, &b.ffn.up,
                              &b.ffn.down})
        l->weight_scheme = ws;
    }
  }

  void set_dense_topk_ste(bool dense) {
    for (Block& b : blocks) b.attn.o.dense_topk_ste = dense;
  }

  void set_attention_bits(int kv_bits, int q_bits) {
    config.kv_bits = kv_bits;
    config.q_bits = q_bits;
    refresh_bindings();
  }

  /// Fixed parameter order: embedding, per block (attn_norm, q, k, v, o,
  /// ffn_norm, gate, up, down), final norm, head.
  std::vector<ParamRef<T>> parameters() {
    std::vector<ParamRef<T>> p;
    p.push_back({"embedding", &embedding, Site::Head, true});
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      Block& b = blocks[l];
      const std::string pre = "blocks." + std::to_string(l) + ".";
      p.push_back({pre + "attn_norm", &b.attn_norm.gain, Site::QKV, false});
      p.push_back({pre + "q", &b.attn.q.weight, Site::QKV, true});
      p.push_back({pre + "k", &b.attn.k.weight, Site::QKV, true});
      p.push_back({pre + "v", &b.attn.v.weight, Site::QKV, true});
      p.push_back({pre + "o", &b.attn.o.weight, Site::AttnOut, true});
      p.push_back({pre + "ffn_norm", &b.ffn_norm.gain, Site::Gate, false});
      p.push_back({pre + "gate", &b.ffn.gate.weight, Site::Gate, true});
      p.push_back({pre + "up", &b.ffn.up.weight, Site::Up, true});
      p.push_back({pre + "down", &b.ffn.down.weight, Site::Down, true});
    }
    p.push_back({"final_norm", &final_norm.gain, Site::Head, false});
    p.push_back({"head", &head.weight, Site::Head, true});
    return p;
  }

  std::vector<Tensor<T>> zero_gradients() {
    std::vector<Tensor<T>> g;
    for (const ParamRef<T>& p : parameters()) g.emplace_back(p.tensor->shape(), T(0));
    return g;
  }

  /// Logits of shape [batch, seq, vocab].
  Tensor<T> forward(const TokenBatch& tokens, Trace* trace = nullptr,
                    std::vector<std::vector<KvCache<T>>>* kv_caches = nullptr) const {
    const std::size_t B = tokens.batch, S = tokens.seq, h = config.hidden_size;
    require(B > 0 && S > 0 && tokens.ids.size() == B * S, "model_forward: malformed token batch");
    require(S <= config.seq_len, "model_forward: sequence longer than seq_len");
    Tensor<T> x(Shape{B, S, h});
    for (std::size_t i = 0; i < B * S; ++i) {
      const std::int32_t id = tokens.ids[i];
      require(id >= 0 && static_cast<std::size_t>(id) < config.vocab_size,
              "model_forward: token id out of vocabulary");
      std::copy_n(embedding.row(static_cast<std::size_t>(id)).begin(), h, x.row(i).begin());
    }
    if (trace) {
      trace->tokens = tokens;
      trace->blocks.assign(blocks.size(), BlockTrace{});
    }
    if (kv_caches) kv_caches->assign(blocks.size(), {});
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      const Block& b = blocks[l];
      BlockTrace local;
      BlockTrace& bt = trace ? trace->blocks[l] : local;
      const Tensor<T> a = b.attn_norm.forward(x, &bt.attn_norm);
      const Tensor<T> ya = b.attn.forward(a, &bt.attn, kv_caches ? &(*kv_caches)[l] : nullptr);
      for (std::size_t i = 0; i < x.size(); ++i) x[i] += ya[i];
      const Tensor<T> f = b.ffn_norm.forward(x, &bt.ffn_norm);
      const Tensor<T> yf = b.ffn.forward(f, &bt.ffn);
      for (std::size_t i = 0; i < x.size(); ++i) x[i] += yf[i];
    }
    typename RmsNorm<T>::Cache fn_local;
    const Tensor<T> xn = final_norm.forward(x, trace ? &trace->final_norm : &fn_local);
    return head.forward(xn, trace ? &trace->head : nullptr);
  }

  /// Gradients for every entry of parameters(), in the same order.
  std::vector<Tensor<T>> backward(const std::optional<Trace>& trace, const Tensor<T>& dlogits) {
    require(trace.has_value(), "backward: no forward trace recorded");
    const Trace& tr = *trace;
    require(tr.blocks.size() == blocks.size(), "backward: trace does not match model depth");
    std::vector<Tensor<T>> g = zero_gradients();
    const std::size_t n_params = g.size();
    Tensor<T> dxn = head.backward(tr.head, dlogits, g[n_params - 1]);
    Tensor<T> dx = final_norm.backward(tr.final_norm, dxn, g[n_params - 2]);
    for (std::size_t li = blocks.size(); li-- > 0;) {
      const Block& b = blocks[li];
      const BlockTrace& bt = tr.blocks[li];
      const std::size_t base = 1 + 9 * li;
      const Tensor<T> df = b.ffn.backward(bt.ffn, dx, g[base + 6], g[base + 7], g[base + 8]);
      const Tensor<T> dxf = b.ffn_norm.backward(bt.ffn_norm, df, g[base + 5]);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dxf[i];
      const Tensor<T> da = b.attn.backward(
          bt.attn, dx,
          typename Attention<T>::Grads{g[base + 1], g[base + 2], g[base + 3], g[base + 4]});
      const Tensor<T> dxa = b.attn_norm.backward(bt.attn_norm, da, g[base]);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dxa[i];
    }
    const std::size_t h = config.hidden_size;
    for (std::size_t i = 0; i < tr.tokens.ids.size(); ++i) {
      const auto id = static_cast<std::size_t>(tr.tokens.ids[i]);
      std::span<T> ge = g[0].row(id);
      std::span<const T> dr = dx.row(i);
      for (std::size_t e = 0; e < h; ++e) ge[e] += dr[e];
    }
    return g;
  }
};

/// Rebinds activation schemes for a training stage; weights are untouched.
template <typename T>
void configure_stage(TransformerModel<T>& model, Stage stage) {
  model.config.stage = stage;
  model.apply_plan(stage_plan(stage, model.config.fp4_mode));
}

template <typename T>
Tensor<T> model_forward(const TransformerModel<T>& model, const TokenBatch& tokens) {
  return model.forward(tokens);
}

template <typename T>
struct LossResult {
  double loss = 0.0;
  Tensor<T> dlogits;  // gradient of the mean loss
};

/// Mean next-token negative log-likelihood. logits [.., vocab], one target
/// per row.
template <typename T>
LossResult<T> cross_entropy_loss(const Tensor<T>& logits, const std::vector<std::int32_t>& targets) {
  require(logits.rows() == targets.size(), "cross_entropy: one target per logits row required");
  const std::size_t V = logits.cols(), N = logits.rows();
  LossResult<T> r{0.0, Tensor<T>(logits.shape())};
  double total = 0.0;
  for (std::size_t t = 0; t < N; ++t) {
    require(targets[t] >= 0 && static_cast<std::size_t>(targets[t]) < V,
            "cross_entropy: target out of range");
    std::span<const T> row = logits.row(t);
    double mx = -std::numeric_limits<double>::infinity();
    for (T v : row) mx = std::max(mx, static_cast<double>(v));
    double sum = 0.0;
    for (T v : row) sum += std::exp(static_cast<double>(v) - mx);
    const double lse = mx + std::log(sum);
    total += lse - static_cast<double>(row[static_cast<std::size_t>(targets[t])]);
    std::span<T> d = r.dlogits.row(t);
    for (std::size_t j = 0; j < V; ++j)
      d[j] = static_cast<T>(std::exp(static_cast<double>(row[j]) - lse) / static_cast<double>(N));
    d[static_cast<std::size_t>(targets[t])] -= static_cast<T>(1.0 / static_cast<double>(N));
  }
  r.loss = total / static_cast<double>(N);
  return r;
}

}  // namespace ba48

#pragma once

// Quantization-aware training: straight-through gradients into full-precision
// latent weights, AdamW, and the two-stage W1.58A8 -> W1.58A4 schedule with
// optimizer state carried across the boundary.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numbers>
#include <optional>
#include <string_view>
#include <sstream>
#include <string>
#include <vector>

#include "bitnet_a48/data.hpp"
#include "bitnet_a48/model.hpp"

namespace ba48 {

struct TrainerConfig {
  std::size_t total_steps = 1000;
  double stage_split = 0.95;
  double peak_lr = 1.5e-3;
  double second_stage_lr = 1e-3;
  double wd_first = 0.1;
  double wd_second = 0.0;
  std::size_t warmup_steps = 50;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  std::size_t batch_size = 4;
  std::size_t seq_len = 64;
  std::uint64_t seed = 1234;
  double grad_clip = 1.0;  // global norm; 0 disables
  /// false: a single stage-1 schedule over all steps with fixed bindings.
  bool two_stage = true;
  bool dense_topk_ste = false;
  std::size_t smoothing_window = 100;
  std::size_t divergence_patience = 50;
  double divergence_factor = 10.0;

  void validate() const {
    require(stage_split > 0.0 && stage_split < 1.0, "trainer: stage_split must lie in (0, 1)");
    require(peak_lr > 0.0 && second_stage_lr > 0.0, "trainer: learning rates must be positive");
    require(batch_size > 0 && seq_len > 0, "trainer: batch_size and seq_len must be positive");
    require(wd_first >= 0.0 && wd_second >= 0.0, "trainer: weight decay must be non-negative");
    require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "trainer: bad adam betas");
    require(smoothing_window > 0 && divergence_patience > 0, "trainer: bad window sizes");
  }

  /// First step of the second stage.
  std::size_t boundary_step() const {
    if (!two_stage) return total_steps;
    return static_cast<std::size_t>(std::llround(stage_split * static_cast<double>(total_steps)));
  }
};

inline nlohmann::json trainer_to_json(const TrainerConfig& c) {
  return {{"total_steps", c.total_steps},   {"stage_split", c.stage_split},
          {"peak_lr", c.peak_lr},           {"second_stage_lr", c.second_stage_lr},
          {"wd_first", c.wd_first},         {"wd_second", c.wd_second},
          {"warmup_steps", c.warmup_steps}, {"beta1", c.beta1},
          {"beta2", c.beta2},               {"adam_eps", c.adam_eps},
          {"batch_size", c.batch_size},     {"seq_len", c.seq_len},
          {"seed", c.seed},                 {"grad_clip", c.grad_clip},
          {"two_stage", c.two_stage},       {"dense_topk_ste", c.dense_topk_ste},
          {"smoothing_window", c.smoothing_window},
          {"divergence_patience", c.divergence_patience},
          {"divergence_factor", c.divergence_factor}};
}

inline TrainerConfig trainer_from_json(const nlohmann::json& j, TrainerConfig base = {}) {
  TrainerConfig c = base;
  c.total_steps = j.value("total_steps", c.total_steps);
  c.stage_split = j.value("stage_split", c.stage_split);
  c.peak_lr = j.value("peak_lr", c.peak_lr);
  c.second_stage_lr = j.value("second_stage_lr", c.second_stage_lr);
  c.wd_first = j.value("wd_first", c.wd_first);
  c.wd_second = j.value("wd_second", c.wd_second);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seq_len = j.value("seq_len", c.seq_len);
  c.seed = j.value("seed", c.seed);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.two_stage = j.value("two_stage", c.two_stage);
  c.dense_topk_ste = j.value("dense_topk_ste", c.dense_topk_ste);
  c.smoothing_window = j.value("smoothing_window", c.smoothing_window);
  c.divergence_patience = j.value("divergence_patience", c.divergence_patience);
  c.divergence_factor = j.value("divergence_factor", c.divergence_factor);
  c.validate();
  return c;
}

/// Linear warmup then cosine decay peak -> second_stage_lr over stage 1, and
/// cosine second_stage_lr -> 0 over stage 2 (no re-warmup). Weight decay
/// switches from wd_first to wd_second at the boundary.
class Schedule {
 public:
  explicit Schedule(const TrainerConfig& c) : c_(c) {}

  Stage stage_at(std::size_t step) const {
    return step < c_.boundary_step() ? Stage::Stage1 : Stage::Stage2;
  }

  double lr_at(std::size_t step) const {
    const std::size_t boundary = c_.boundary_step();
    if (step < boundary) {
      const std::size_t warm = std::min(c_.warmup_steps, boundary);
      if (step < warm)
        return c_.peak_lr * static_cast<double>(step + 1) / static_cast<double>(warm);
      const double span = static_cast<double>(boundary - warm);
      const double p = span > 0 ? static_cast<double>(step - warm) / span : 1.0;
      return c_.second_stage_lr +
             (c_.peak_lr - c_.second_stage_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * p));
    }
    const double span = static_cast<double>(c_.total_steps - boundary);
    const double p = span > 0 ? static_cast<double>(step - boundary) / span : 1.0;
    return c_.second_stage_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * p));
  }

  double wd_at(std::size_t step) const {
    return stage_at(step) == Stage::Stage1 ? c_.wd_first : c_.wd_second;
  }

 private:
  TrainerConfig c_;
};

/// AdamW moments for every model parameter, in parameters() order. The
/// latent weights themselves live in the model and are the only copies the
/// optimizer writes.
template <typename T>
struct OptimizerState {
  std::vector<Tensor<T>> m, v;
  std::size_t step = 0;

  static OptimizerState for_model(TransformerModel<T>& model) {
    OptimizerState s;
    s.m = model.zero_gradients();
    s.v = model.zero_gradients();
    return s;
  }
};

struct StepResult {
  double loss = 0.0;
  double grad_norm = 0.0;
  bool finite = true;
};

inline double global_norm(const auto& grads) {
  double ss = 0.0;
  for (const auto& g : grads)
    for (auto v : g.data()) ss += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(ss);
}

/// Clips, then applies one AdamW update with decoupled weight decay.
template <typename T>
void adamw_update(TransformerModel<T>& model, std::vector<Tensor<T>>& grads,
                  OptimizerState<T>& state, const TrainerConfig& cfg, double lr, double wd,
                  double grad_norm) {
  if (cfg.grad_clip > 0.0 && grad_norm > cfg.grad_clip) {
    const T s = static_cast<T>(cfg.grad_clip / grad_norm);
    for (Tensor<T>& g : grads)
      for (T& v : g.data()) v *= s;
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  auto params = model.parameters();
  for (std::size_t p = 0; p < params.size(); ++p) {
    std::span<T> w = params[p].tensor->data();
    std::span<T> m = state.m[p].data(), v = state.v[p].data();
    std::span<const T> g = grads[p].data();
    const double decay = params[p].decay ? wd : 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = b1 * m[i] + (T(1) - b1) * g[i];
      v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
      const double mhat = static_cast<double>(m[i]) / bc1;
      const double vhat = static_cast<double>(v[i]) / bc2;
      const double upd = mhat / (std::sqrt(vhat) + cfg.adam_eps) + decay * static_cast<double>(w[i]);
      w[i] = static_cast<T>(static_cast<double>(w[i]) - lr * upd);
    }
  }
}

/// Forward on quantized views, straight-through backward, AdamW on latent
/// weights. A non-finite forward or loss skips the update and reports
/// finite=false.
template <typename T>
StepResult train_step(TransformerModel<T>& model, const Batch& batch, OptimizerState<T>& state,
                      const TrainerConfig& cfg, double lr, double wd) {
  std::optional<typename TransformerModel<T>::Trace> trace(std::in_place);
  StepResult r;
  Tensor<T> logits;
  try {
    logits = model.forward(batch.inputs, &*trace);
  } catch (const DomainError& e) {
    if (std::string_view(e.what()).find("non-finite") == std::string_view::npos) throw;
    r.loss = NAN;
    r.finite = false;
    return r;
  }
  LossResult<T> lr_res = cross_entropy_loss(logits, batch.targets);
  r.loss = lr_res.loss;
  if (!std::isfinite(r.loss)) {
    r.finite = false;
    return r;
  }
  std::vector<Tensor<T>> grads = model.backward(trace, lr_res.dlogits);
  r.grad_norm = global_norm(grads);
  if (!std::isfinite(r.grad_norm)) {
    r.finite = false;
    return r;
  }
  adamw_update(model, grads, state, cfg, lr, wd, r.grad_norm);
  return r;
}

struct LogRow {
  std::size_t step;
  int stage;
  double lr, wd, loss, grad_norm;
};

struct DivergenceEvent {
  std::size_t step;
  std::string reason;
};

struct StagePlans {
  ActivationPlan stage1, stage2;
};

struct TrainingLog {
  std::vector<LogRow> rows;
  std::size_t boundary_step = 0;
  bool two_stage = true;
  std::optional<DivergenceEvent> divergence;
  std::vector<std::size_t> non_finite_steps;

  double initial_loss() const { return rows.empty() ? NAN : rows.front().loss; }

  /// Mean of the last `window` losses of a stage (fewer if the stage is shorter).
  double final_smoothed(int stage, std::size_t window) const {
    double s = 0.0;
    std::size_t n = 0;
    for (auto it = rows.rbegin(); it != rows.rend() && n < window; ++it) {
      if (it->stage != stage || !std::isfinite(it->loss)) continue;
      s += it->loss;
      ++n;
    }
    return n ? s / static_cast<double>(n) : NAN;
  }

  std::string csv() const {
    std::ostringstream os;
    os.precision(9);
    os << "step,stage,lr,wd,loss,grad_norm\n";
    for (const LogRow& r : rows)
      os << r.step << ',' << r.stage << ',' << r.lr << ',' << r.wd << ',' << r.loss << ','
         << r.grad_norm << '\n';
    return os.str();
  }
};

/// Watches the loss for the divergence rule: non-finite, or above
/// factor x running median, for `patience` consecutive steps. The median
/// is taken over recent losses that were not themselves flagged.
class DivergenceMonitor {
 public:
  DivergenceMonitor(double factor, std::size_t patience) : factor_(factor), patience_(patience) {}

  bool observe(double loss) {
    bool bad = !std::isfinite(loss);
    if (!bad && history_.size() >= 10) {
      std::vector<double> h(history_.end() - static_cast<std::ptrdiff_t>(std::min<std::size_t>(
                                                 history_.size(), 100)),
                            history_.end());
      std::nth_element(h.begin(), h.begin() + static_cast<std::ptrdiff_t>(h.size() / 2), h.end());
      bad = loss > factor_ * h[h.size() / 2];
    }
    if (!bad) history_.push_back(loss);
    run_ = bad ? run_ + 1 : 0;
    return run_ >= patience_;
  }

 private:
  double factor_;
  std::size_t patience_;
  std::size_t run_ = 0;
  std::vector<double> history_;
};

struct TrainCallbacks {
  std::function<void(std::size_t step)> on_stage_boundary;
  std::function<void(const LogRow&)> on_step;
};

/// Stage 1 for boundary_step() steps under plans.stage1, then stage 2 under
/// plans.stage2 with the same optimizer moments. With two_stage=false the
/// stage-1 bindings and schedule cover the whole run. Stops at the first
/// divergence event.
template <typename T>
TrainingLog run_two_stage(TransformerModel<T>& model, DataStream& data, const TrainerConfig& cfg,
                          const StagePlans& plans, OptimizerState<T>& state,
                          const TrainCallbacks& cb = {}) {
  cfg.validate();
  const Schedule sched(cfg);
  TrainingLog log;
  log.boundary_step = cfg.boundary_step();
  log.two_stage = cfg.two_stage;
  model.set_dense_topk_ste(cfg.dense_topk_ste);
  model.config.stage = Stage::Stage1;
  model.apply_plan(plans.stage1);
  DivergenceMonitor monitor(cfg.divergence_factor, cfg.divergence_patience);
  for (std::size_t step = 0; step < cfg.total_steps; ++step) {
    if (cfg.two_stage && step == log.boundary_step) {
      if (cb.on_stage_boundary) cb.on_stage_boundary(step);
      model.config.stage = Stage::Stage2;
      model.apply_plan(plans.stage2);
    }
    const Batch batch = data.next();
    const double lr = sched.lr_at(step), wd = sched.wd_at(step);
    const StepResult r = train_step(model, batch, state, cfg, lr, wd);
    const LogRow row{step, static_cast<int>(sched.stage_at(step)), lr, wd, r.loss, r.grad_norm};
    log.rows.push_back(row);
    if (cb.on_step) cb.on_step(row);
    if (!r.finite) log.non_finite_steps.push_back(step);
    if (monitor.observe(r.finite ? r.loss : NAN)) {
      log.divergence = DivergenceEvent{step, r.finite ? "loss above running median bound"
                                                      : "non-finite loss"};
      break;
    }
  }
  return log;
}

template <typename T>
TrainingLog run_two_stage(TransformerModel<T>& model, DataStream& data, const TrainerConfig& cfg) {
  OptimizerState<T> state = OptimizerState<T>::for_model(model);
  const StagePlans plans{stage_plan(Stage::Stage1, model.config.fp4_mode),
                         stage_plan(Stage::Stage2, model.config.fp4_mode)};
  return run_two_stage(model, data, cfg, plans, state);
}

// ---------------------------------------------------------------------------
// Gradient verification

struct GradCheckReport {
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  std::string worst_param;
  bool quantizer_adjoint_identity = false;
  bool topk_adjoint_masked = false;
  bool passed = false;
};

/// Small fixture: hidden 16, two layers, double precision.
inline ModelConfig gradcheck_fixture_config() {
  ModelConfig c;
  c.hidden_size = 16;
  c.glu_size = 44;
  c.n_heads = 2;
  c.n_layers = 2;
  c.vocab_size = 16;
  c.seq_len = 8;
  c.init_std = 0.3;
  return c;
}

/// Central finite differences over every parameter of a model with
/// quantization disabled, plus exact checks of the straight-through rules.
inline GradCheckReport grad_check_ste(double tolerance = 1e-4, std::uint64_t seed = 7) {
  GradCheckReport rep;
  ModelConfig cfg = gradcheck_fixture_config();
  cfg.quantize_weights = false;
  auto model = TransformerModel<double>::init(cfg, seed);
  model.apply_plan(ActivationPlan::uniform(InputScheme::of(QuantScheme::identity())));

  DataStream data(MarkovSource(cfg.vocab_size, 3, seed), 2, cfg.seq_len, seed + 1);
  const Batch batch = data.next();
  auto loss_of = [&] {
    return cross_entropy_loss(model.forward(batch.inputs), batch.targets).loss;
  };
  std::optional<TransformerModel<double>::Trace> trace(std::in_place);
  const auto logits = model.forward(batch.inputs, &*trace);
  const auto lres = cross_entropy_loss(logits, batch.targets);
  const auto grads = model.backward(trace, lres.dlogits);

  const double h = 1e-5, floor = 1e-6;
  auto params = model.parameters();
  for (std::size_t p = 0; p < params.size(); ++p) {
    std::span<double> w = params[p].tensor->data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double orig = w[i];
      w[i] = orig + h;
      const double lp = loss_of();
      w[i] = orig - h;
      const double lm = loss_of();
      w[i] = orig;
      const double numeric = (lp - lm) / (2 * h);
      const double analytic = grads[p][i];
      const double rel =
          std::fabs(numeric - analytic) / std::max({std::fabs(numeric), std::fabs(analytic), floor});
      if (rel > rep.max_rel_error) {
        rep.max_rel_error = rel;
        rep.worst_param = params[p].name + "[" + std::to_string(i) + "]";
      }
      ++rep.checked;
    }
  }

  // Straight-through rules, checked bit for bit.
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor<double> g(Shape{4, 32});
  for (double& v : g.data()) v = normal(rng);
  const Tensor<double> pass = ste_backward(SteOp::Quantizer, g);
  rep.quantizer_adjoint_identity = std::memcmp(pass.data().data(), g.data().data(),
                                               g.size() * sizeof(double)) == 0;
  Tensor<double> x(Shape{4, 32});
  for (double& v : x.data()) v = normal(rng);
  const TopKMask mask = topk_mask(x, 0.5);
  const Tensor<double> masked = ste_backward(SteOp::TopK, g, &mask);
  rep.topk_adjoint_masked = true;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const bool ok = mask.kept(i) ? masked[i] == g[i] : masked[i] == 0.0;
    rep.topk_adjoint_masked = rep.topk_adjoint_masked && ok;
  }
  rep.passed = rep.max_rel_error <= tolerance && rep.quantizer_adjoint_identity &&
               rep.topk_adjoint_masked;
  return rep;
}

}  // namespace ba48

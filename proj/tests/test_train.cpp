#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <random>
#include <set>

#include "bitnet_a48/train.hpp"

using namespace ba48;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.hidden_size = 16;
  c.glu_size = 44;
  c.n_heads = 2;
  c.n_layers = 2;
  c.vocab_size = 24;
  c.seq_len = 16;
  return c;
}

TrainerConfig tiny_trainer(std::size_t steps) {
  TrainerConfig t;
  t.total_steps = steps;
  t.warmup_steps = 5;
  t.batch_size = 2;
  t.seq_len = 16;
  t.smoothing_window = 10;
  return t;
}

DataStream tiny_stream(std::uint64_t seed) {
  return DataStream(MarkovSource(24, 3, 99), 2, 16, seed);
}

template <typename T>
bool bit_equal(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(T)) == 0;
}

}  // namespace

TEST(Schedule, ShapeAndBoundary) {
  TrainerConfig c;
  c.total_steps = 1000;
  c.warmup_steps = 50;
  c.peak_lr = 1.5e-3;
  c.second_stage_lr = 1e-3;
  EXPECT_EQ(c.boundary_step(), 950u);
  const Schedule s(c);
  EXPECT_NEAR(s.lr_at(49), 1.5e-3, 1e-15);
  EXPECT_LT(s.lr_at(0), s.lr_at(10));
  for (std::size_t t = 50; t + 1 < 950; ++t) ASSERT_GE(s.lr_at(t), s.lr_at(t + 1));
  for (std::size_t t = 950; t + 1 < 1000; ++t) ASSERT_GE(s.lr_at(t), s.lr_at(t + 1));
  // Continuous within each stage: no jump larger than one cosine step.
  for (std::size_t t = 50; t + 1 < 1000; ++t) ASSERT_LT(std::fabs(s.lr_at(t) - s.lr_at(t + 1)), 5e-5);
  EXPECT_NEAR(s.lr_at(949), 1e-3, 1e-8);
  EXPECT_NEAR(s.lr_at(950), 1e-3, 1e-15);
  EXPECT_GT(s.lr_at(999), 0.0);
  EXPECT_EQ(s.wd_at(949), 0.1);
  EXPECT_EQ(s.wd_at(950), 0.0);
  EXPECT_EQ(s.stage_at(949), Stage::Stage1);
  EXPECT_EQ(s.stage_at(950), Stage::Stage2);
}

TEST(Schedule, SingleStageNeverSwitches) {
  TrainerConfig c;
  c.total_steps = 100;
  c.two_stage = false;
  const Schedule s(c);
  EXPECT_EQ(c.boundary_step(), 100u);
  EXPECT_EQ(s.stage_at(99), Stage::Stage1);
  EXPECT_EQ(s.wd_at(99), 0.1);
}

TEST(TrainerConfig, Validation) {
  TrainerConfig c;
  c.stage_split = 1.0;
  EXPECT_THROW(c.validate(), DomainError);
  c = TrainerConfig{};
  c.peak_lr = 0;
  EXPECT_THROW(c.validate(), DomainError);
  c = TrainerConfig{};
  EXPECT_EQ(trainer_to_json(trainer_from_json(trainer_to_json(c))), trainer_to_json(c));
}

TEST(AdamW, SingleStepMatchesHandComputation) {
  auto m = TransformerModel<double>::init(tiny_config(), 1);
  auto state = OptimizerState<double>::for_model(m);
  auto grads = m.zero_gradients();
  std::mt19937_64 rng(2);
  std::normal_distribution<double> normal(0.0, 0.01);
  for (auto& g : grads)
    for (double& v : g.data()) v = normal(rng);
  TrainerConfig cfg;
  cfg.grad_clip = 0.0;
  const double lr = 1e-3, wd = 0.1;
  std::vector<Tensor<double>> before;
  for (const auto& p : m.parameters()) before.push_back(*p.tensor);
  adamw_update(m, grads, state, cfg, lr, wd, global_norm(grads));
  auto params = m.parameters();
  for (std::size_t p = 0; p < params.size(); ++p)
    for (std::size_t i = 0; i < grads[p].size(); i += 7) {
      const double g = grads[p][i], w = before[p][i];
      const double mhat = (1 - 0.9) * g / (1 - 0.9);
      const double vhat = (1 - 0.95) * g * g / (1 - 0.95);
      const double decay = params[p].decay ? wd : 0.0;
      const double expect = w - lr * (mhat / (std::sqrt(vhat) + 1e-8) + decay * w);
      ASSERT_NEAR((*params[p].tensor)[i], expect, 1e-15) << params[p].name;
    }
  EXPECT_EQ(state.step, 1u);
}

TEST(AdamW, ZeroGradientDecaysDecoupled) {
  auto m = TransformerModel<double>::init(tiny_config(), 3);
  auto state = OptimizerState<double>::for_model(m);
  auto grads = m.zero_gradients();
  const double w0 = m.blocks[0].attn.q.weight[5], g0 = m.blocks[0].attn_norm.gain[0];
  adamw_update(m, grads, state, TrainerConfig{}, 0.01, 0.1, 0.0);
  EXPECT_NEAR(m.blocks[0].attn.q.weight[5], w0 * (1 - 0.01 * 0.1), 1e-17);
  EXPECT_EQ(m.blocks[0].attn_norm.gain[0], g0);
}

TEST(AdamW, ClipsToGlobalNorm) {
  auto m = TransformerModel<double>::init(tiny_config(), 4);
  auto state = OptimizerState<double>::for_model(m);
  auto grads = m.zero_gradients();
  for (auto& g : grads) g.fill(1.0);
  const double norm = global_norm(grads);
  TrainerConfig cfg;
  cfg.grad_clip = 1.0;
  adamw_update(m, grads, state, cfg, 0.0, 0.0, norm);
  EXPECT_NEAR(global_norm(grads), 1.0, 1e-12);
}

TEST(TrainStep, ZeroLearningRateLeavesWeights) {
  auto m = TransformerModel<float>::init(tiny_config(), 5);
  const auto before = m;
  auto state = OptimizerState<float>::for_model(m);
  DataStream d = tiny_stream(1);
  const StepResult r = train_step(m, d.next(), state, tiny_trainer(1), 0.0, 0.1);
  EXPECT_TRUE(r.finite);
  EXPECT_GT(r.loss, 0.0);
  auto a = m.parameters();
  auto b = const_cast<TransformerModel<float>&>(before).parameters();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(bit_equal(*a[i].tensor, *b[i].tensor));
}

TEST(TrainStep, LatentWeightsStayFullPrecision) {
  auto m = TransformerModel<float>::init(tiny_config(), 6);
  auto state = OptimizerState<float>::for_model(m);
  DataStream d = tiny_stream(2);
  for (int i = 0; i < 3; ++i) train_step(m, d.next(), state, tiny_trainer(3), 1e-3, 0.1);
  for (const auto& b : m.blocks) {
    const std::set<float> latent(b.attn.q.weight.data().begin(), b.attn.q.weight.data().end());
    const Tensor<float> wq = b.attn.q.quantized_weight();
    const std::set<float> quant(wq.data().begin(), wq.data().end());
    EXPECT_LE(quant.size(), 3u);
    EXPECT_GT(latent.size(), 100u);
  }
}

TEST(Backward, ZeroUpstreamGivesZeroGradients) {
  auto m = TransformerModel<double>::init(tiny_config(), 7);
  configure_stage(m, Stage::Stage2);
  DataStream d = tiny_stream(3);
  const Batch b = d.next();
  std::optional<TransformerModel<double>::Trace> tr(std::in_place);
  const Tensor<double> logits = m.forward(b.inputs, &*tr);
  const auto g = m.backward(tr, Tensor<double>(logits.shape()));
  EXPECT_EQ(global_norm(g), 0.0);
  EXPECT_THROW(m.backward(std::nullopt, logits), DomainError);
}

TEST(Backward, Relu2GateDerivative) {
  // One-channel FFN with identity quantizers: d/dp ReLU^2(p) = 2p.
  FeedForward<double> f;
  for (BitLinear<double>* l : {&f.gate, &f.up, &f.down}) {
    l->weight = Tensor<double>(Shape{1, 1}, 1.0);
    l->input = InputScheme::of(QuantScheme::identity());
    l->weight_scheme = QuantScheme::identity();
  }
  typename FeedForward<double>::Cache c;
  f.forward(Tensor<double>(Shape{1, 1}, 2.0), &c);
  Tensor<double> dg(Shape{1, 1}), du(Shape{1, 1}), dd(Shape{1, 1});
  const Tensor<double> dx = f.backward(c, Tensor<double>(Shape{1, 1}, 1.0), dg, du, dd);
  // y = x * relu2(x) = x^3: dgate weight = up * 2p * x = 2 * 4 * 2.
  EXPECT_DOUBLE_EQ(dg[0], 16.0);
  EXPECT_DOUBLE_EQ(du[0], 8.0);
  EXPECT_DOUBLE_EQ(dx[0], 12.0);
}

TEST(GradCheck, IdentitySchemesMatchFiniteDifferences) {
  const GradCheckReport r = grad_check_ste();
  EXPECT_GT(r.checked, 1000u);
  EXPECT_LE(r.max_rel_error, 1e-4) << r.worst_param;
  EXPECT_TRUE(r.quantizer_adjoint_identity);
  EXPECT_TRUE(r.topk_adjoint_masked);
  EXPECT_TRUE(r.passed);
}

TEST(Divergence, MonitorRule) {
  DivergenceMonitor steady(10.0, 50);
  for (int i = 0; i < 500; ++i) ASSERT_FALSE(steady.observe(3.0 + 0.01 * (i % 7)));

  DivergenceMonitor nan(10.0, 50);
  for (int i = 0; i < 20; ++i) nan.observe(2.0);
  for (int i = 0; i < 49; ++i) ASSERT_FALSE(nan.observe(NAN));
  EXPECT_TRUE(nan.observe(NAN));

  DivergenceMonitor spikes(10.0, 50);
  for (int i = 0; i < 20; ++i) spikes.observe(1.0);
  for (int i = 0; i < 49; ++i) ASSERT_FALSE(spikes.observe(100.0));
  EXPECT_FALSE(spikes.observe(1.0));
  for (int i = 0; i < 49; ++i) ASSERT_FALSE(i % 2 ? spikes.observe(INFINITY) : spikes.observe(50.0));
  EXPECT_TRUE(spikes.observe(1e6));
}

TEST(TwoStage, BoundaryAndMomentCarryOver) {
  const TrainerConfig cfg = tiny_trainer(20);
  ASSERT_EQ(cfg.boundary_step(), 19u);
  auto m = TransformerModel<float>::init(tiny_config(), 8);
  auto state = OptimizerState<float>::for_model(m);
  DataStream d = tiny_stream(4);
  const StagePlans plans{stage_plan(Stage::Stage1, false), stage_plan(Stage::Stage2, false)};
  std::vector<Tensor<float>> m_at_boundary;
  std::size_t step_at_boundary = 0;
  TrainCallbacks cb;
  cb.on_stage_boundary = [&](std::size_t step) {
    m_at_boundary = state.m;
    step_at_boundary = state.step;
    EXPECT_EQ(step, 19u);
    EXPECT_EQ(m.plan, plans.stage1);
  };
  const TrainingLog log = run_two_stage(m, d, cfg, plans, state, cb);
  EXPECT_EQ(log.rows.size(), 20u);
  EXPECT_EQ(log.rows[18].stage, 1);
  EXPECT_EQ(log.rows[19].stage, 2);
  EXPECT_EQ(log.rows[19].wd, 0.0);
  EXPECT_EQ(m.plan, plans.stage2);
  EXPECT_EQ(state.step, 20u);
  EXPECT_EQ(step_at_boundary, 19u);

  // A run that stops at the boundary holds exactly the moments that stage 2
  // started from.
  auto m2 = TransformerModel<float>::init(tiny_config(), 8);
  auto state2 = OptimizerState<float>::for_model(m2);
  DataStream d2 = tiny_stream(4);
  const Schedule sched(cfg);
  m2.apply_plan(plans.stage1);
  for (std::size_t s = 0; s < 19; ++s)
    train_step(m2, d2.next(), state2, cfg, sched.lr_at(s), sched.wd_at(s));
  for (std::size_t p = 0; p < state2.m.size(); ++p) ASSERT_TRUE(bit_equal(state2.m[p], m_at_boundary[p]));
}

TEST(TwoStage, DeterministicAndLearns) {
  auto run = [] {
    auto m = TransformerModel<float>::init(tiny_config(), 9);
    DataStream d = tiny_stream(5);
    TrainerConfig cfg = tiny_trainer(60);
    cfg.peak_lr = 1e-2;
    cfg.second_stage_lr = 5e-3;
    return run_two_stage(m, d, cfg);
  };
  const TrainingLog a = run(), b = run();
  EXPECT_EQ(a.csv(), b.csv());
  for (std::size_t i = 0; i < a.rows.size(); ++i) ASSERT_EQ(a.rows[i].loss, b.rows[i].loss);
  EXPECT_LT(a.final_smoothed(1, 10), a.initial_loss());
  EXPECT_FALSE(a.divergence.has_value());
  EXPECT_EQ(a.csv().substr(0, 34), "step,stage,lr,wd,loss,grad_norm\n0,");
}

TEST(TrainingLog, FinalSmoothedUsesStageRows) {
  TrainingLog log;
  for (std::size_t i = 0; i < 10; ++i) log.rows.push_back({i, i < 8 ? 1 : 2, 0, 0, double(i), 0});
  EXPECT_DOUBLE_EQ(log.final_smoothed(2, 5), 8.5);
  EXPECT_DOUBLE_EQ(log.final_smoothed(1, 3), 6.0);
  EXPECT_DOUBLE_EQ(log.initial_loss(), 0.0);
}

#pragma once

// The bitnet-a48 command-line tool. Kept in a header so the commands can be
// driven in-process.
//
//   bitnet-a48 train     --out-dir D [--config F] [--ablation A] [--steps N] ...
//   bitnet-a48 gradcheck [--out-dir D]
//   bitnet-a48 sparsity  --checkpoint C --out-dir D
//   bitnet-a48 hist      --checkpoint C --site S --out-dir D
//   bitnet-a48 kv-eval   --checkpoint C --out-dir D [--kv-bits K --q-bits Q]
//   bitnet-a48 quant     --input T --scheme S --out-dir D
//
// Every command writes D/manifest.json with its resolved configuration and
// the checksums of the files it produced.

#include <CLI11.hpp>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "bitnet_a48/data.hpp"
#include "bitnet_a48/io.hpp"
#include "bitnet_a48/metrics.hpp"
#include "bitnet_a48/model.hpp"
#include "bitnet_a48/train.hpp"

namespace ba48::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitAssertion = 2;
inline constexpr int kExitDiverged = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Where training and evaluation tokens come from.
struct DataConfig {
  std::size_t successors = 4;
  std::uint64_t chain_seed = 20240;
  std::uint64_t eval_seed = 77;
};

inline nlohmann::json data_to_json(const DataConfig& d) {
  return {{"successors", d.successors}, {"chain_seed", d.chain_seed}, {"eval_seed", d.eval_seed}};
}

inline DataConfig data_from_json(const nlohmann::json& j, DataConfig d = {}) {
  d.successors = j.value("successors", d.successors);
  d.chain_seed = j.value("chain_seed", d.chain_seed);
  d.eval_seed = j.value("eval_seed", d.eval_seed);
  return d;
}

inline MarkovSource make_source(const ModelConfig& m, const DataConfig& d) {
  return MarkovSource(m.vocab_size, d.successors, d.chain_seed);
}

/// A named training regime: which plans apply, whether the schedule has two
/// stages, and whether divergence is the expected observation.
struct Ablation {
  std::string name;
  StagePlans plans;
  bool two_stage = true;
  bool expect_divergence = false;
};

inline std::vector<std::string> ablation_names() {
  return {"default",   "hybrid",    "full-int4",      "full-fp4",        "down-int8",
          "down-fp4",  "down-int4", "down-relu2-vs-swish", "down-swish", "outproj-topk-on",
          "outproj-topk-off"};
}

inline Ablation ablation_preset(const std::string& name, bool fp4_mode) {
  const ActivationPlan s1 = stage_plan(Stage::Stage1, fp4_mode);
  const ActivationPlan s2 = stage_plan(Stage::Stage2, fp4_mode);
  const InputScheme int8 = InputScheme::of(QuantScheme::int8());
  auto single = [&](const ActivationPlan& p, bool diverges = false) {
    return Ablation{name, {p, p}, false, diverges};
  };
  auto down_only = [&](InputScheme down, bool diverges = false) {
    ActivationPlan p = ActivationPlan::uniform(int8);
    p.down = down;
    return single(p, diverges);
  };
  if (name == "default" || name == "outproj-topk-on") return Ablation{name, {s1, s2}, true, false};
  if (name == "outproj-topk-off") {
    ActivationPlan p = s2;
    p.out = int8;
    return Ablation{name, {s1, p}, true, false};
  }
  if (name == "hybrid") return single(s2);
  if (name == "full-int4") {
    ActivationPlan p = ActivationPlan::uniform(InputScheme::of(QuantScheme::int4()));
    p.down = InputScheme::of(QuantScheme::int4(2.0));
    return single(p, true);
  }
  if (name == "full-fp4") return single(ActivationPlan::uniform(InputScheme::of(QuantScheme::fp4())));
  if (name == "down-int8") return down_only(int8);
  if (name == "down-fp4") return down_only(InputScheme::of(QuantScheme::fp4()));
  if (name == "down-int4") return down_only(InputScheme::of(QuantScheme::int4(2.0)), true);
  if (name == "down-relu2-vs-swish" || name == "down-swish") {
    ActivationPlan p = ActivationPlan::uniform(int8);
    p.activation = GateActivation::Swish;
    return single(p);
  }
  throw UsageError("unknown ablation '" + name + "'");
}

/// Fully resolved inputs of a training run.
struct TrainRun {
  ModelConfig model;
  TrainerConfig trainer;
  DataConfig data;
  std::string ablation = "default";

  nlohmann::json json() const {
    const Ablation a = ablation_preset(ablation, model.fp4_mode);
    return {{"model", config_to_json(model)},
            {"trainer", trainer_to_json(trainer)},
            {"data", data_to_json(data)},
            {"ablation", ablation},
            {"plans", {{"stage1", plan_to_json(a.plans.stage1)},
                       {"stage2", plan_to_json(a.plans.stage2)}}}};
  }
};

inline TrainRun train_run_from_json(const nlohmann::json& j) {
  TrainRun r;
  if (j.contains("model")) r.model = config_from_json(j.at("model"));
  if (j.contains("trainer")) r.trainer = trainer_from_json(j.at("trainer"));
  if (j.contains("data")) r.data = data_from_json(j.at("data"));
  r.ablation = j.value("ablation", r.ablation);
  return r;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw UsageError("cannot read " + p.string());
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

/// Collects artifacts and writes manifest.json.
class Manifest {
 public:
  Manifest(std::string command, std::filesystem::path out_dir)
      : command_(std::move(command)), dir_(std::move(out_dir)) {
    std::filesystem::create_directories(dir_);
  }

  const std::filesystem::path& dir() const { return dir_; }
  std::filesystem::path path(const std::string& name) const { return dir_ / name; }

  void write_text(const std::string& name, const std::string& text) {
    std::ofstream os(path(name), std::ios::binary);
    if (!os) throw UsageError("cannot write " + path(name).string());
    os << text;
    os.close();
    add(name);
  }

  /// Registers a file already written under the output directory.
  void add(const std::string& name) {
    const std::string bytes = read_file(path(name));
    artifacts_[name] = {{"bytes", bytes.size()}, {"fnv1a64", hex64(io::fnv1a64(bytes))}};
  }

  nlohmann::json& config() { return config_; }
  nlohmann::json& result() { return result_; }
  void set_seed(std::uint64_t s) { seed_ = s; }

  void save() const {
    nlohmann::json j = {{"command", command_},
                        {"config", config_},
                        {"seed", seed_},
                        {"out_dir", dir_.string()},
                        {"artifacts", artifacts_},
                        {"result", result_}};
    std::ofstream os(dir_ / "manifest.json", std::ios::binary);
    os << j.dump(2) << '\n';
  }

 private:
  std::string command_;
  std::filesystem::path dir_;
  nlohmann::json config_ = nlohmann::json::object();
  nlohmann::json result_ = nlohmann::json::object();
  nlohmann::json artifacts_ = nlohmann::json::object();
  std::uint64_t seed_ = 0;
};

// ---------------------------------------------------------------------------
// Commands

struct TrainFlags {
  std::string config_file, out_dir, ablation;
  std::optional<std::size_t> steps, batch, seq_len, warmup, hidden, glu, heads, layers, vocab;
  std::optional<std::uint64_t> seed;
  std::optional<double> stage_split, peak_lr, second_lr;
  std::optional<int> kv_bits, q_bits;
  bool fp4 = false, dense_topk_ste = false;
  std::size_t log_every = 0;
};

inline TrainRun resolve_train(const TrainFlags& f) {
  TrainRun r;
  if (!f.config_file.empty()) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(read_file(f.config_file));
    } catch (const nlohmann::json::exception& e) {
      throw UsageError("config " + f.config_file + ": " + e.what());
    }
    r = train_run_from_json(j);
  }
  if (!f.ablation.empty()) r.ablation = f.ablation;
  if (f.steps) r.trainer.total_steps = *f.steps;
  if (f.batch) r.trainer.batch_size = *f.batch;
  if (f.seq_len) r.trainer.seq_len = *f.seq_len;
  if (f.warmup) r.trainer.warmup_steps = *f.warmup;
  if (f.seed) r.trainer.seed = *f.seed;
  if (f.stage_split) r.trainer.stage_split = *f.stage_split;
  if (f.peak_lr) r.trainer.peak_lr = *f.peak_lr;
  if (f.second_lr) r.trainer.second_stage_lr = *f.second_lr;
  if (f.dense_topk_ste) r.trainer.dense_topk_ste = true;
  if (f.hidden) r.model.hidden_size = *f.hidden;
  if (f.glu) r.model.glu_size = *f.glu;
  if (f.heads) r.model.n_heads = *f.heads;
  if (f.layers) r.model.n_layers = *f.layers;
  if (f.vocab) r.model.vocab_size = *f.vocab;
  if (f.kv_bits) r.model.kv_bits = *f.kv_bits;
  if (f.q_bits) r.model.q_bits = *f.q_bits;
  if (f.fp4) r.model.fp4_mode = true;
  r.model.seq_len = std::max(r.model.seq_len, r.trainer.seq_len);
  r.model.validate();
  r.trainer.validate();
  const Ablation a = ablation_preset(r.ablation, r.model.fp4_mode);
  r.trainer.two_stage = a.two_stage;
  return r;
}

inline int cmd_train(const TrainFlags& f, std::ostream& out) {
  const TrainRun run = resolve_train(f);
  const Ablation ab = ablation_preset(run.ablation, run.model.fp4_mode);
  Manifest man("train", f.out_dir);
  man.config() = run.json();
  man.set_seed(run.trainer.seed);

  auto model = TransformerModel<float>::init(run.model, run.trainer.seed);
  model.apply_plan(ab.plans.stage1);
  nlohmann::json meta = {{"data", data_to_json(run.data)}, {"ablation", run.ablation}};

  if (run.trainer.total_steps == 0) {
    meta["step"] = 0;
    io::save_checkpoint(man.path("checkpoint.bin").string(), model, meta);
    man.add("checkpoint.bin");
    man.result() = {{"steps", 0}, {"diverged", false}};
    man.save();
    out << "wrote initial checkpoint to " << man.path("checkpoint.bin").string() << '\n';
    return kExitOk;
  }

  DataStream data(make_source(run.model, run.data), run.trainer.batch_size, run.trainer.seq_len,
                  run.trainer.seed + 1);
  OptimizerState<float> state = OptimizerState<float>::for_model(model);
  TrainCallbacks cb;
  cb.on_stage_boundary = [&](std::size_t step) {
    nlohmann::json m = meta;
    m["step"] = step;
    io::save_checkpoint(man.path("checkpoint_stage1.bin").string(), model, m);
    man.add("checkpoint_stage1.bin");
    out << "stage 1 finished at step " << step << '\n';
  };
  if (f.log_every > 0)
    cb.on_step = [&](const LogRow& r) {
      if (r.step % f.log_every == 0)
        out << "step " << r.step << " stage " << r.stage << " lr " << r.lr << " loss " << r.loss
            << '\n';
    };
  const TrainingLog log = run_two_stage(model, data, run.trainer, ab.plans, state, cb);

  man.write_text("loss.csv", log.csv());
  meta["step"] = log.rows.size();
  io::save_checkpoint(man.path("checkpoint.bin").string(), model, meta);
  man.add("checkpoint.bin");

  const std::size_t w = run.trainer.smoothing_window;
  nlohmann::json res = {{"steps", log.rows.size()},
                        {"boundary_step", log.boundary_step},
                        {"initial_loss", log.initial_loss()},
                        {"final_smoothed_stage1", log.final_smoothed(1, w)},
                        {"diverged", log.divergence.has_value()},
                        {"non_finite_steps", log.non_finite_steps.size()}};
  if (log.two_stage) res["final_smoothed_stage2"] = log.final_smoothed(2, w);
  if (log.divergence) {
    res["divergence_step"] = log.divergence->step;
    res["divergence_reason"] = log.divergence->reason;
  }
  man.result() = res;
  man.save();

  out << "ablation " << run.ablation << ": " << log.rows.size() << " steps, initial loss "
      << log.initial_loss() << ", final smoothed loss "
      << log.final_smoothed(log.two_stage ? 2 : 1, w) << '\n';
  if (log.divergence) {
    out << "diverged at step " << log.divergence->step << " (" << log.divergence->reason << ")\n";
    return ab.expect_divergence ? kExitOk : kExitDiverged;
  }
  return kExitOk;
}

inline int cmd_gradcheck(double tolerance, std::uint64_t seed, const std::string& out_dir,
                         std::ostream& out) {
  const GradCheckReport rep = grad_check_ste(tolerance, seed);
  out << "checked " << rep.checked << " parameters, max relative error " << rep.max_rel_error
      << " at " << rep.worst_param << '\n'
      << "quantizer adjoint is identity: " << (rep.quantizer_adjoint_identity ? "yes" : "no")
      << '\n'
      << "top-k adjoint is masked: " << (rep.topk_adjoint_masked ? "yes" : "no") << '\n'
      << (rep.passed ? "PASS" : "FAIL") << '\n';
  if (!out_dir.empty()) {
    Manifest man("gradcheck", out_dir);
    man.config() = {{"tolerance", tolerance}, {"fixture", config_to_json(gradcheck_fixture_config())}};
    man.set_seed(seed);
    man.result() = {{"checked", rep.checked},
                    {"max_rel_error", rep.max_rel_error},
                    {"worst_param", rep.worst_param},
                    {"quantizer_adjoint_identity", rep.quantizer_adjoint_identity},
                    {"topk_adjoint_masked", rep.topk_adjoint_masked},
                    {"passed", rep.passed}};
    man.save();
  }
  return rep.passed ? kExitOk : kExitAssertion;
}

struct EvalFlags {
  std::string checkpoint, out_dir;
  std::size_t batches = 8, batch = 4, seq_len = 64;
  std::optional<std::uint64_t> seed;
  std::optional<int> stage;
};

struct LoadedForEval {
  io::LoadedCheckpoint<float> ck;
  DataConfig data;
};

inline LoadedForEval load_for_eval(const EvalFlags& f) {
  if (!std::filesystem::exists(f.checkpoint)) throw UsageError("no checkpoint at " + f.checkpoint);
  LoadedForEval l{io::load_checkpoint<float>(f.checkpoint), {}};
  if (l.ck.meta.contains("data")) l.data = data_from_json(l.ck.meta.at("data"));
  if (f.seed) l.data.eval_seed = *f.seed;
  if (f.stage) {
    if (*f.stage != 1 && *f.stage != 2) throw UsageError("--stage must be 1 or 2");
    configure_stage(l.ck.model, static_cast<Stage>(*f.stage));
  }
  require(f.seq_len <= l.ck.model.config.seq_len, "eval: seq_len exceeds the model's context");
  return l;
}

inline DataStream eval_stream(const LoadedForEval& l, const EvalFlags& f) {
  return DataStream(make_source(l.ck.model.config, l.data), f.batch, f.seq_len, l.data.eval_seed);
}

inline nlohmann::json eval_config(const LoadedForEval& l, const EvalFlags& f) {
  return {{"checkpoint", f.checkpoint},     {"batches", f.batches},
          {"batch", f.batch},               {"seq_len", f.seq_len},
          {"data", data_to_json(l.data)},   {"model", config_to_json(l.ck.model.config)},
          {"plan", plan_to_json(l.ck.model.plan)}};
}

inline int cmd_sparsity(const EvalFlags& f, std::ostream& out) {
  LoadedForEval l = load_for_eval(f);
  DataStream eval = eval_stream(l, f);
  const SparsityReport rep = sparsity_report(l.ck.model, eval, f.batches);
  Manifest man("sparsity", f.out_dir);
  man.config() = eval_config(l, f);
  man.set_seed(l.data.eval_seed);
  man.write_text("sparsity.csv", rep.csv());
  man.write_text("sparsity.json", rep.json().dump(2) + "\n");
  man.result() = rep.json();
  man.save();
  out << rep.csv();
  return kExitOk;
}

inline int cmd_hist(const EvalFlags& f, const std::string& site_arg, std::size_t bins, int layer,
                    std::ostream& out) {
  Site site;
  try {
    site = site_from_name(site_arg);
  } catch (const DomainError&) {
    throw UsageError("unknown site '" + site_arg + "'");
  }
  if (site == Site::Head) throw UsageError("the head has no quantized input");
  if (bins == 0) throw UsageError("--bins must be positive");
  LoadedForEval l = load_for_eval(f);
  DataStream eval = eval_stream(l, f);
  const std::vector<double> values = collect_site_inputs(l.ck.model, eval, site, f.batches, layer);
  const HistogramSpec h = histogram(values, bins, site_name(site));
  Manifest man("hist", f.out_dir);
  man.config() = eval_config(l, f);
  man.config()["site"] = site_name(site);
  man.config()["bins"] = bins;
  man.config()["layer"] = layer;
  man.set_seed(l.data.eval_seed);
  const std::string name = "hist_" + site_name(site) + ".csv";
  man.write_text(name, h.csv());
  const double skew = values.size() > 2 ? sample_skewness(values) : 0.0;
  man.result() = {{"samples", h.total()}, {"occupied_bins", h.occupied_bins()}, {"skewness", skew}};
  man.save();
  out << "site " << site_name(site) << ": " << h.total() << " samples, skewness " << skew
      << ", histogram in " << man.path(name).string() << '\n';
  return kExitOk;
}

/// Mean next-token loss over n_batches of a stream.
inline double evaluation_loss(const TransformerModel<float>& model, DataStream& eval,
                              std::size_t n_batches) {
  double total = 0.0;
  for (std::size_t b = 0; b < n_batches; ++b) {
    const Batch batch = eval.next();
    total += cross_entropy_loss(model.forward(batch.inputs), batch.targets).loss;
  }
  return total / static_cast<double>(n_batches);
}

struct KvVariant {
  int kv_bits, q_bits;
};

/// 8-bit KV with full Q first, then the low-bit variants.
inline std::vector<KvVariant> kv_variants(std::optional<int> kv, std::optional<int> q) {
  if (!kv && !q) return {{8, 16}, {4, 16}, {4, 4}, {3, 4}};
  const KvVariant v{kv.value_or(kKvOff), q.value_or(kQOff)};
  if (v.kv_bits == kKvOff && v.q_bits == kQOff) return {v};
  return {{kKvOff, kQOff}, v};
}

inline int cmd_kv_eval(const EvalFlags& f, std::optional<int> kv, std::optional<int> q,
                       std::ostream& out) {
  if (kv && *kv != 3 && *kv != 4 && *kv != 8) throw UsageError("--kv-bits must be 3, 4 or 8");
  if (q && *q != 4 && *q != 16) throw UsageError("--q-bits must be 4 or 16");
  LoadedForEval l = load_for_eval(f);
  std::ostringstream csv;
  csv.precision(9);
  csv << "kv_bits,q_bits,loss,perplexity,relative_ppl_change\n";
  nlohmann::json rows = nlohmann::json::array();
  double base_ppl = 0.0;
  for (const KvVariant& v : kv_variants(kv, q)) {
    l.ck.model.set_attention_bits(v.kv_bits, v.q_bits);
    DataStream eval = eval_stream(l, f);
    const double loss = evaluation_loss(l.ck.model, eval, f.batches);
    const double ppl = std::exp(loss);
    if (rows.empty()) base_ppl = ppl;
    const double rel = ppl / base_ppl - 1.0;
    csv << v.kv_bits << ',' << v.q_bits << ',' << loss << ',' << ppl << ',' << rel << '\n';
    rows.push_back({{"kv_bits", v.kv_bits},
                    {"q_bits", v.q_bits},
                    {"loss", loss},
                    {"perplexity", ppl},
                    {"relative_ppl_change", rel}});
  }
  Manifest man("kv-eval", f.out_dir);
  man.config() = eval_config(l, f);
  man.set_seed(l.data.eval_seed);
  man.write_text("kv_eval.csv", csv.str());
  man.result() = {{"variants", rows}};
  man.save();
  out << csv.str();
  return kExitOk;
}

inline int cmd_quant(const std::string& input, const std::string& scheme_name,
                     const std::string& granularity, const std::string& out_dir,
                     std::ostream& out) {
  Granularity g;
  if (granularity == "per-token")
    g = Granularity::PerToken;
  else if (granularity == "per-tensor")
    g = Granularity::PerTensor;
  else
    throw UsageError("--granularity must be per-token or per-tensor");
  QuantScheme scheme;
  try {
    scheme = parse_quant_scheme(scheme_name, g);
  } catch (const DomainError& e) {
    throw UsageError(e.what());
  }
  if (scheme.variant == QuantScheme::Variant::Identity)
    throw UsageError("the identity scheme produces no codes");
  const Tensor<float> x = io::load_tensor_file<float>(input);
  const QuantizedTensor<float> q = quantize(x, scheme);
  const Tensor<float> y = dequantize(q);
  double mse = 0.0, max_err = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double e = static_cast<double>(x[i]) - static_cast<double>(y[i]);
    mse += e * e;
    max_err = std::max(max_err, std::fabs(e));
  }
  mse /= static_cast<double>(x.size());
  Manifest man("quant", out_dir);
  man.config() = {{"input", input}, {"scheme", scheme.name()}, {"granularity", granularity}};
  {
    std::ofstream os(man.path("quantized.bin"), std::ios::binary);
    io::write_quantized(os, q);
  }
  man.add("quantized.bin");
  const nlohmann::json stats = {{"scheme", scheme.name()},
                                {"elements", x.size()},
                                {"groups", q.scales.size()},
                                {"mse", mse},
                                {"max_abs_err", max_err},
                                {"sparsity", measure_sparsity(y)}};
  man.write_text("quant_stats.json", stats.dump(2) + "\n");
  man.result() = stats;
  man.save();
  out << stats.dump() << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------
// Argument parsing

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  CLI::App app{"Ternary-weight transformer with hybrid 4-bit activations, trained at toy scale",
               "bitnet-a48"};
  app.require_subcommand(1);

  TrainFlags tf;
  auto* train = app.add_subcommand("train", "two-stage training, or an ablation preset");
  train->add_option("--config", tf.config_file, "JSON config with model/trainer/data/ablation")
      ->check(CLI::ExistingFile);
  train->add_option("--out-dir", tf.out_dir, "output directory")->required();
  train->add_option("--ablation", tf.ablation, "preset name")
      ->check(CLI::IsMember(ablation_names()));
  train->add_option("--steps", tf.steps, "total optimizer steps");
  train->add_option("--seed", tf.seed, "initialization and data seed");
  train->add_option("--batch", tf.batch, "sequences per step");
  train->add_option("--seq-len", tf.seq_len, "tokens per sequence");
  train->add_option("--warmup", tf.warmup, "warmup steps");
  train->add_option("--stage-split", tf.stage_split, "fraction of steps in stage 1");
  train->add_option("--peak-lr", tf.peak_lr, "stage-1 peak learning rate");
  train->add_option("--second-stage-lr", tf.second_lr, "learning rate at the stage boundary");
  train->add_option("--hidden", tf.hidden, "hidden size");
  train->add_option("--glu", tf.glu, "FFN intermediate size");
  train->add_option("--heads", tf.heads, "attention heads");
  train->add_option("--layers", tf.layers, "transformer blocks");
  train->add_option("--vocab", tf.vocab, "vocabulary size");
  train->add_option("--kv-bits", tf.kv_bits, "KV cache bits (3, 4, 8=off)");
  train->add_option("--q-bits", tf.q_bits, "query bits (4, 16=off)");
  train->add_flag("--fp4", tf.fp4, "stage-2 4-bit inputs use FP4 E2M1 instead of INT4");
  train->add_flag("--dense-topk-ste", tf.dense_topk_ste, "pass top-k gradients densely");
  train->add_option("--log-every", tf.log_every, "print a progress line every N steps");

  double tolerance = 1e-4;
  std::uint64_t gc_seed = 7;
  std::string gc_out;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient check");
  gradcheck->add_option("--tolerance", tolerance, "relative error bound");
  gradcheck->add_option("--seed", gc_seed, "fixture seed");
  gradcheck->add_option("--out-dir", gc_out, "write a manifest here");

  auto add_eval = [](CLI::App* sub, EvalFlags& ef) {
    sub->add_option("--checkpoint", ef.checkpoint, "checkpoint file")->required();
    sub->add_option("--out-dir", ef.out_dir, "output directory")->required();
    sub->add_option("--batches", ef.batches, "evaluation batches")->check(CLI::PositiveNumber);
    sub->add_option("--batch", ef.batch, "sequences per batch")->check(CLI::PositiveNumber);
    sub->add_option("--seq-len", ef.seq_len, "tokens per sequence")->check(CLI::PositiveNumber);
    sub->add_option("--seed", ef.seed, "held-out stream seed");
    sub->add_option("--stage", ef.stage, "rebind the stage-1 or stage-2 plan");
  };

  EvalFlags sf;
  auto* sparsity = app.add_subcommand("sparsity", "per-site activation sparsity report");
  add_eval(sparsity, sf);

  EvalFlags hf;
  std::string site;
  std::size_t bins = 64;
  int layer = -1;
  auto* hist = app.add_subcommand("hist", "histogram of a projection's inputs");
  add_eval(hist, hf);
  hist->add_option("--site", site, "qkv, out, gate, up or down")->required();
  hist->add_option("--bins", bins, "bin count");
  hist->add_option("--layer", layer, "single layer (default: all)");

  EvalFlags kf;
  std::optional<int> kv_bits, q_bits;
  auto* kv = app.add_subcommand("kv-eval", "held-out perplexity under low-bit Q/K/V");
  add_eval(kv, kf);
  kv->add_option("--kv-bits", kv_bits, "3, 4 or 8");
  kv->add_option("--q-bits", q_bits, "4 or 16");

  std::string qin, qscheme, qgran = "per-token", qout;
  auto* quant = app.add_subcommand("quant", "quantize a tensor file");
  quant->add_option("--input", qin, "tensor file")->required()->check(CLI::ExistingFile);
  quant->add_option("--scheme", qscheme, "e.g. int8, int4, int4x2, fp4, ternary, u4")->required();
  quant->add_option("--granularity", qgran, "per-token or per-tensor");
  quant->add_option("--out-dir", qout, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*train) return cmd_train(tf, out);
    if (*gradcheck) return cmd_gradcheck(tolerance, gc_seed, gc_out, out);
    if (*sparsity) return cmd_sparsity(sf, out);
    if (*hist) return cmd_hist(hf, site, bins, layer, out);
    if (*kv) return cmd_kv_eval(kf, kv_bits, q_bits, out);
    if (*quant) return cmd_quant(qin, qscheme, qgran, qout, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DomainError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const io::FormatError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}

/// Convenience for tests: argv[0] is prepended.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  std::vector<const char*> argv{"bitnet-a48"};
  for (const std::string& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace ba48::cli

#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <random>
#include <set>
#include <sstream>

#include "bitnet_a48.hpp"

using namespace ba48;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("ba48_test_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) { return cli::read_file(p); }

std::vector<std::string> small_model_flags() {
  return {"--hidden", "16", "--glu", "44", "--heads", "2", "--layers", "2", "--vocab", "24",
          "--batch", "2", "--seq-len", "16", "--warmup", "2"};
}

std::vector<std::string> join(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

int run_cli(const std::vector<std::string>& args, std::string* out_text = nullptr) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  if (out_text) *out_text = out.str() + err.str();
  return code;
}

}  // namespace

TEST(TensorFile, RoundTripProperty) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<std::size_t> rank(1, 4), dim(1, 6);
  for (int t = 0; t < 50; ++t) {
    Shape s(rank(rng));
    for (auto& d : s) d = dim(rng);
    Tensor<float> x(s);
    for (float& v : x.data()) v = std::normal_distribution<float>()(rng);
    std::stringstream ss;
    io::write_tensor(ss, x);
    const Tensor<float> y = io::read_tensor<float>(ss);
    ASSERT_EQ(x, y);
  }
}

TEST(TensorFile, ByteLayout) {
  std::stringstream ss;
  io::write_tensor(ss, Tensor<float>(Shape{2, 1}, std::vector<float>{1.0f, -2.0f}));
  const std::string b = ss.str();
  ASSERT_EQ(b.size(), 4u + 1u + 16u + 8u);
  EXPECT_EQ(b.substr(0, 4), "BA48");
  EXPECT_EQ(b[4], 2);
  EXPECT_EQ(static_cast<unsigned char>(b[5]), 2u);
  for (int i = 6; i < 13; ++i) EXPECT_EQ(b[i], 0);
  EXPECT_EQ(static_cast<unsigned char>(b[13]), 1u);
  float first;
  std::memcpy(&first, b.data() + 21, 4);
  EXPECT_EQ(first, 1.0f);
  EXPECT_EQ(static_cast<unsigned char>(b[28]), 0xC0u);  // -2.0f high byte
}

TEST(TensorFile, FormatErrors) {
  std::stringstream bad("XXXX");
  EXPECT_THROW(io::read_tensor<float>(bad), io::FormatError);
  std::stringstream ss;
  io::write_tensor(ss, Tensor<float>(Shape{3}, 1.0f));
  std::string b = ss.str();
  std::stringstream truncated(b.substr(0, b.size() - 2));
  EXPECT_THROW(io::read_tensor<float>(truncated), io::FormatError);
  b[5] = 0;
  for (int i = 6; i < 13; ++i) b[i] = 0;
  std::stringstream zero(b);
  EXPECT_THROW(io::read_tensor<float>(zero), io::FormatError);
}

TEST(QuantizedFile, RoundTripEverySchemeAndRejectsBadTag) {
  std::mt19937_64 rng(2);
  Tensor<float> x(Shape{5, 12});
  for (float& v : x.data()) v = std::normal_distribution<float>()(rng);
  for (const QuantScheme& s :
       {QuantScheme::ternary(), QuantScheme::int8(), QuantScheme::int4(2.0), QuantScheme::fp4(),
        QuantScheme::fp4(1, 2), QuantScheme::unsigned_absmax(3),
        QuantScheme::unsigned_absmax(4, Granularity::PerTensor)}) {
    const auto q = quantize(x, s);
    std::stringstream ss;
    io::write_quantized(ss, q);
    const auto r = io::read_quantized<float>(ss);
    EXPECT_EQ(r.scheme.name(), s.name());
    EXPECT_EQ(r.codes, q.codes);
    EXPECT_EQ(dequantize(r), dequantize(q)) << s.name();
  }
  std::stringstream ss;
  io::write_quantized(ss, quantize(x, QuantScheme::int8()));
  std::string b = ss.str();
  b[4] = 99;
  std::stringstream bad(b);
  EXPECT_THROW(io::read_quantized<float>(bad), io::FormatError);
}

TEST(Checkpoint, RoundTripPreservesForward) {
  ModelConfig c;
  c.hidden_size = 16;
  c.glu_size = 44;
  c.n_heads = 2;
  c.n_layers = 2;
  c.vocab_size = 24;
  c.seq_len = 8;
  auto m = TransformerModel<float>::init(c, 3);
  configure_stage(m, Stage::Stage2);
  std::stringstream ss;
  io::write_checkpoint(ss, m, {{"step", 12}});
  auto ck = io::read_checkpoint<float>(ss);
  EXPECT_EQ(ck.meta.at("step"), 12);
  EXPECT_EQ(ck.model.plan, m.plan);
  const TokenBatch t{1, 8, {0, 3, 5, 7, 1, 2, 9, 23}};
  EXPECT_EQ(ck.model.forward(t), m.forward(t));

  std::stringstream s2;
  io::write_checkpoint(s2, m);
  const std::string b = s2.str();
  std::stringstream cut(b.substr(0, b.size() / 2));
  EXPECT_THROW(io::read_checkpoint<float>(cut), io::FormatError);
  std::stringstream magic("BA48CKPT2");
  EXPECT_THROW(io::read_checkpoint<float>(magic), io::FormatError);
}

TEST(Checksum, Fnv1a64KnownValues) {
  EXPECT_EQ(io::fnv1a64(""), 0xcbf29ce484222325ull);
  EXPECT_EQ(io::fnv1a64("a"), 0xaf63dc4c8601ec8cull);
  EXPECT_EQ(cli::hex64(0xabcull), "0000000000000abc");
}

TEST(Ablations, PresetsAreConfigOnly) {
  for (const std::string& n : cli::ablation_names()) EXPECT_NO_THROW(cli::ablation_preset(n, false)) << n;
  EXPECT_THROW(cli::ablation_preset("nope", false), cli::UsageError);
  const auto full4 = cli::ablation_preset("full-int4", false);
  EXPECT_EQ(full4.plans.stage1.down, InputScheme::of(QuantScheme::int4(2.0)));
  EXPECT_TRUE(full4.expect_divergence);
  const auto hybrid = cli::ablation_preset("hybrid", false);
  EXPECT_FALSE(hybrid.two_stage);
  EXPECT_EQ(hybrid.plans.stage1, stage_plan(Stage::Stage2, false));
  EXPECT_EQ(cli::ablation_preset("full-fp4", false).plans.stage1.down,
            InputScheme::of(QuantScheme::fp4()));
  EXPECT_EQ(cli::ablation_preset("outproj-topk-off", false).plans.stage2.out,
            InputScheme::of(QuantScheme::int8()));
  EXPECT_EQ(cli::ablation_preset("down-relu2-vs-swish", false).plans.stage1.activation,
            GateActivation::Swish);
}

TEST(Cli, HelpAndUsageErrors) {
  EXPECT_EQ(run_cli({"--help"}), cli::kExitOk);
  EXPECT_EQ(run_cli({}), cli::kExitUsage);
  EXPECT_EQ(run_cli({"frobnicate"}), cli::kExitUsage);
  EXPECT_EQ(run_cli({"train"}), cli::kExitUsage);
  const fs::path d = scratch("usage");
  EXPECT_EQ(run_cli({"train", "--out-dir", d.string(), "--ablation", "nope"}), cli::kExitUsage);
  EXPECT_EQ(run_cli({"train", "--out-dir", d.string(), "--heads", "3", "--hidden", "16"}),
            cli::kExitUsage);
  EXPECT_EQ(run_cli({"sparsity", "--checkpoint", (d / "missing.bin").string(), "--out-dir", d.string()}),
            cli::kExitUsage);
  const fs::path cfg = d / "bad.json";
  fs::create_directories(d);
  std::ofstream(cfg) << "{not json";
  EXPECT_EQ(run_cli({"train", "--out-dir", d.string(), "--config", cfg.string()}), cli::kExitUsage);
}

TEST(Cli, TrainZeroStepsWritesInitialCheckpointOnly) {
  const fs::path d = scratch("steps0");
  ASSERT_EQ(run_cli(join({"train", "--out-dir", d.string(), "--steps", "0"}, small_model_flags())),
            cli::kExitOk);
  std::set<std::string> files;
  for (const auto& e : fs::directory_iterator(d)) files.insert(e.path().filename().string());
  EXPECT_EQ(files, (std::set<std::string>{"checkpoint.bin", "manifest.json"}));
  const auto man = nlohmann::json::parse(slurp(d / "manifest.json"));
  EXPECT_EQ(man.at("command"), "train");
  EXPECT_EQ(man.at("result").at("steps"), 0);
  EXPECT_EQ(man.at("config").at("model").at("hidden_size"), 16);
  EXPECT_TRUE(man.at("artifacts").contains("checkpoint.bin"));
  const auto ck = io::load_checkpoint<float>((d / "checkpoint.bin").string());
  EXPECT_EQ(ck.meta.at("step"), 0);
}

TEST(Cli, TrainIsDeterministicAndFeedsReports) {
  const fs::path a = scratch("train_a"), b = scratch("train_b");
  const auto flags = join({"--steps", "20", "--seed", "5"}, small_model_flags());
  std::string text;
  ASSERT_EQ(run_cli(join({"train", "--out-dir", a.string()}, flags), &text), cli::kExitOk) << text;
  ASSERT_EQ(run_cli(join({"train", "--out-dir", b.string()}, flags)), cli::kExitOk);
  for (const char* f : {"loss.csv", "checkpoint.bin", "checkpoint_stage1.bin"})
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  const auto man = nlohmann::json::parse(slurp(a / "manifest.json"));
  EXPECT_EQ(man.at("result").at("boundary_step"), 19);
  EXPECT_EQ(man.at("artifacts").at("loss.csv").at("fnv1a64"),
            cli::hex64(io::fnv1a64(slurp(a / "loss.csv"))));
  EXPECT_EQ(slurp(a / "loss.csv").substr(0, 32), "step,stage,lr,wd,loss,grad_norm\n");

  const std::string ck = (a / "checkpoint.bin").string();
  const fs::path r = scratch("reports");
  ASSERT_EQ(run_cli({"sparsity", "--checkpoint", ck, "--out-dir", r.string(), "--batches", "2",
                     "--seq-len", "16", "--batch", "2"}),
            cli::kExitOk);
  const auto sp = nlohmann::json::parse(slurp(r / "sparsity.json"));
  EXPECT_GE(sp.at("sites").at("out").at("sparsity_pct").get<double>(), 50.0);
  EXPECT_NE(slurp(r / "sparsity.csv").find("down,"), std::string::npos);

  ASSERT_EQ(run_cli({"hist", "--checkpoint", ck, "--out-dir", r.string(), "--site", "qkv",
                     "--batches", "1", "--seq-len", "16", "--bins", "10"}),
            cli::kExitOk);
  EXPECT_EQ(slurp(r / "hist_qkv.csv").substr(0, 15), "bin_left,count\n");
  EXPECT_EQ(run_cli({"hist", "--checkpoint", ck, "--out-dir", r.string(), "--site", "head"}),
            cli::kExitUsage);

  ASSERT_EQ(run_cli({"kv-eval", "--checkpoint", ck, "--out-dir", r.string(), "--batches", "2",
                     "--seq-len", "16"}),
            cli::kExitOk);
  const std::string kv = slurp(r / "kv_eval.csv");
  EXPECT_EQ(kv.substr(0, 50), "kv_bits,q_bits,loss,perplexity,relative_ppl_change");
  EXPECT_NE(kv.find("\n3,4,"), std::string::npos);
  EXPECT_NE(kv.find("\n8,16,"), std::string::npos);
  EXPECT_EQ(run_cli({"kv-eval", "--checkpoint", ck, "--out-dir", r.string(), "--kv-bits", "5"}),
            cli::kExitUsage);
  EXPECT_EQ(run_cli({"kv-eval", "--checkpoint", ck, "--out-dir", r.string(), "--seq-len", "999"}),
            cli::kExitUsage);
}

TEST(Cli, QuantCommand) {
  const fs::path d = scratch("quant");
  fs::create_directories(d);
  std::mt19937_64 rng(6);
  Tensor<float> x(Shape{4, 10});
  for (float& v : x.data()) v = std::normal_distribution<float>()(rng);
  io::save_tensor_file((d / "x.bin").string(), x);
  ASSERT_EQ(run_cli({"quant", "--input", (d / "x.bin").string(), "--scheme", "int4", "--out-dir",
                     d.string()}),
            cli::kExitOk);
  std::ifstream is(d / "quantized.bin", std::ios::binary);
  const auto q = io::read_quantized<float>(is);
  EXPECT_EQ(dequantize(q), fake_quant(x, QuantScheme::int4()));
  const auto stats = nlohmann::json::parse(slurp(d / "quant_stats.json"));
  EXPECT_EQ(stats.at("groups"), 4);
  EXPECT_GT(stats.at("mse").get<double>(), 0.0);
  EXPECT_EQ(run_cli({"quant", "--input", (d / "x.bin").string(), "--scheme", "u4", "--granularity",
                     "per-tensor", "--out-dir", d.string()}),
            cli::kExitOk);
  EXPECT_EQ(run_cli({"quant", "--input", (d / "x.bin").string(), "--scheme", "identity",
                     "--out-dir", d.string()}),
            cli::kExitUsage);
  EXPECT_EQ(run_cli({"quant", "--input", (d / "x.bin").string(), "--scheme", "int5", "--out-dir",
                     d.string()}),
            cli::kExitUsage);
  std::ofstream(d / "junk.bin") << "junk";
  EXPECT_EQ(run_cli({"quant", "--input", (d / "junk.bin").string(), "--scheme", "int8",
                     "--out-dir", d.string()}),
            cli::kExitUsage);
}

TEST(Cli, GradcheckPasses) {
  const fs::path d = scratch("gradcheck");
  std::string text;
  EXPECT_EQ(run_cli({"gradcheck", "--out-dir", d.string()}, &text), cli::kExitOk);
  EXPECT_NE(text.find("PASS"), std::string::npos);
  EXPECT_TRUE(fs::exists(d / "manifest.json"));
  EXPECT_EQ(run_cli({"gradcheck", "--tolerance", "1e-30"}), cli::kExitAssertion);
}

TEST(Cli, DivergenceExitCodes) {
  // A huge learning rate with a short patience blows the loss up.
  const fs::path d = scratch("diverge");
  fs::create_directories(d);
  const fs::path cfg = d / "cfg.json";
  std::ofstream(cfg) << R"({"trainer": {"divergence_patience": 5, "grad_clip": 0}})";
  const auto flags = join({"--steps", "120", "--peak-lr", "30", "--second-stage-lr", "30",
                           "--config", cfg.string()},
                          small_model_flags());
  std::string text;
  const int code = run_cli(join({"train", "--out-dir", (d / "a").string()}, flags), &text);
  EXPECT_EQ(code, cli::kExitDiverged) << text;
  EXPECT_NE(text.find("diverged at step"), std::string::npos);
  const auto man = nlohmann::json::parse(slurp(d / "a" / "manifest.json"));
  EXPECT_TRUE(man.at("result").at("diverged").get<bool>());
  // The same blow-up under a preset that expects divergence is a success.
  EXPECT_EQ(run_cli(join({"train", "--out-dir", (d / "b").string(), "--ablation", "full-int4"}, flags)),
            cli::kExitOk);
}

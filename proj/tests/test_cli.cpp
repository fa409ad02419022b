#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mpseg/cli.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "mpseg");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = mpseg::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mpseg_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

const char* kPhantomYaml = R"(count: 6
seed: 5
dims: [32, 32, 16]
spacing: [0.6, 0.6, 4.0]
tumor_center: [9.6, 9.6, 32.0]
tumor_radii: [4.0, 4.0, 16.0]
center_jitter_mm: [0.5, 0.5, 2.0]
)";

std::string experiment_yaml(const fs::path& manifest, const fs::path& out) {
  return "data:\n  manifest: " + manifest.string() + "\n  split: {train: 3, val: 2, test: 1, seed: 2}\n" +
         "model:\n  variant: multihead_2\n  level_filters: [2, 4, 4, 4]\n  bottleneck_filters: 4\n" +
         "train:\n  iterations: 4\n  batch_size: 1\n  lr: 0.001\n  patch: [16, 16, 16]\n" +
         "inference:\n  overlap: 0.5\noutput_dir: " + out.string() + "\n";
}

}  // namespace

TEST(Cli, PhantomPreprocessTrainInferEvaluate) {
  const fs::path root = fresh_dir("pipeline");
  write(root / "phantom.yaml", kPhantomYaml);
  auto r = run({"phantom", "--config", (root / "phantom.yaml").string(), "--out-dir", (root / "raw").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  ASSERT_TRUE(fs::exists(root / "raw" / "manifest.json"));
  ASSERT_TRUE(fs::exists(root / "raw" / "phantom_000" / "dwi_b1000.nii.gz"));
  EXPECT_TRUE(fs::exists(root / "raw" / "resolved_config.json"));

  write(root / "exp.yaml", experiment_yaml(root / "prep" / "manifest.json", root / "run"));
  r = run({"preprocess", "--manifest", (root / "raw" / "manifest.json").string(), "--config", (root / "exp.yaml").string(),
           "--out-dir", (root / "prep").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  ASSERT_TRUE(fs::exists(root / "prep" / "split.json"));

  r = run({"train", "--config", (root / "exp.yaml").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(root / "run" / "checkpoints" / "best.ckpt"));
  EXPECT_TRUE(fs::exists(root / "run" / "checkpoints" / "last.ckpt"));
  EXPECT_TRUE(fs::exists(root / "run" / "resolved_config.json"));
  std::ifstream log(root / "run" / "train_log.jsonl");
  std::string line;
  int lines = 0;
  while (std::getline(log, line)) {
    EXPECT_NO_THROW(json::parse(line));
    ++lines;
  }
  EXPECT_EQ(lines, 2);  // 3 cases / batch 1 -> 3-iteration epochs, 4 iterations

  const std::string ck = (root / "run" / "checkpoints" / "best.ckpt").string();
  r = run({"infer", "--checkpoint", ck, "--manifest", (root / "prep" / "manifest.json").string(), "--split", "test",
           "--config", (root / "exp.yaml").string(), "--out-dir", (root / "pred").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto split = json::parse(std::ifstream(root / "prep" / "split.json"));
  const std::string test_id = split.at("test")[0];
  ASSERT_TRUE(fs::exists(root / "pred" / (test_id + ".nii.gz")));

  r = run({"evaluate", "--pred-dir", (root / "prep" / "masks").string(), "--gt-dir", (root / "prep" / "masks").string(),
           "--out", (root / "self.csv").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  std::ifstream csv(root / "self.csv");
  std::getline(csv, line);
  int rows = 0;
  while (std::getline(csv, line) && line.rfind("__", 0) != 0) {
    EXPECT_NE(line.find(",1.000000,0.000000,0.000000,0.000000,"), std::string::npos) << line;
    ++rows;
  }
  EXPECT_EQ(rows, 6);

  r = run({"sensitivity", "--checkpoint", ck, "--manifest", (root / "prep" / "manifest.json").string(), "--cases", "val",
           "--out", (root / "sens.csv").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(root / "sens.csv"));

  r = run({"gradcam", "--checkpoint", ck, "--manifest", (root / "prep" / "manifest.json").string(), "--case", test_id,
           "--channel-dropout", "ADC", "--out", (root / "cam.nii.gz").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(root / "cam.nii.gz"));
  EXPECT_TRUE(fs::exists(root / "cam.json"));
}

TEST(Cli, MalformedConfigWritesNothing) {
  const fs::path root = fresh_dir("malformed");
  write(root / "bad.yaml", "train:\n  learning_rate: 0.1\noutput_dir: " + (root / "out").string() + "\n");
  auto r = run({"train", "--config", (root / "bad.yaml").string()});
  EXPECT_EQ(r.code, 2);
  const auto rec = json::parse(r.err);
  EXPECT_EQ(rec.at("error"), "ConfigInvalid");
  EXPECT_FALSE(fs::exists(root / "out"));

  write(root / "bad2.yaml", "model:\n  variant: resnet\n");
  r = run({"train", "--config", (root / "bad2.yaml").string()});
  EXPECT_EQ(r.code, 2);
  write(root / "bad3.yaml", "train: [unclosed\n");
  r = run({"train", "--config", (root / "bad3.yaml").string()});
  EXPECT_EQ(r.code, 2);
}

TEST(Cli, MissingInputsExitThree) {
  auto r = run({"train", "--config", "/nonexistent/exp.yaml"});
  EXPECT_EQ(r.code, 3);
  r = run({"evaluate", "--pred-dir", "/nonexistent/a", "--gt-dir", "/nonexistent/b", "--out", "/tmp/x.csv"});
  EXPECT_EQ(r.code, 3);
}

TEST(Cli, UsageErrors) {
  EXPECT_EQ(run({}).code, 2);
  EXPECT_EQ(run({"frobnicate"}).code, 2);
  EXPECT_EQ(run({"infer", "--checkpoint"}).code, 2);
  EXPECT_EQ(run({"--help"}).code, 0);
}

TEST(Cli, AdcSubcommand) {
  const fs::path root = fresh_dir("adc");
  write(root / "ph.yaml", "count: 1\ndims: [16, 16, 4]\nspacing: [1, 1, 4]\ntumor_center: [8, 8, 8]\n"
                          "tumor_radii: [3, 3, 4]\ncenter_jitter_mm: [0, 0, 0]\nradius_jitter: 0\ndwi_noise: 0\n");
  ASSERT_EQ(run({"phantom", "--config", (root / "ph.yaml").string(), "--out-dir", root.string()}).code, 0);
  const fs::path c = root / "phantom_000";
  auto r = run({"adc", "--dwi", (c / "dwi_b0000.nii.gz").string(), "--dwi", (c / "dwi_b1000.nii.gz").string(), "--b", "0",
                "--b", "1000", "--method", "two-point", "--out", (root / "adc.nii.gz").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto fitted = mpseg::load_volume((root / "adc.nii.gz").string(), mpseg::ChannelKind::ADC);
  const auto ref = mpseg::load_volume((c / "adc.nii.gz").string(), mpseg::ChannelKind::ADC);
  EXPECT_EQ(fitted.storage(), ref.storage());
  EXPECT_TRUE(fs::exists(root / "adc_resolved_config.json"));
  r = run({"adc", "--dwi", (c / "dwi_b0000.nii.gz").string(), "--b", "0", "--b", "1000", "--out", (root / "x.nii.gz").string()});
  EXPECT_EQ(r.code, 2);
}

TEST(Cli, SchemaRejectsUnknownKeysAndFillsDefaults) {
  using namespace mpseg::config;
  EXPECT_THROW(resolve_experiment(json{{"modle", json::object()}}), mpseg::Error);
  EXPECT_THROW(resolve_experiment(json{{"train", {{"lr", -1.0}}}}), mpseg::Error);
  EXPECT_THROW(resolve_experiment(json{{"train", {{"loss", "focal"}}}}), mpseg::Error);
  EXPECT_THROW(resolve_experiment(json{{"inference", {{"overlap", 1.0}}}}), mpseg::Error);
  const json r = resolve_experiment(json::object());
  EXPECT_EQ(r["train"]["iterations"], 100000);
  EXPECT_EQ(r["train"]["batch_size"], 2);
  EXPECT_DOUBLE_EQ(r["train"]["lr"].get<double>(), 1e-4);
  EXPECT_EQ(r["model"]["level_filters"], json({32, 64, 128, 256}));
  const auto tc = train_config(r);
  EXPECT_EQ(tc.patch, (mpseg::Dims3{256, 256, 16}));
  EXPECT_DOUBLE_EQ(tc.window.overlap, 0.75);
}

TEST(Cli, ExecutableReportsJsonErrors) {
  const std::string cmd = std::string(MPSEG_CLI_PATH) + " train --config /nonexistent.yaml 2>/dev/null";
  const int status = std::system(cmd.c_str());
  ASSERT_NE(status, -1);
  EXPECT_EQ(WEXITSTATUS(status), 3);
}

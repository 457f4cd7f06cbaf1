// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "kvgate/harness.hpp"
#include "kvgate/kv_cache.hpp"
#include "kvgate/metrics.hpp"
#include "kvgate/selftest.hpp"
#include "kvgate/weights_io.hpp"
#include "test_support.hpp"

namespace kvgate {
namespace {

namespace fs = std::filesystem;

constexpr const char* kSmallConfig = R"({
  "version": 1,
  "seed": 5,
  "teacher": {"n_layers": 2, "d_model": 32, "n_heads": 4, "n_kv_heads": 2, "d_ffn": 48,
              "vocab_size": 16, "seed": 3},
  "indexer": {"dim": 4},
  "memory": {"d_mem": 4},
  "plan": {"ratio": 0.5, "interval": 8, "sink_count": 2, "local_window": 8},
  "policy": {"name": "indexer", "window": 4},
  "train": {
    "indexer": {"peak_lr": 0.05, "final_lr": 1e-4, "warmup": 2, "stable": 6, "decay": 4},
    "memory": {"peak_lr": 0.5, "final_lr": 1e-4, "warmup": 2, "stable": 4, "decay": 2,
               "joint_indexer_lr_scale": 0.1}
  },
  "data": {"train_sequences": 6, "eval_sequences": 3, "prompt_len": 48, "continuation": 8,
           "needles": 3, "tail": 6},
  "decode": {"steps": 40, "budgets": [12, 24]},
  "sweep": {"policies": ["random", "knorm", "indexer"], "ratios": [0.0, 0.5, 0.75],
            "recall_sequences": 67}
})";

fs::path write_config(const fs::path& dir, const std::string& text = kSmallConfig) {
  const fs::path p = dir / "config.json";
  std::ofstream(p) << text;
  return p;
}

CommandOptions options_for(const fs::path& config, const fs::path& out) {
  CommandOptions o;
  o.config_path = config.string();
  o.out_dir = out.string();
  return o;
}

int guarded(const std::string& cmd, const CommandOptions& o, std::string* err_line = nullptr) {
  std::ostringstream err;
  const int rc = run_command_guarded(cmd, o, err);
  if (err_line != nullptr) *err_line = err.str();
  return rc;
}

TEST(Harness, SelftestPasses) {
  for (const SelfTestCheck& c : selftest_checks()) EXPECT_TRUE(c.passed) << c.name << ": " << c.detail;
  std::ostringstream out;
  EXPECT_TRUE(run_selftest(out));
  EXPECT_EQ(out.str().find("FAIL"), std::string::npos);
}

TEST(Harness, ErrorRecordShape) {
  EXPECT_EQ(error_record("io", "gone", 4), R"({"error":{"exit_code":4,"kind":"io","message":"gone"}})");
}

TEST(Harness, ExitCodesForBadInvocations) {
  const fs::path dir = testing::scratch_dir("harness_errors");
  const fs::path cfg = write_config(dir);
  std::string err;
  EXPECT_EQ(guarded("nope", options_for(cfg, dir / "a"), &err), 2);
  EXPECT_NE(err.find("\"config\""), std::string::npos);
  EXPECT_EQ(guarded("sweep", options_for(dir / "missing.json", dir / "a"), &err), 4);
  EXPECT_EQ(guarded("train-memory", options_for(cfg, dir / "a"), &err), 4);
  EXPECT_EQ(guarded("sweep", options_for(cfg, dir / "a"), &err), 2);
  EXPECT_EQ(guarded("report", options_for(cfg, dir / "a"), &err), 2);

  CommandOptions bad_threads = options_for(cfg, dir / "a");
  bad_threads.threads = 0;
  EXPECT_EQ(guarded("sweep", bad_threads), 2);

  const fs::path broken = dir / "broken.jsonl";
  std::ofstream(broken) << R"({"schema":9,"record":"point"})" << "\n";
  CommandOptions report = options_for(cfg, dir / "r");
  report.inputs = {broken.string()};
  EXPECT_EQ(guarded("report", report, &err), 4);
  EXPECT_NE(err.find("\"io\""), std::string::npos);

  fs::create_directories(dir / "bad");
  const fs::path bad_cfg = write_config(dir / "bad", R"({"version": 1, "teacher": {"layers": 2}})");
  EXPECT_EQ(guarded("sweep", options_for(bad_cfg, dir / "a"), &err), 2);
}

std::map<std::string, std::string> output_files(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    if (name == "run.log") continue;
    out[name] = testing::read_file(e.path());
  }
  return out;
}

// One shared pipeline run; later tests inspect its outputs.
class Pipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = testing::scratch_dir("harness_pipeline");
    config_ = write_config(root_);
    ASSERT_EQ(guarded("train-indexer", options_for(config_, root_ / "idx")), 0);
    CommandOptions mem = options_for(config_, root_ / "mem");
    mem.checkpoint = (root_ / "idx" / "indexer.kvgw").string();
    ASSERT_EQ(guarded("train-memory", mem), 0);
    CommandOptions sweep = options_for(config_, root_ / "sweep");
    sweep.checkpoint = (root_ / "mem" / "memory.kvgw").string();
    ASSERT_EQ(guarded("sweep", sweep), 0);
  }
  static fs::path root_;
  static fs::path config_;
};
fs::path Pipeline::root_;
fs::path Pipeline::config_;

TEST_F(Pipeline, WritesExpectedFiles) {
  for (const char* f : {"indexer_loss.jsonl", "indexer_eval.jsonl", "indexer.kvgw", "run.log"}) {
    EXPECT_TRUE(fs::exists(root_ / "idx" / f)) << f;
  }
  for (const char* f : {"memory_loss.jsonl", "memory_eval.jsonl", "memory.kvgw"}) {
    EXPECT_TRUE(fs::exists(root_ / "mem" / f)) << f;
  }
  EXPECT_EQ(read_metrics((root_ / "idx" / "indexer_loss.jsonl").string()).size(), 12u);
  const auto points = read_metrics((root_ / "sweep" / "sweep.jsonl").string());
  ASSERT_EQ(points.size(), 9u);
  for (const MetricsRecord& p : points) {
    EXPECT_EQ(p.string("record"), "point");
    EXPECT_EQ(p.string("experiment"), "sweep");
    EXPECT_EQ(*p.number("total_bytes"),
              *p.number("kv_bytes") + *p.number("indexer_key_bytes") + *p.number("memory_bytes"));
    EXPECT_TRUE(p.number("mse_fused").has_value());
    if (*p.number("ratio") == 0.0) {
      EXPECT_EQ(*p.number("mse_attn"), 0.0);
      EXPECT_EQ(*p.number("recall"), 1.0);
    }
  }
  // Points are written policy-major with ratios in config order.
  for (std::size_t i = 0; i + 1 < points.size(); ++i) {
    if (points[i].string("policy") != points[i + 1].string("policy")) continue;
    EXPECT_GT(*points[i].number("kv_bytes"), *points[i + 1].number("kv_bytes"));
  }
}

TEST_F(Pipeline, RepeatedRunsAreByteIdentical) {
  const fs::path again = root_ / "idx_again";
  ASSERT_EQ(guarded("train-indexer", options_for(config_, again)), 0);
  EXPECT_EQ(output_files(again), output_files(root_ / "idx"));

  CommandOptions sweep = options_for(config_, root_ / "sweep_threads");
  sweep.checkpoint = (root_ / "mem" / "memory.kvgw").string();
  sweep.threads = 3;
  ASSERT_EQ(guarded("sweep", sweep), 0);
  EXPECT_EQ(output_files(root_ / "sweep_threads"), output_files(root_ / "sweep"));
}

TEST_F(Pipeline, FreezeIndexerKeepsIndexerTensors) {
  CommandOptions mem = options_for(config_, root_ / "frozen");
  mem.checkpoint = (root_ / "idx" / "indexer.kvgw").string();
  mem.freeze_indexer = true;
  ASSERT_EQ(guarded("train-memory", mem), 0);
  const WeightsContainer before = WeightsContainer::load(mem.checkpoint);
  const WeightsContainer after = WeightsContainer::load((root_ / "frozen" / "memory.kvgw").string());
  std::size_t compared = 0;
  for (const std::string& name : before.names()) {
    ASSERT_TRUE(after.has(name)) << name;
    EXPECT_TRUE(testing::bit_equal(after.get(name).data, before.get(name).data)) << name;
    ++compared;
  }
  EXPECT_GT(compared, 0u);

  const WeightsContainer joint = WeightsContainer::load((root_ / "mem" / "memory.kvgw").string());
  bool changed = false;
  for (const std::string& name : before.names()) {
    changed = changed || !testing::bit_equal(joint.get(name).data, before.get(name).data);
  }
  EXPECT_TRUE(changed);
}

TEST_F(Pipeline, RandomRecallMatchesKeepFraction) {
  const auto points = read_metrics((root_ / "sweep" / "sweep.jsonl").string());
  const std::size_t candidates = 48 - 2 - 8;
  for (const MetricsRecord& p : points) {
    if (p.string("policy") != "random") continue;
    const double r = *p.number("ratio");
    const double expected = static_cast<double>(ratio_keep_count(candidates, r)) / candidates;
    const double trials = 67.0 * 3.0;
    const double sigma = std::sqrt(expected * (1.0 - expected) / trials);
    EXPECT_LE(std::abs(*p.number("recall") - expected), 3.0 * sigma + 1e-12) << "ratio " << r;
  }
}

TEST_F(Pipeline, ReportAndDecodeRun) {
  CommandOptions dec = options_for(config_, root_ / "decode");
  dec.checkpoint = (root_ / "mem" / "memory.kvgw").string();
  ASSERT_EQ(guarded("decode-sim", dec), 0);
  const auto rows = read_metrics((root_ / "decode" / "decode.jsonl").string());
  std::size_t summaries = 0;
  for (const MetricsRecord& r : rows) {
    if (r.string("record") != "summary") continue;
    ++summaries;
    EXPECT_TRUE(std::get<bool>(r.get("bound_ok")));
    EXPECT_LE(*r.number("max_kept"), *r.number("budget") + 8.0);
  }
  EXPECT_EQ(summaries, 2u);

  CommandOptions report = options_for(config_, root_ / "report");
  report.inputs = {(root_ / "sweep" / "sweep.jsonl").string(), (root_ / "decode" / "decode.jsonl").string()};
  ASSERT_EQ(guarded("report", report), 0);
  EXPECT_TRUE(fs::exists(root_ / "report" / "summary.json"));
  EXPECT_TRUE(fs::exists(root_ / "report" / "decode_indexer.csv"));
  // Header plus one row per ratio.
  const std::string csv = testing::read_file(root_ / "report" / "mse_attn_knorm.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);

  CommandOptions again = report;
  again.out_dir = (root_ / "report_again").string();
  ASSERT_EQ(guarded("report", again), 0);
  EXPECT_EQ(output_files(root_ / "report_again"), output_files(root_ / "report"));

  const fs::path empty = root_ / "empty.jsonl";
  std::ofstream(empty).flush();
  CommandOptions none = options_for(config_, root_ / "report_empty");
  none.inputs = {empty.string()};
  EXPECT_EQ(guarded("report", none), 4);
}

TEST(Harness, ZeroStepTrainingSavesInitialWeights) {
  const fs::path dir = testing::scratch_dir("harness_zero");
  std::string text = kSmallConfig;
  const std::string from = R"("warmup": 2, "stable": 6, "decay": 4)";
  text.replace(text.find(from), from.size(), R"("warmup": 0, "stable": 0, "decay": 0)");
  const fs::path cfg = write_config(dir, text);
  ASSERT_EQ(guarded("train-indexer", options_for(cfg, dir / "a")), 0);
  CommandOptions seeded = options_for(cfg, dir / "b");
  seeded.seed = 6;
  ASSERT_EQ(guarded("train-indexer", seeded), 0);
  const ExperimentConfig c = parse_config(text);
  const WeightsContainer saved = WeightsContainer::load((dir / "a" / "indexer.kvgw").string());
  const auto params = load_indexer(saved, c.indexer_shape(), c.teacher.n_layers);
  const Rng root = Rng(c.seed).split(1);
  for (std::size_t l = 0; l < c.teacher.n_layers; ++l) {
    Rng rng = root.split(l);
    const IndexerParams init = IndexerParams::init(c.indexer_shape(), rng);
    EXPECT_TRUE(testing::bit_equal(params[l].u_q.data(), init.u_q.data()));
    EXPECT_TRUE(testing::bit_equal(params[l].g.data(), init.g.data()));
  }
  EXPECT_NE(testing::read_file(dir / "a" / "indexer.kvgw"), testing::read_file(dir / "b" / "indexer.kvgw"));
}

}  // namespace
}  // namespace kvgate

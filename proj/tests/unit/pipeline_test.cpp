// Copyright 2026 The fedcq Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

#include "fedcq/error.hpp"
#include "fedcq/pipeline.hpp"
#include "support/test_util.hpp"

namespace fedcq::pipeline {
namespace {

namespace fs = std::filesystem;
using fedcq::testing::temp_dir;

// A configuration small enough for a full run in well under a second.
ExperimentConfig tiny_config() {
  ExperimentConfig c;
  apply_config_text(c, R"(
    synthetic.num_markets = 2
    synthetic.users = 30
    synthetic.items = 20
    synthetic.interactions_per_user = 10
    cf.epochs = 5
    quant.codebook_size = 8
    fed.rounds = 2
    ctr.hidden = 8
    ctr.epochs = 2
  )");
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void run_all(const ExperimentConfig& c, const fs::path& root) {
  cmd_pretrain(c, root);
  cmd_federate(c, root);
  cmd_tokenize(c, root);
  cmd_train_ctr(c, root);
}

TEST(ConfigTest, GrammarAndRoundTrip) {
  ExperimentConfig c;
  apply_config_text(c, "# comment\n\n  seed = 7   # trailing\nmode=no_local\nctr.hidden = 64,32\n");
  EXPECT_EQ(c.seed, 7u);
  EXPECT_EQ(c.mode, ctr::AblationMode::kNoLocal);
  EXPECT_EQ(c.ctr.hidden, (std::vector<int>{64, 32}));
  EXPECT_EQ(c.get("ctr.hidden"), "64,32");
  apply_override(c, "fed.ldp_scale=0.01");
  EXPECT_DOUBLE_EQ(c.federation.ldp.scale, 0.01);

  const ExperimentConfig back = ExperimentConfig::from_json(c.to_json());
  for (const std::string& key : ExperimentConfig::keys()) EXPECT_EQ(back.get(key), c.get(key)) << key;
}

TEST(ConfigTest, ErrorsNameTheLine) {
  ExperimentConfig c;
  try {
    apply_config_text(c, "seed = 1\nquant.nope = 3\n", "exp.cfg");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("exp.cfg:2"), std::string::npos) << e.what();
  }
  EXPECT_THROW(apply_config_text(c, "seed 1\n"), ConfigError);
  EXPECT_THROW(c.set("cf.dim", "sixteen"), ConfigError);
  EXPECT_THROW(c.set("fed.ldp_enabled", "maybe"), ConfigError);
  EXPECT_THROW(apply_override(c, "seed"), ConfigError);
  c.set("cf.dim", "0");
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(StageTest, MissingUpstreamStagesAreReported) {
  const auto root = temp_dir("pipeline_deps");
  const ExperimentConfig c = tiny_config();
  try {
    cmd_federate(c, root);
    FAIL();
  } catch (const DependencyError& e) {
    EXPECT_NE(std::string(e.what()).find("fedcq pretrain"), std::string::npos) << e.what();
  }
  cmd_pretrain(c, root);
  EXPECT_THROW(cmd_tokenize(c, root), DependencyError);
  EXPECT_THROW(cmd_train_ctr(c, root), DependencyError);
  EXPECT_THROW(cmd_report(root), DependencyError);
}

TEST(StageTest, ModeMismatchAndInvalidation) {
  const auto root = temp_dir("pipeline_modes");
  ExperimentConfig c = tiny_config();
  run_all(c, root);
  ExperimentConfig other = c;
  other.mode = ctr::AblationMode::kNoLocal;
  EXPECT_THROW(cmd_train_ctr(other, root), ConfigError);
  // Ids-only training needs no federation.
  other.mode = ctr::AblationMode::kLocalOnly;
  EXPECT_NO_THROW(cmd_train_ctr(other, root));
  cmd_pretrain(c, root);
  EXPECT_THROW(cmd_tokenize(c, root), DependencyError);
}

TEST(StageTest, RunsAreBitReproducible) {
  const auto a = temp_dir("pipeline_repro_a"), b = temp_dir("pipeline_repro_b");
  const ExperimentConfig c = tiny_config();
  run_all(c, a);
  run_all(c, b);
  for (const std::string file :
       {"manifest.json", "tokenize/m0.user_tokens.csv", "tokenize/m1.item_tokens.csv",
        "train_ctr/metrics.jsonl", "train_ctr/report.csv", "federate/rounds.jsonl"}) {
    ASSERT_TRUE(fs::exists(a / file)) << file;
    EXPECT_EQ(slurp(a / file), slurp(b / file)) << file;
  }
  // The in-memory pipeline computes the same numbers as the staged one.
  const CtrRunResult direct = run_experiment(c);
  const CtrRunResult staged = cmd_train_ctr(c, a);
  EXPECT_EQ(direct.overall_auc, staged.overall_auc);
  EXPECT_NE(cmd_report(a).find("overall"), std::string::npos);
}

TEST(SweepTest, FailedPointsAreIsolated) {
  const auto root = temp_dir("pipeline_sweep");
  const SweepResult r = cmd_sweep(tiny_config(), "T", {"8", "1"}, 2, root);
  ASSERT_EQ(r.points.size(), 4u);
  const auto summary = r.summarize();
  ASSERT_EQ(summary.size(), 2u);
  EXPECT_EQ(summary[0].value, "8");
  EXPECT_EQ(summary[0].runs, 2);
  EXPECT_EQ(summary[0].failures, 0);
  EXPECT_GT(summary[0].mean, 0.0);
  EXPECT_EQ(summary[1].failures, 2);
  for (const auto& p : r.points) {
    if (p.value == "1") EXPECT_NE(p.error.find("codebook size"), std::string::npos) << p.error;
  }
  EXPECT_TRUE(fs::exists(root / "sweep" / "T.csv"));
  EXPECT_TRUE(fs::exists(root / "sweep" / "T_summary.csv"));
}

TEST(SweepTest, SummaryStatistics) {
  SweepResult r;
  r.points = {{"a", 1, true, "", 0.6, {}}, {"a", 2, true, "", 0.8, {}},
              {"b", 1, false, "boom", 0, {}}};
  const auto s = r.summarize();
  ASSERT_EQ(s.size(), 2u);
  EXPECT_NEAR(s[0].mean, 0.7, 1e-15);
  EXPECT_NEAR(s[0].stddev, std::sqrt(0.02), 1e-15);
  EXPECT_EQ(s[1].runs, 0);
  EXPECT_EQ(s[1].failures, 1);
}

}  // namespace
}  // namespace fedcq::pipeline

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

#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "fedcq/ctr.hpp"
#include "fedcq/error.hpp"
#include "fedcq/nn/gradcheck.hpp"
#include "support/test_util.hpp"

namespace fedcq::ctr {
namespace {

using fedcq::testing::dataset;
using fedcq::testing::record;
using fedcq::testing::small_markets;

quant::TokenTable cyclic_tokens(const data::MarketDataset& d, int T) {
  quant::TokenTable t{d.market_id, T, true, {}, {}};
  for (int u = 0; u < d.num_users; ++u) t.users.push_back({u % T, (u / T) % T});
  for (int i = 0; i < d.num_items; ++i) t.items.push_back({(i * 3) % T, i % T});
  return t;
}

CtrConfig small_config() {
  CtrConfig c;
  c.embed_dim = 4;
  c.hidden = {16, 8};
  c.lr = 1e-2;
  c.epochs = 15;
  c.batch_size = 64;
  c.patience = 15;
  c.seed = 3;
  return c;
}

// O(n^2) reference: P(score_pos > score_neg) + 0.5 P(tie).
double brute_force_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0, pairs = 0;
  for (std::size_t a = 0; a < s.size(); ++a) {
    if (!y[a]) continue;
    for (std::size_t b = 0; b < s.size(); ++b) {
      if (y[b]) continue;
      wins += s[a] > s[b] ? 1.0 : s[a] == s[b] ? 0.5 : 0.0;
      pairs += 1;
    }
  }
  return wins / pairs;
}

TEST(SchemaTest, FieldsPerMode) {
  const auto d = dataset("m", 5, 4, {record(0, 0, 1)});
  const auto tokens = cyclic_tokens(d, 8);
  const CtrConfig cfg;
  const auto full = feature_schema(d, &tokens, AblationMode::kFull);
  ASSERT_EQ(full.size(), 6u);
  EXPECT_EQ(full[3].name, "user_local");
  EXPECT_EQ(full[4].cardinality, 8);
  EXPECT_EQ(cfg.tower_spec(static_cast<int>(full.size())).input_width, 96);
  EXPECT_EQ(feature_schema(d, nullptr, AblationMode::kLocalOnly).size(), 2u);
  EXPECT_EQ(cfg.tower_spec(2).input_width, 32);
  EXPECT_EQ(feature_schema(d, &tokens, AblationMode::kNoLocal).size(), 4u);
  EXPECT_EQ(feature_schema(d, &tokens, AblationMode::kRandomCodebook).size(), 6u);
  EXPECT_THROW(feature_schema(d, nullptr, AblationMode::kFull), Error);
  quant::TokenTable single = tokens;
  single.two_level = false;
  EXPECT_THROW(feature_schema(d, &single, AblationMode::kNoGlobal), Error);
  EXPECT_NO_THROW(feature_schema(d, &single, AblationMode::kNoLocal));
}

TEST(SchemaTest, FeaturesFollowSchemaOrder) {
  const auto d = dataset("m", 5, 4, {record(3, 2, 1)});
  const auto tokens = cyclic_tokens(d, 2);
  EXPECT_EQ(build_features(d.interactions[0], &tokens, AblationMode::kFull),
            (std::vector<int>{3, 2, 1, 1, 0, 0}));
  EXPECT_EQ(build_features(d.interactions[0], &tokens, AblationMode::kNoLocal),
            (std::vector<int>{3, 2, 1, 0}));
  EXPECT_EQ(build_features(d.interactions[0], nullptr, AblationMode::kLocalOnly),
            (std::vector<int>{3, 2}));
  quant::TokenTable short_table = tokens;
  short_table.users.resize(2);
  EXPECT_THROW(build_features(d.interactions[0], &short_table, AblationMode::kFull), Error);
}

TEST(ModeTest, NamesRoundTrip) {
  for (AblationMode m : all_modes()) EXPECT_EQ(parse_mode(to_string(m)), m);
  EXPECT_EQ(all_modes().size(), 5u);
  EXPECT_THROW(parse_mode("fancy"), ConfigError);
  EXPECT_FALSE(uses_tokens(AblationMode::kLocalOnly));
  EXPECT_FALSE(uses_local_tokens(AblationMode::kNoLocal));
  EXPECT_TRUE(uses_local_tokens(AblationMode::kRandomCodebook));
}

TEST(AucTest, Examples) {
  const std::vector<int> y = {0, 0, 1, 1};
  EXPECT_EQ(auc(std::vector<double>{0.1, 0.2, 0.8, 0.9}, y), 1.0);
  EXPECT_EQ(auc(std::vector<double>{0.9, 0.8, 0.2, 0.1}, y), 0.0);
  EXPECT_EQ(auc(std::vector<double>{0.5, 0.5, 0.5, 0.5}, y), 0.5);
  EXPECT_THROW(auc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1}), Error);
  EXPECT_THROW(auc(std::vector<double>{0.1}, std::vector<int>{1, 0}), ShapeError);
}

TEST(AucTest, MatchesAllPairsOracleIncludingTies) {
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const auto n = 2 + uniform_index(rng, 499);
    const bool ties = trial % 2 == 0;
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t k = 0; k < n; ++k) {
      s[k] = ties ? static_cast<double>(uniform_index(rng, 5)) : standard_normal(rng);
      y[k] = uniform01(rng) < 0.4;
    }
    y[0] = 0;
    y[1] = 1;
    ASSERT_NEAR(auc(s, y), brute_force_auc(s, y), 1e-12) << trial;
    // A strictly increasing transform leaves the ranking, hence the AUC, unchanged.
    std::vector<double> t(n);
    for (std::size_t k = 0; k < n; ++k) t[k] = std::exp(2 * s[k]) - 3;
    ASSERT_NEAR(auc(t, y), auc(s, y), 1e-12);
  }
}

TEST(LogLossTest, Examples) {
  EXPECT_NEAR(log_loss(std::vector<double>{0.5, 0.5}, std::vector<int>{1, 0}), std::log(2.0),
              1e-15);
  EXPECT_TRUE(std::isfinite(log_loss(std::vector<double>{0.0}, std::vector<int>{1})));
}

TEST(OverallTest, Examples) {
  const std::vector<double> one = {0.7};
  const std::vector<std::size_t> one_size = {10};
  EXPECT_EQ(evaluate_overall(one, one_size), 0.7);
  const std::vector<double> two = {0.8, 0.9};
  const std::vector<std::size_t> equal = {200, 200}, skewed = {100, 300};
  EXPECT_NEAR(evaluate_overall(two, equal), 0.85, 1e-15);
  EXPECT_NEAR(evaluate_overall(two, skewed), 0.875, 1e-15);
  EXPECT_NEAR(evaluate_overall(two, skewed, false), 0.85, 1e-15);
  EXPECT_THROW(evaluate_overall({}, {}), EmptyDatasetError);
}

TEST(CtrModelTest, PredictionContracts) {
  const auto d = small_markets(4, 1)[0];
  const auto tokens = cyclic_tokens(d, 8);
  Rng rng(2);
  CtrModel model(d.market_id, feature_schema(d, &tokens, AblationMode::kFull),
                 AblationMode::kFull, small_config(), rng);
  const auto records = d.records(data::Split::kTest);
  const auto batch = predict(model, records, &tokens);
  ASSERT_EQ(batch.size(), records.size());
  for (std::size_t k = 0; k < 5; ++k) {
    const auto single = predict(model, std::span(records).subspan(k, 1), &tokens);
    EXPECT_EQ(single[0], batch[k]);
  }
  EXPECT_EQ(predict(model, records, &tokens), batch);
  for (nn::Param* p : model.tower().params()) p->value.setZero();
  EXPECT_EQ(model.predict_features({{0, 0, 0, 0, 0, 0}})[0], 0.5);
  try {
    model.predict_features({{d.num_users, 0, 0, 0, 0, 0}});
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("unseen user id"), std::string::npos) << e.what();
  }
  EXPECT_THROW(model.predict_features({{0, 0}}), ShapeError);
}

TEST(CtrModelTest, GradientMatchesFiniteDifferences) {
  const auto d = dataset("m", 3, 3, {record(0, 0, 1)});
  const auto tokens = cyclic_tokens(d, 2);
  Rng rng(5);
  CtrConfig cfg = small_config();
  cfg.hidden = {6, 4};
  cfg.init_std = 0.5;
  CtrModel model("m", feature_schema(d, &tokens, AblationMode::kFull), AblationMode::kFull, cfg,
                 rng);
  const std::vector<std::vector<int>> x = {{0, 1, 0, 0, 1, 1}, {2, 2, 1, 1, 0, 0},
                                           {1, 0, 1, 0, 0, 1}};
  const std::vector<double> y = {1, 0, 1};
  const auto r = nn::finite_diff_check(
      [&](nn::Tape& t) { return t.mean(t.bce_with_logits(model.logits(t, x), y)); },
      model.params(), 1e-6);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(TrainCtrTest, ZeroEpochsIsNearChance) {
  const auto d = small_markets(5, 1)[0];
  CtrConfig cfg = small_config();
  cfg.epochs = 0;
  const CtrResult r = train_ctr(d, nullptr, AblationMode::kLocalOnly, cfg);
  ASSERT_EQ(r.history.size(), 1u);
  EXPECT_EQ(r.best_epoch, 0);
  EXPECT_NEAR(r.valid_auc, 0.5, 0.1);
}

TEST(TrainCtrTest, TrainingLossDecreasesAndTokensLearn) {
  const auto d = small_markets(6, 1)[0];
  const auto tokens = cyclic_tokens(d, 8);
  const CtrConfig cfg = small_config();
  const CtrResult r = train_ctr(d, &tokens, AblationMode::kFull, cfg);
  ASSERT_GE(r.history.size(), 2u);
  EXPECT_LT(r.history.back().train_loss, r.history.front().train_loss);
  EXPECT_EQ(r.test_size, d.count(data::Split::kTest));
  EXPECT_EQ(r.valid_auc, r.history[static_cast<std::size_t>(r.best_epoch)].valid_auc);
  // Token tables move away from their initialisation.
  Rng init_rng = make_rng(cfg.seed, "ctr/init");
  const CtrModel init(d.market_id, feature_schema(d, &tokens, AblationMode::kFull),
                      AblationMode::kFull, cfg, init_rng);
  if (r.best_epoch > 0) {
    EXPECT_NE(r.model.table(2).value, init.table(2).value);
    EXPECT_NE(r.model.table(5).value, init.table(5).value);
  }
  const CtrResult again = train_ctr(d, &tokens, AblationMode::kFull, cfg);
  EXPECT_EQ(again.test_auc, r.test_auc);
}

TEST(TrainCtrTest, RejectsSingleClassTraining) {
  auto d = dataset("m", 2, 2, {record(0, 0, 1), record(0, 1, 1), record(1, 0, 0)});
  d.ctr_split = {data::Split::kTrain, data::Split::kTrain, data::Split::kTest};
  EXPECT_THROW(train_ctr(d, nullptr, AblationMode::kLocalOnly, small_config()), Error);
  d.ctr_split.clear();
  EXPECT_THROW(train_ctr(d, nullptr, AblationMode::kLocalOnly, small_config()), Error);
}

TEST(MetricsLineTest, CarriesModeAndEpoch) {
  const auto j = metrics_line("m1", AblationMode::kNoGlobal, {3, 0.5, 0.7, 0.65});
  EXPECT_EQ(j["market"], "m1");
  EXPECT_EQ(j["mode"], "no_global");
  EXPECT_EQ(j["epoch"], 3);
}

}  // namespace
}  // namespace fedcq::ctr

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

#include "fedcq/data.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include <gtest/gtest.h>

#include "fedcq/error.hpp"
#include "support/test_util.hpp"

namespace fedcq::data {
namespace {

using fedcq::testing::dataset;
using fedcq::testing::record;
using fedcq::testing::temp_dir;
using fedcq::testing::write_text;

TEST(LoadInteractionsTest, SingleRow) {
  const auto dir = temp_dir("load_single");
  write_text(dir / "m.csv", "0,0,5\n");
  const MarketDataset d = load_interactions(dir / "m.csv", "es");
  EXPECT_EQ(d.market_id, "es");
  EXPECT_EQ(d.num_users, 1);
  EXPECT_EQ(d.num_items, 1);
  ASSERT_EQ(d.interactions.size(), 1u);
  EXPECT_EQ(d.interactions[0].rating, 5);
  EXPECT_EQ(d.interactions[0].label, 1);
  EXPECT_FALSE(d.has_ctr_split());
  EXPECT_FALSE(d.has_cf_split());
}

TEST(LoadInteractionsTest, MalformedRowNamesLine) {
  const auto dir = temp_dir("load_bad");
  write_text(dir / "m.csv", "a,b,c\n");
  try {
    load_interactions(dir / "m.csv", "m");
    FAIL() << "expected a parse error";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("line 1"), std::string::npos) << e.what();
  }
}

TEST(LoadInteractionsTest, EmptyFile) {
  const auto dir = temp_dir("load_empty");
  write_text(dir / "m.csv", "");
  EXPECT_THROW(load_interactions(dir / "m.csv", "m"), EmptyDatasetError);
}

TEST(LoadInteractionsTest, HeaderWhitespaceAndReindexing) {
  const auto dir = temp_dir("load_header");
  write_text(dir / "m.csv",
             "user_id,item_id,rating,timestamp\n"
             "u9,i5,4,100\n"
             "u2,i5,2,101\n"
             "u9,i7,3,2020-01-02\n");
  const MarketDataset d = load_interactions(dir / "m.csv", "m");
  EXPECT_EQ(d.num_users, 2);
  EXPECT_EQ(d.num_items, 2);
  ASSERT_EQ(d.interactions.size(), 3u);
  EXPECT_EQ(d.interactions[0].user, 0);
  EXPECT_EQ(d.interactions[1].user, 1);
  EXPECT_EQ(d.interactions[2].item, 1);
  EXPECT_EQ(d.interactions[0].label, 1);
  EXPECT_EQ(d.interactions[1].label, 0);
  EXPECT_EQ(d.interactions[2].label, 0);
  EXPECT_TRUE(d.interactions[2].timestamp.has_value());

  write_text(dir / "ws.txt", "7 3 5\n7 4 1\n");
  const MarketDataset w = load_interactions(dir / "ws.txt", "w");
  EXPECT_EQ(w.num_users, 1);
  EXPECT_EQ(w.num_items, 2);
}

TEST(LoadInteractionsTest, RatingOutOfRangeIsAParseError) {
  const auto dir = temp_dir("load_range");
  write_text(dir / "m.csv", "0,0,5\n1,1,9\n");
  try {
    load_interactions(dir / "m.csv", "m");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
  }
}

MarketDataset with_counts(const std::vector<int>& per_user) {
  std::vector<InteractionRecord> recs;
  int item = 0;
  for (std::size_t u = 0; u < per_user.size(); ++u) {
    for (int k = 0; k < per_user[u]; ++k) recs.push_back(record(static_cast<int>(u), item++ % 50, 1));
  }
  return dataset("m", static_cast<int>(per_user.size()), 50, recs);
}

TEST(FilterTest, ThresholdIsStrict) {
  const MarketDataset d = filter_min_interactions(with_counts({3, 4}), 3);
  EXPECT_EQ(d.num_users, 1);
  EXPECT_EQ(d.interactions.size(), 4u);
  for (const auto& r : d.interactions) EXPECT_EQ(r.user, 0);
}

TEST(FilterTest, ZeroIsIdentityUpToReindexing) {
  const MarketDataset in = with_counts({1, 2, 3});
  const MarketDataset out = filter_min_interactions(in, 0);
  EXPECT_EQ(out.num_users, 3);
  EXPECT_EQ(out.interactions.size(), in.interactions.size());
}

TEST(FilterTest, IteratesToFixpoint) {
  // Dropping user 1 leaves items 10 and 11 without interactions.
  std::vector<InteractionRecord> recs;
  for (int i = 0; i < 4; ++i) recs.push_back(record(0, i, 1));
  for (int i = 0; i < 2; ++i) recs.push_back(record(1, 10 + i, 1));
  const MarketDataset d = filter_min_interactions(dataset("m", 2, 12, recs), 3);
  EXPECT_EQ(d.num_users, 1);
  EXPECT_EQ(d.num_items, 4);
  for (const auto& r : d.interactions) {
    EXPECT_LT(r.item, 4);
  }
  EXPECT_THROW(filter_min_interactions(dataset("m", 2, 12, recs), 10), EmptyDatasetError);
}

TEST(BinarizeTest, Threshold) {
  MarketDataset d = dataset("m", 1, 3, {record(0, 0, 0), record(0, 1, 0), record(0, 2, 0)});
  d.interactions[0].rating = 4;
  d.interactions[1].rating = 3;
  d.interactions[2].rating = 5;
  const MarketDataset b = binarize(d);
  EXPECT_EQ(b.interactions[0].label, 1);
  EXPECT_EQ(b.interactions[1].label, 0);
  EXPECT_EQ(b.interactions[2].label, 1);
  EXPECT_EQ(b.interactions[1].rating, 3);
  EXPECT_EQ(binarize(b).interactions[2].label, 1);

  d.interactions[0].rating.reset();
  EXPECT_THROW(binarize(d), Error);
}

TEST(SplitCtrTest, ExactRatioAndDeterminism) {
  std::vector<InteractionRecord> recs;
  for (int k = 0; k < 100; ++k) recs.push_back(record(k % 10, k % 7, k % 3 == 0));
  const MarketDataset d = dataset("m", 10, 7, recs);
  const MarketDataset a = split_ctr(d, {}, 5);
  EXPECT_EQ(a.count(Split::kTrain), 80u);
  EXPECT_EQ(a.count(Split::kValid), 10u);
  EXPECT_EQ(a.count(Split::kTest), 10u);
  EXPECT_EQ(split_ctr(d, {}, 5).ctr_split, a.ctr_split);
  EXPECT_NE(split_ctr(d, {}, 6).ctr_split, a.ctr_split);
  for (Split s : a.ctr_split) EXPECT_NE(s, Split::kUnassigned);
}

TEST(SplitCtrTest, StratifiedWithinOneRecord) {
  std::vector<InteractionRecord> recs;
  for (int k = 0; k < 237; ++k) recs.push_back(record(k % 13, k % 11, k % 4 == 0));
  const MarketDataset a = split_ctr(dataset("m", 13, 11, recs), {}, 1);
  for (int label : {0, 1}) {
    std::map<Split, double> n;
    double total = 0;
    for (std::size_t k = 0; k < recs.size(); ++k) {
      if (recs[k].label != label) continue;
      n[a.ctr_split[k]] += 1;
      total += 1;
    }
    EXPECT_LE(std::abs(n[Split::kTrain] - 0.8 * total), 1.0);
    EXPECT_LE(std::abs(n[Split::kValid] - 0.1 * total), 1.0);
    EXPECT_LE(std::abs(n[Split::kTest] - 0.1 * total), 1.0);
  }
}

TEST(SplitCtrTest, TooFewRecords) {
  std::vector<InteractionRecord> recs;
  for (int k = 0; k < 5; ++k) recs.push_back(record(0, k, k % 2));
  EXPECT_THROW(split_ctr(dataset("m", 1, 5, recs), {}, 1), Error);
  EXPECT_THROW(parse_ratios("8:1"), ConfigError);
  const SplitRatios r = parse_ratios("7:2:1");
  EXPECT_EQ(r.train, 7);
  EXPECT_EQ(r.valid, 2);
  EXPECT_EQ(r.test, 1);
}

TEST(LeaveOneOutTest, LatestTimestampHeldOut) {
  const MarketDataset d = dataset(
      "m", 2, 4, {record(0, 0, 1, 1), record(0, 1, 1, 3), record(0, 2, 1, 2), record(1, 0, 1),
                  record(1, 3, 1)});
  const MarketDataset s = split_cf_leave_one_out(d, 9);
  EXPECT_EQ(s.cf_holdout[0], 0);
  EXPECT_EQ(s.cf_holdout[1], 1);
  EXPECT_EQ(s.cf_holdout[2], 0);
  // No timestamps: one of the two positives, chosen by the seed.
  EXPECT_EQ(s.cf_holdout[3] + s.cf_holdout[4], 1);
}

TEST(LeaveOneOutTest, SingletonUserIsNamed) {
  const MarketDataset d = dataset("m", 2, 3, {record(0, 0, 1), record(0, 1, 1), record(1, 2, 1)});
  try {
    split_cf_leave_one_out(d, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("user 1"), std::string::npos) << e.what();
  }
  const MarketDataset kept = split_cf_leave_one_out(d, 1, SingletonPolicy::kKeepInTrain);
  EXPECT_EQ(kept.cf_holdout[2], 0);
}

TEST(SyntheticTest, DeterministicAndValid) {
  SyntheticSpec spec;
  const auto a = generate_synthetic(spec);
  const auto b = generate_synthetic(spec);
  ASSERT_EQ(a.size(), 3u);
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_EQ(a[k].num_users, 200);
    EXPECT_EQ(a[k].num_items, 100);
    ASSERT_EQ(a[k].interactions.size(), b[k].interactions.size());
    for (std::size_t r = 0; r < a[k].interactions.size(); ++r) {
      EXPECT_EQ(a[k].interactions[r].user, b[k].interactions[r].user);
      EXPECT_EQ(a[k].interactions[r].item, b[k].interactions[r].item);
      EXPECT_EQ(a[k].interactions[r].label, b[k].interactions[r].label);
    }
    a[k].validate();
    int positives = 0;
    for (const auto& r : a[k].interactions) positives += r.label;
    EXPECT_GT(positives, 0);
    EXPECT_LT(positives, static_cast<int>(a[k].interactions.size()));
  }
  spec.heterogeneity = 1.5;
  EXPECT_THROW(spec.validate(), ConfigError);
}

// Popularity rank correlation between two markets' items.
double popularity_correlation(const MarketDataset& a, const MarketDataset& b) {
  auto rate = [](const MarketDataset& d) {
    std::vector<double> pos(static_cast<std::size_t>(d.num_items)), n(pos.size());
    for (const auto& r : d.interactions) {
      n[static_cast<std::size_t>(r.item)] += 1;
      pos[static_cast<std::size_t>(r.item)] += r.label;
    }
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = n[i] > 0 ? pos[i] / n[i] : 0;
    return pos;
  };
  const auto x = rate(a), y = rate(b);
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / x.size();
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / y.size();
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

TEST(SyntheticTest, HeterogeneityControlsCrossMarketSimilarity) {
  SyntheticSpec spec;
  spec.num_markets = 2;
  spec.users_per_market = 600;
  spec.items_per_market = 60;
  spec.interactions_per_user = 30;
  double shared = 0, disjoint = 0;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    spec.seed = seed;
    spec.heterogeneity = 0.0;
    auto s = generate_synthetic(spec);
    shared += popularity_correlation(s[0], s[1]);
    spec.heterogeneity = 1.0;
    auto d = generate_synthetic(spec);
    disjoint += popularity_correlation(d[0], d[1]);
  }
  EXPECT_GT(shared / 3, disjoint / 3 + 0.2);
  EXPECT_LT(std::abs(disjoint / 3), 0.3);
}

TEST(PersistenceTest, RoundTrip) {
  auto markets = fedcq::testing::small_markets();
  const auto dir = temp_dir("datasets");
  save_datasets(dir, markets, {{"note", "test"}});
  const auto loaded = load_datasets(dir);
  ASSERT_EQ(loaded.size(), markets.size());
  for (std::size_t k = 0; k < markets.size(); ++k) {
    EXPECT_EQ(loaded[k].market_id, markets[k].market_id);
    EXPECT_EQ(loaded[k].num_users, markets[k].num_users);
    EXPECT_EQ(loaded[k].num_items, markets[k].num_items);
    EXPECT_EQ(loaded[k].ctr_split, markets[k].ctr_split);
    EXPECT_EQ(loaded[k].cf_holdout, markets[k].cf_holdout);
    ASSERT_EQ(loaded[k].interactions.size(), markets[k].interactions.size());
    for (std::size_t r = 0; r < loaded[k].interactions.size(); ++r) {
      EXPECT_EQ(loaded[k].interactions[r].user, markets[k].interactions[r].user);
      EXPECT_EQ(loaded[k].interactions[r].label, markets[k].interactions[r].label);
      EXPECT_EQ(loaded[k].interactions[r].timestamp, markets[k].interactions[r].timestamp);
    }
  }
}

}  // namespace
}  // namespace fedcq::data

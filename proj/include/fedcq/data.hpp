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

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace fedcq::data {

// Ids in a record are dense indices into the owning market's user/item
// ranges. No type in the library carries a cross-market identity.
struct InteractionRecord {
  std::int32_t user = 0;
  std::int32_t item = 0;
  std::optional<int> rating;
  int label = 0;
  std::optional<std::int64_t> timestamp;
  // Optional categorical side features, one code per MarketDataset field.
  std::vector<std::int32_t> features;
};

enum class Split : std::uint8_t { kUnassigned = 0, kTrain, kValid, kTest };

const char* to_string(Split s);

struct MarketDataset {
  std::string market_id;
  std::int32_t num_users = 0;
  std::int32_t num_items = 0;
  std::vector<InteractionRecord> interactions;
  // Per-record CTR split; empty until split_ctr.
  std::vector<Split> ctr_split;
  // Per-record flag, 1 = held out of CF training; empty until
  // split_cf_leave_one_out.
  std::vector<std::uint8_t> cf_holdout;
  std::vector<std::string> feature_fields;
  std::vector<std::int32_t> feature_cardinality;

  bool has_ctr_split() const { return !ctr_split.empty(); }
  bool has_cf_split() const { return !cf_holdout.empty(); }
  std::size_t size() const { return interactions.size(); }

  // Records of one CTR split, in dataset order.
  std::vector<InteractionRecord> records(Split s) const;
  std::size_t count(Split s) const;

  // Throws if any structural invariant is broken (ids out of range, labels
  // not binary, label/rating disagreement, split vectors misaligned).
  void validate() const;
};

struct SplitRatios {
  int train = 8;
  int valid = 1;
  int test = 1;
};

// Parses "8:1:1".
SplitRatios parse_ratios(const std::string& text);

enum class SingletonPolicy {
  kError,       // a user with fewer than two positives is an error
  kKeepInTrain  // such users keep all their positives in CF training
};

// Reads user,item,rating[,timestamp] rows (comma or whitespace separated,
// optional header). User and item tokens are re-indexed densely in order of
// first appearance; labels are set from ratings (rating >= 4).
MarketDataset load_interactions(const std::filesystem::path& path,
                                const std::string& market_id);

// Keeps users with strictly more than `k_min` interactions, drops items left
// without interactions, and re-indexes; repeated until nothing changes.
MarketDataset filter_min_interactions(const MarketDataset& d, int k_min);

// label = rating >= 4. Ratings are retained.
MarketDataset binarize(const MarketDataset& d);

// Label-stratified random split. Deterministic given the seed.
MarketDataset split_ctr(const MarketDataset& d, SplitRatios ratios,
                        std::uint64_t seed);

// Holds out one positive per user: the latest by timestamp, ties and
// timestamp-less users resolved by a seeded uniform draw.
MarketDataset split_cf_leave_one_out(
    const MarketDataset& d, std::uint64_t seed,
    SingletonPolicy policy = SingletonPolicy::kError);

struct SyntheticSpec {
  int num_markets = 3;
  int users_per_market = 200;
  int items_per_market = 100;
  int shared_dim = 8;
  int market_dim = 8;
  // 0: every market drawn from the shared factor model; 1: markets
  // independent.
  double heterogeneity = 0.5;
  int interactions_per_user = 40;
  double noise = 0.3;
  // Number of taste clusters the factors are drawn around; 0 = isotropic.
  int num_clusters = 8;
  // Logit = signal_scale * <u, v> + item bias.
  double signal_scale = 8.0;
  std::uint64_t seed = 7;

  void validate() const;
  nlohmann::json to_json() const;
  static SyntheticSpec from_json(const nlohmann::json& j);
};

// Markets are named m0, m1, ... Item index j of every market derives from the
// same underlying product j in the shared factor block; this correspondence
// exists only inside the generator (ground truth for statistical tests).
std::vector<MarketDataset> generate_synthetic(const SyntheticSpec& spec);

// Directory persistence: one <market>.csv per market plus manifest.json.
void save_datasets(const std::filesystem::path& dir,
                   const std::vector<MarketDataset>& markets,
                   const nlohmann::json& provenance);
std::vector<MarketDataset> load_datasets(const std::filesystem::path& dir);

}  // namespace fedcq::data

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
#include <array>
#include <cctype>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <unordered_map>

#include "fedcq/error.hpp"
#include "fedcq/rng.hpp"

namespace fedcq::data {
namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) {
    s.remove_prefix(1);
  }
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) {
    s.remove_suffix(1);
  }
  return s;
}

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  if (line.find(',') != std::string_view::npos) {
    std::size_t start = 0;
    while (true) {
      const std::size_t pos = line.find(',', start);
      out.push_back(trim(line.substr(start, pos - start)));
      if (pos == std::string_view::npos) break;
      start = pos + 1;
    }
    return out;
  }
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    const std::size_t start = i;
    while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i > start) out.push_back(line.substr(start, i - start));
  }
  return out;
}

std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

[[noreturn]] void parse_fail(std::size_t line_no, const std::string& what) {
  throw ParseError("line " + std::to_string(line_no) + ": " + what);
}

template <typename T>
std::optional<T> parse_number(std::string_view s) {
  T value{};
  const auto* end = s.data() + s.size();
  const auto [ptr, ec] = std::from_chars(s.data(), end, value);
  if (ec != std::errc() || ptr != end) return std::nullopt;
  return value;
}

std::optional<std::int64_t> parse_timestamp(std::string_view s) {
  if (auto v = parse_number<std::int64_t>(s)) return v;
  // YYYY-MM-DD -> days since the Unix epoch.
  if (s.size() == 10 && s[4] == '-' && s[7] == '-') {
    const auto y = parse_number<int>(s.substr(0, 4));
    const auto m = parse_number<unsigned>(s.substr(5, 2));
    const auto d = parse_number<unsigned>(s.substr(8, 2));
    if (y && m && d) {
      const std::chrono::year_month_day ymd{std::chrono::year{*y},
                                            std::chrono::month{*m},
                                            std::chrono::day{*d}};
      if (ymd.ok()) {
        return std::chrono::sys_days{ymd}.time_since_epoch().count();
      }
    }
  }
  return std::nullopt;
}

// Drops records for which keep[i] is false, keeping per-record vectors in
// step.
MarketDataset select_records(const MarketDataset& d,
                             const std::vector<bool>& keep) {
  MarketDataset out;
  out.market_id = d.market_id;
  out.num_users = d.num_users;
  out.num_items = d.num_items;
  out.feature_fields = d.feature_fields;
  out.feature_cardinality = d.feature_cardinality;
  for (std::size_t i = 0; i < d.interactions.size(); ++i) {
    if (!keep[i]) continue;
    out.interactions.push_back(d.interactions[i]);
    if (d.has_ctr_split()) out.ctr_split.push_back(d.ctr_split[i]);
    if (d.has_cf_split()) out.cf_holdout.push_back(d.cf_holdout[i]);
  }
  return out;
}

// Re-indexes users and items present in `d` densely, preserving the relative
// order of the old ids.
void reindex(MarketDataset& d) {
  std::vector<std::int32_t> user_map(static_cast<std::size_t>(d.num_users), -1);
  std::vector<std::int32_t> item_map(static_cast<std::size_t>(d.num_items), -1);
  for (const auto& r : d.interactions) {
    user_map[static_cast<std::size_t>(r.user)] = 0;
    item_map[static_cast<std::size_t>(r.item)] = 0;
  }
  std::int32_t next = 0;
  for (auto& m : user_map) {
    if (m == 0) m = next++;
  }
  d.num_users = next;
  next = 0;
  for (auto& m : item_map) {
    if (m == 0) m = next++;
  }
  d.num_items = next;
  for (auto& r : d.interactions) {
    r.user = user_map[static_cast<std::size_t>(r.user)];
    r.item = item_map[static_cast<std::size_t>(r.item)];
  }
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

using Factors = std::vector<std::vector<double>>;

std::vector<double> gaussian_vector(Rng& rng, int dim, double scale) {
  std::vector<double> v(static_cast<std::size_t>(dim));
  const double s = scale / std::sqrt(static_cast<double>(dim));
  for (auto& x : v) x = s * standard_normal(rng);
  return v;
}

// Draws `n` factor vectors of width `dim` around `prototypes` (or isotropic
// when there are none).
std::vector<std::size_t> draw_clusters(Rng& rng, int n, std::size_t count) {
  std::vector<std::size_t> out(static_cast<std::size_t>(n), 0);
  if (count == 0) return out;
  for (auto& c : out) c = uniform_index(rng, count);
  return out;
}

// One factor vector of width `dim` per entry of `clusters`, jittered around
// that cluster's prototype (or isotropic when there are no prototypes).
Factors draw_factors(Rng& rng, const std::vector<std::size_t>& clusters, int dim,
                     const Factors& prototypes, double noise) {
  Factors out;
  out.reserve(clusters.size());
  for (const std::size_t c : clusters) {
    if (prototypes.empty()) {
      out.push_back(gaussian_vector(rng, dim, 1.0));
      continue;
    }
    std::vector<double> v = prototypes[c];
    const auto jitter = gaussian_vector(rng, dim, noise);
    for (int k = 0; k < dim; ++k) v[k] += jitter[k];
    out.push_back(std::move(v));
  }
  return out;
}

Factors draw_prototypes(Rng& rng, int count, int dim) {
  Factors out;
  for (int i = 0; i < count; ++i) out.push_back(gaussian_vector(rng, dim, 1.0));
  return out;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

Split parse_split(std::string_view s, std::size_t line_no) {
  if (s == "train") return Split::kTrain;
  if (s == "valid") return Split::kValid;
  if (s == "test") return Split::kTest;
  if (s == "-" || s.empty()) return Split::kUnassigned;
  parse_fail(line_no, "unknown split '" + std::string(s) + "'");
}

}  // namespace

const char* to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kValid: return "valid";
    case Split::kTest: return "test";
    case Split::kUnassigned: break;
  }
  return "-";
}

std::vector<InteractionRecord> MarketDataset::records(Split s) const {
  if (!has_ctr_split()) throw Error("dataset " + market_id + " has no CTR split");
  std::vector<InteractionRecord> out;
  for (std::size_t i = 0; i < interactions.size(); ++i) {
    if (ctr_split[i] == s) out.push_back(interactions[i]);
  }
  return out;
}

std::size_t MarketDataset::count(Split s) const {
  return static_cast<std::size_t>(std::count(ctr_split.begin(), ctr_split.end(), s));
}

void MarketDataset::validate() const {
  if (has_ctr_split() && ctr_split.size() != interactions.size()) {
    throw ShapeError("ctr_split length does not match record count");
  }
  if (has_cf_split() && cf_holdout.size() != interactions.size()) {
    throw ShapeError("cf_holdout length does not match record count");
  }
  if (feature_cardinality.size() != feature_fields.size()) {
    throw ShapeError("feature field names and cardinalities differ in length");
  }
  for (std::size_t i = 0; i < interactions.size(); ++i) {
    const auto& r = interactions[i];
    if (r.user < 0 || r.user >= num_users || r.item < 0 || r.item >= num_items) {
      throw Error("record " + std::to_string(i) + " has an id outside the market's range");
    }
    if (r.label != 0 && r.label != 1) {
      throw Error("record " + std::to_string(i) + " has a non-binary label");
    }
    if (r.rating && (r.label == 1) != (*r.rating >= 4)) {
      throw Error("record " + std::to_string(i) + " label disagrees with rating");
    }
    if (r.features.size() != feature_fields.size()) {
      throw ShapeError("record " + std::to_string(i) + " has the wrong number of side features");
    }
    for (std::size_t f = 0; f < r.features.size(); ++f) {
      if (r.features[f] < 0 || r.features[f] >= feature_cardinality[f]) {
        throw Error("record " + std::to_string(i) + " side feature out of range");
      }
    }
  }
}

SplitRatios parse_ratios(const std::string& text) {
  SplitRatios r;
  std::array<int*, 3> slots{&r.train, &r.valid, &r.test};
  std::size_t start = 0;
  for (std::size_t k = 0; k < 3; ++k) {
    const std::size_t pos = text.find(':', start);
    if ((k < 2) == (pos == std::string::npos)) {
      throw ConfigError("ratio must look like 8:1:1, got '" + text + "'");
    }
    const auto v = parse_number<int>(std::string_view(text).substr(start, pos - start));
    if (!v || *v < 0) throw ConfigError("bad ratio component in '" + text + "'");
    *slots[k] = *v;
    start = pos + 1;
  }
  if (r.train <= 0) throw ConfigError("train ratio must be positive");
  return r;
}

MarketDataset load_interactions(const std::filesystem::path& path,
                                const std::string& market_id) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  MarketDataset d;
  d.market_id = market_id;
  std::unordered_map<std::string, std::int32_t> users, items;
  std::string line;
  std::size_t line_no = 0;
  bool first = true;
  while (std::getline(in, line)) {
    ++line_no;
    const auto body = trim(line);
    if (body.empty()) continue;
    const auto fields = split_fields(body);
    if (first) {
      first = false;
      if (fields.size() >= 2 && lower(fields[0]).find("user") != std::string::npos &&
          lower(fields[1]).find("item") != std::string::npos) {
        continue;
      }
    }
    if (fields.size() != 3 && fields.size() != 4) {
      parse_fail(line_no, "expected user,item,rating[,timestamp], got " +
                              std::to_string(fields.size()) + " fields");
    }
    if (fields[0].empty() || fields[1].empty()) parse_fail(line_no, "empty id");
    const auto rating = parse_number<double>(fields[2]);
    if (!rating || *rating != std::floor(*rating) || *rating < 1 || *rating > 5) {
      parse_fail(line_no, "rating must be an integer in 1..5, got '" +
                              std::string(fields[2]) + "'");
    }
    InteractionRecord r;
    const auto uid = users.try_emplace(std::string(fields[0]),
                                       static_cast<std::int32_t>(users.size()));
    const auto iid = items.try_emplace(std::string(fields[1]),
                                       static_cast<std::int32_t>(items.size()));
    r.user = uid.first->second;
    r.item = iid.first->second;
    r.rating = static_cast<int>(*rating);
    r.label = *r.rating >= 4 ? 1 : 0;
    if (fields.size() == 4) {
      r.timestamp = parse_timestamp(fields[3]);
      if (!r.timestamp) {
        parse_fail(line_no, "unparseable timestamp '" + std::string(fields[3]) + "'");
      }
    }
    d.interactions.push_back(std::move(r));
  }
  if (d.interactions.empty()) {
    throw EmptyDatasetError("no interactions in " + path.string());
  }
  d.num_users = static_cast<std::int32_t>(users.size());
  d.num_items = static_cast<std::int32_t>(items.size());
  return d;
}

MarketDataset filter_min_interactions(const MarketDataset& d, int k_min) {
  if (k_min < 0) throw ConfigError("min interactions must be >= 0");
  MarketDataset cur = d;
  while (true) {
    std::vector<int> counts(static_cast<std::size_t>(cur.num_users), 0);
    for (const auto& r : cur.interactions) ++counts[static_cast<std::size_t>(r.user)];
    std::vector<bool> keep(cur.interactions.size());
    bool dropped = false;
    for (std::size_t i = 0; i < cur.interactions.size(); ++i) {
      keep[i] = counts[static_cast<std::size_t>(cur.interactions[i].user)] > k_min;
      dropped |= !keep[i];
    }
    MarketDataset next = select_records(cur, keep);
    if (next.interactions.empty()) {
      throw EmptyDatasetError("every user of market " + d.market_id +
                              " has at most " + std::to_string(k_min) +
                              " interactions");
    }
    reindex(next);
    const bool shrunk = next.num_users != cur.num_users || next.num_items != cur.num_items;
    cur = std::move(next);
    if (!dropped && !shrunk) break;
  }
  return cur;
}

MarketDataset binarize(const MarketDataset& d) {
  MarketDataset out = d;
  for (std::size_t i = 0; i < out.interactions.size(); ++i) {
    auto& r = out.interactions[i];
    if (!r.rating) {
      throw Error("record " + std::to_string(i) + " of market " + d.market_id +
                  " has no rating to binarize");
    }
    r.label = *r.rating >= 4 ? 1 : 0;
  }
  return out;
}

MarketDataset split_ctr(const MarketDataset& d, SplitRatios ratios,
                        std::uint64_t seed) {
  const std::size_t n = d.interactions.size();
  const std::size_t total = static_cast<std::size_t>(ratios.train + ratios.valid + ratios.test);
  if (n < total) {
    throw Error("market " + d.market_id + " has " + std::to_string(n) +
                " records; at least " + std::to_string(total) +
                " are needed to realize the split ratio");
  }
  Rng rng(seed);
  // Shuffle each label stratum, then interleave strata by relative rank so
  // every prefix of the merged order is close to the stratum proportions.
  std::array<std::vector<std::size_t>, 2> strata;
  for (std::size_t i = 0; i < n; ++i) {
    strata[static_cast<std::size_t>(d.interactions[i].label)].push_back(i);
  }
  struct Keyed {
    double key;
    std::size_t stratum;
    std::size_t index;
  };
  std::vector<Keyed> order;
  order.reserve(n);
  for (std::size_t s = 0; s < strata.size(); ++s) {
    auto& st = strata[s];
    shuffle(st.begin(), st.end(), rng);
    for (std::size_t j = 0; j < st.size(); ++j) {
      order.push_back({(static_cast<double>(j) + 0.5) / static_cast<double>(st.size()), s, st[j]});
    }
  }
  std::stable_sort(order.begin(), order.end(), [](const Keyed& a, const Keyed& b) {
    return a.key != b.key ? a.key < b.key : a.stratum < b.stratum;
  });
  auto rounded = [&](int part) {
    return (n * static_cast<std::size_t>(part) * 2 + total) / (2 * total);
  };
  const std::size_t n_train = rounded(ratios.train);
  const std::size_t n_valid = std::min(rounded(ratios.valid), n - n_train);
  MarketDataset out = d;
  out.ctr_split.assign(n, Split::kTest);
  for (std::size_t p = 0; p < n; ++p) {
    const Split s = p < n_train ? Split::kTrain
                    : p < n_train + n_valid ? Split::kValid
                                            : Split::kTest;
    out.ctr_split[order[p].index] = s;
  }
  return out;
}

MarketDataset split_cf_leave_one_out(const MarketDataset& d, std::uint64_t seed,
                                     SingletonPolicy policy) {
  std::vector<std::vector<std::size_t>> per_user(static_cast<std::size_t>(d.num_users));
  for (std::size_t i = 0; i < d.interactions.size(); ++i) {
    const auto& r = d.interactions[i];
    if (r.label != 1) continue;
    if (d.has_ctr_split() && d.ctr_split[i] != Split::kTrain) continue;
    per_user[static_cast<std::size_t>(r.user)].push_back(i);
  }
  Rng rng(seed);
  MarketDataset out = d;
  out.cf_holdout.assign(d.interactions.size(), 0);
  for (std::size_t u = 0; u < per_user.size(); ++u) {
    const auto& recs = per_user[u];
    if (recs.size() < 2) {
      if (policy == SingletonPolicy::kError) {
        throw Error("user " + std::to_string(u) + " of market " + d.market_id +
                    " has " + std::to_string(recs.size()) +
                    " positive interaction(s); leave-one-out needs at least 2");
      }
      continue;
    }
    std::vector<std::size_t> candidates;
    const bool all_timed = std::all_of(recs.begin(), recs.end(), [&](std::size_t i) {
      return d.interactions[i].timestamp.has_value();
    });
    if (all_timed) {
      std::int64_t latest = INT64_MIN;
      for (auto i : recs) latest = std::max(latest, *d.interactions[i].timestamp);
      for (auto i : recs) {
        if (*d.interactions[i].timestamp == latest) candidates.push_back(i);
      }
    } else {
      candidates = recs;
    }
    const std::size_t pick =
        candidates.size() == 1 ? candidates[0] : candidates[uniform_index(rng, candidates.size())];
    out.cf_holdout[pick] = 1;
  }
  return out;
}

void SyntheticSpec::validate() const {
  if (num_markets <= 0 || users_per_market <= 0 || items_per_market <= 0 ||
      shared_dim <= 0 || market_dim <= 0 || interactions_per_user <= 0) {
    throw ConfigError("synthetic spec counts must be positive");
  }
  if (!(heterogeneity >= 0.0 && heterogeneity <= 1.0)) {
    throw ConfigError("heterogeneity weight must lie in [0, 1]");
  }
  if (num_clusters < 0 || noise < 0 || signal_scale < 0) {
    throw ConfigError("synthetic spec noise, clusters and signal must be non-negative");
  }
}

nlohmann::json SyntheticSpec::to_json() const {
  return {{"num_markets", num_markets},
          {"users_per_market", users_per_market},
          {"items_per_market", items_per_market},
          {"shared_dim", shared_dim},
          {"market_dim", market_dim},
          {"heterogeneity", heterogeneity},
          {"interactions_per_user", interactions_per_user},
          {"noise", noise},
          {"num_clusters", num_clusters},
          {"signal_scale", signal_scale},
          {"seed", seed}};
}

SyntheticSpec SyntheticSpec::from_json(const nlohmann::json& j) {
  SyntheticSpec s;
  s.num_markets = j.at("num_markets");
  s.users_per_market = j.at("users_per_market");
  s.items_per_market = j.at("items_per_market");
  s.shared_dim = j.at("shared_dim");
  s.market_dim = j.at("market_dim");
  s.heterogeneity = j.at("heterogeneity");
  s.interactions_per_user = j.at("interactions_per_user");
  s.noise = j.at("noise");
  s.num_clusters = j.at("num_clusters");
  s.signal_scale = j.at("signal_scale");
  s.seed = j.at("seed");
  return s;
}

std::vector<MarketDataset> generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const double h = spec.heterogeneity;
  const double ws = 1.0 - h;
  const double wm = h;
  // Keeps the logit variance independent of the mixing weight.
  const double dot_norm = ws * ws + wm * wm;
  const double bias_norm = std::sqrt(dot_norm);

  Rng global = make_rng(spec.seed, "synthetic/global");
  const Factors user_proto_shared = draw_prototypes(global, spec.num_clusters, spec.shared_dim);
  const Factors item_proto_shared = draw_prototypes(global, spec.num_clusters, spec.shared_dim);
  // An entity's shared and market-specific factors sit around the same taste
  // cluster, so markets agree on which users and items are alike.
  const auto clusters = static_cast<std::size_t>(spec.num_clusters);
  const auto item_cluster = draw_clusters(global, spec.items_per_market, clusters);
  const Factors item_shared =
      draw_factors(global, item_cluster, spec.shared_dim, item_proto_shared, spec.noise);
  std::vector<double> item_bias_shared(static_cast<std::size_t>(spec.items_per_market));
  for (auto& b : item_bias_shared) b = standard_normal(global);

  std::vector<MarketDataset> markets;
  for (int k = 0; k < spec.num_markets; ++k) {
    Rng rng = make_rng(spec.seed, "synthetic/market", static_cast<std::uint64_t>(k));
    const Factors user_proto_market = draw_prototypes(rng, spec.num_clusters, spec.market_dim);
    const Factors item_proto_market = draw_prototypes(rng, spec.num_clusters, spec.market_dim);
    const Factors item_market =
        draw_factors(rng, item_cluster, spec.market_dim, item_proto_market, spec.noise);
    const auto user_cluster = draw_clusters(rng, spec.users_per_market, clusters);
    const Factors user_shared =
        draw_factors(rng, user_cluster, spec.shared_dim, user_proto_shared, spec.noise);
    const Factors user_market =
        draw_factors(rng, user_cluster, spec.market_dim, user_proto_market, spec.noise);
    std::vector<double> item_bias(static_cast<std::size_t>(spec.items_per_market));
    for (std::size_t j = 0; j < item_bias.size(); ++j) {
      item_bias[j] = (ws * item_bias_shared[j] + wm * standard_normal(rng)) / bias_norm;
    }

    MarketDataset d;
    d.market_id = "m" + std::to_string(k);
    d.num_users = spec.users_per_market;
    d.num_items = spec.items_per_market;
    const int per_user = std::min(spec.interactions_per_user, spec.items_per_market);
    std::vector<std::int32_t> catalog(static_cast<std::size_t>(spec.items_per_market));
    for (std::size_t j = 0; j < catalog.size(); ++j) catalog[j] = static_cast<std::int32_t>(j);
    for (int u = 0; u < spec.users_per_market; ++u) {
      // Partial Fisher-Yates: the first per_user entries are a uniform sample
      // in random order.
      for (int t = 0; t < per_user; ++t) {
        const auto pick = t + static_cast<int>(uniform_index(rng, catalog.size() - t));
        std::swap(catalog[t], catalog[pick]);
      }
      for (int t = 0; t < per_user; ++t) {
        const auto j = static_cast<std::size_t>(catalog[t]);
        const auto ui = static_cast<std::size_t>(u);
        const double affinity = ws * ws * dot(user_shared[ui], item_shared[j]) +
                                wm * wm * dot(user_market[ui], item_market[j]);
        const double logit = spec.signal_scale * affinity / dot_norm + item_bias[j];
        InteractionRecord r;
        r.user = u;
        r.item = catalog[t];
        r.label = uniform01(rng) < sigmoid(logit) ? 1 : 0;
        r.timestamp = t;
        d.interactions.push_back(std::move(r));
      }
    }
    markets.push_back(std::move(d));
  }
  return markets;
}

void save_datasets(const std::filesystem::path& dir,
                   const std::vector<MarketDataset>& markets,
                   const nlohmann::json& provenance) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "fedcq-datasets";
  manifest["version"] = 1;
  manifest["provenance"] = provenance;
  manifest["markets"] = nlohmann::json::array();
  for (const auto& d : markets) {
    d.validate();
    const std::string file = d.market_id + ".csv";
    std::ofstream out(dir / file);
    if (!out) throw Error("cannot write " + (dir / file).string());
    out << "user,item,rating,label,timestamp,ctr_split,cf_holdout";
    for (const auto& f : d.feature_fields) out << ",f:" << f;
    out << '\n';
    for (std::size_t i = 0; i < d.interactions.size(); ++i) {
      const auto& r = d.interactions[i];
      out << r.user << ',' << r.item << ',';
      if (r.rating) out << *r.rating;
      out << ',' << r.label << ',';
      if (r.timestamp) out << *r.timestamp;
      out << ',' << (d.has_ctr_split() ? to_string(d.ctr_split[i]) : "-") << ','
          << (d.has_cf_split() ? std::to_string(d.cf_holdout[i]) : "-");
      for (auto f : r.features) out << ',' << f;
      out << '\n';
    }
    manifest["markets"].push_back({{"market_id", d.market_id},
                                   {"file", file},
                                   {"num_users", d.num_users},
                                   {"num_items", d.num_items},
                                   {"num_records", d.interactions.size()},
                                   {"num_train", d.has_ctr_split() ? d.count(Split::kTrain) : 0},
                                   {"num_valid", d.has_ctr_split() ? d.count(Split::kValid) : 0},
                                   {"num_test", d.has_ctr_split() ? d.count(Split::kTest) : 0},
                                   {"feature_fields", d.feature_fields},
                                   {"feature_cardinality", d.feature_cardinality}});
  }
  std::ofstream m(dir / "manifest.json");
  m << manifest.dump(2) << '\n';
}

std::vector<MarketDataset> load_datasets(const std::filesystem::path& dir) {
  std::ifstream m(dir / "manifest.json");
  if (!m) throw Error("no dataset manifest in " + dir.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(m);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("dataset manifest: ") + e.what());
  }
  if (manifest.value("format", "") != "fedcq-datasets" || manifest.value("version", 0) != 1) {
    throw ParseError("unsupported dataset manifest in " + dir.string());
  }
  std::vector<MarketDataset> markets;
  for (const auto& entry : manifest.at("markets")) {
    MarketDataset d;
    d.market_id = entry.at("market_id");
    d.num_users = entry.at("num_users");
    d.num_items = entry.at("num_items");
    d.feature_fields = entry.at("feature_fields").get<std::vector<std::string>>();
    d.feature_cardinality = entry.at("feature_cardinality").get<std::vector<std::int32_t>>();
    const auto path = dir / entry.at("file").get<std::string>();
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path.string());
    std::string line;
    std::getline(in, line);  // header
    std::size_t line_no = 1;
    bool any_split = false, any_cf = false;
    while (std::getline(in, line)) {
      ++line_no;
      if (trim(line).empty()) continue;
      std::vector<std::string_view> f;
      std::size_t start = 0;
      while (true) {
        const auto pos = line.find(',', start);
        f.push_back(std::string_view(line).substr(start, pos - start));
        if (pos == std::string::npos) break;
        start = pos + 1;
      }
      if (f.size() != 7 + d.feature_fields.size()) parse_fail(line_no, "wrong column count");
      InteractionRecord r;
      const auto u = parse_number<std::int32_t>(f[0]);
      const auto i = parse_number<std::int32_t>(f[1]);
      const auto y = parse_number<int>(f[3]);
      if (!u || !i || !y) parse_fail(line_no, "bad id or label");
      r.user = *u;
      r.item = *i;
      r.label = *y;
      if (!f[2].empty()) r.rating = parse_number<int>(f[2]);
      if (!f[4].empty()) r.timestamp = parse_number<std::int64_t>(f[4]);
      const Split s = parse_split(f[5], line_no);
      d.ctr_split.push_back(s);
      any_split |= s != Split::kUnassigned;
      if (f[6] != "-") {
        const auto h = parse_number<int>(f[6]);
        if (!h) parse_fail(line_no, "bad cf_holdout flag");
        d.cf_holdout.push_back(static_cast<std::uint8_t>(*h));
        any_cf = true;
      }
      for (std::size_t k = 7; k < f.size(); ++k) {
        const auto v = parse_number<std::int32_t>(f[k]);
        if (!v) parse_fail(line_no, "bad side feature");
        r.features.push_back(*v);
      }
      d.interactions.push_back(std::move(r));
    }
    if (!any_split) d.ctr_split.clear();
    if (!any_cf) d.cf_holdout.clear();
    d.validate();
    markets.push_back(std::move(d));
  }
  return markets;
}

}  // namespace fedcq::data

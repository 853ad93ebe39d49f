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

#include "fedcq/pipeline.hpp"

#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

#include "fedcq/error.hpp"
#include "fedcq/nn/checkpoint.hpp"
#include "fedcq/rng.hpp"

namespace fedcq::pipeline {
namespace fs = std::filesystem;
namespace {

// ---- value parsing ----------------------------------------------------------

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError("bad value for " + key + ": '" + v + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("bad boolean for " + key + ": '" + v + "'");
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) {
    cur = trim(cur);
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

std::string fmt(double v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

template <typename T>
std::string fmt_int(T v) {
  return std::to_string(v);
}

std::string fmt_bool(bool b) { return b ? "true" : "false"; }

std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  for (const auto& part : split(v, ',')) out.push_back(parse_number<int>(key, part));
  return out;
}

std::string fmt_int_list(const std::vector<int>& v) {
  std::string s;
  for (std::size_t k = 0; k < v.size(); ++k) s += (k ? "," : "") + std::to_string(v[k]);
  return s;
}

// ---- key table --------------------------------------------------------------

struct Binding {
  const char* key;
  std::function<void(ExperimentConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

#define FEDCQ_NUM(KEY, TYPE, FIELD)                                                          \
  Binding {                                                                                 \
    KEY,                                                                                    \
        [](ExperimentConfig& c, const std::string& k, const std::string& v) {               \
          c.FIELD = parse_number<TYPE>(k, v);                                               \
        },                                                                                  \
        [](const ExperimentConfig& c) {                                                     \
          if constexpr (std::is_floating_point_v<TYPE>) return fmt(c.FIELD);                \
          else return fmt_int(c.FIELD);                                                     \
        }                                                                                   \
  }
#define FEDCQ_BOOL(KEY, FIELD)                                                                \
  Binding {                                                                                   \
    KEY, [](ExperimentConfig& c, const std::string& k, const std::string& v) {                \
      c.FIELD = parse_bool(k, v);                                                             \
    },                                                                                        \
        [](const ExperimentConfig& c) { return fmt_bool(c.FIELD); }                           \
  }
#define FEDCQ_OPT_SEED(KEY, FIELD)                                                            \
  Binding {                                                                                   \
    KEY,                                                                                      \
        [](ExperimentConfig& c, const std::string& k, const std::string& v) {                 \
          if (v == "auto") c.FIELD.reset();                                                   \
          else c.FIELD = parse_number<std::uint64_t>(k, v);                                   \
        },                                                                                    \
        [](const ExperimentConfig& c) {                                                       \
          return c.FIELD ? std::to_string(*c.FIELD) : std::string("auto");                    \
        }                                                                                     \
  }

const std::vector<Binding>& bindings() {
  static const std::vector<Binding> table = {
      FEDCQ_NUM("seed", std::uint64_t, seed),
      Binding{"mode",
              [](ExperimentConfig& c, const std::string&, const std::string& v) {
                c.mode = ctr::parse_mode(v);
              },
              [](const ExperimentConfig& c) { return std::string(ctr::to_string(c.mode)); }},
      FEDCQ_BOOL("overall.weighted", weighted_overall),

      Binding{"data.source",
              [](ExperimentConfig& c, const std::string& k, const std::string& v) {
                if (v != "synthetic" && v != "files") {
                  throw ConfigError(k + " must be 'synthetic' or 'files', got '" + v + "'");
                }
                c.data_source = v;
              },
              [](const ExperimentConfig& c) { return c.data_source; }},
      Binding{"data.markets",
              [](ExperimentConfig& c, const std::string& k, const std::string& v) {
                c.market_files.clear();
                for (const auto& part : split(v, ',')) {
                  const auto eq = part.find('=');
                  if (eq == std::string::npos || eq == 0 || eq + 1 == part.size()) {
                    throw ConfigError(k + " entries must look like market=path, got '" + part +
                                      "'");
                  }
                  c.market_files.emplace_back(trim(part.substr(0, eq)), trim(part.substr(eq + 1)));
                }
              },
              [](const ExperimentConfig& c) {
                std::string s;
                for (std::size_t k = 0; k < c.market_files.size(); ++k) {
                  s += (k ? "," : "") + c.market_files[k].first + "=" + c.market_files[k].second;
                }
                return s;
              }},
      FEDCQ_NUM("data.min_interactions", int, min_interactions),
      Binding{"data.split_ratios",
              [](ExperimentConfig& c, const std::string&, const std::string& v) {
                c.ratios = data::parse_ratios(v);
              },
              [](const ExperimentConfig& c) {
                return std::to_string(c.ratios.train) + ":" + std::to_string(c.ratios.valid) + ":" +
                       std::to_string(c.ratios.test);
              }},
      FEDCQ_OPT_SEED("data.split_seed", split_seed),

      FEDCQ_NUM("synthetic.num_markets", int, synthetic.num_markets),
      FEDCQ_NUM("synthetic.users", int, synthetic.users_per_market),
      FEDCQ_NUM("synthetic.items", int, synthetic.items_per_market),
      FEDCQ_NUM("synthetic.shared_dim", int, synthetic.shared_dim),
      FEDCQ_NUM("synthetic.market_dim", int, synthetic.market_dim),
      FEDCQ_NUM("synthetic.heterogeneity", double, synthetic.heterogeneity),
      FEDCQ_NUM("synthetic.interactions_per_user", int, synthetic.interactions_per_user),
      FEDCQ_NUM("synthetic.noise", double, synthetic.noise),
      FEDCQ_NUM("synthetic.num_clusters", int, synthetic.num_clusters),
      FEDCQ_NUM("synthetic.signal_scale", double, synthetic.signal_scale),
      FEDCQ_OPT_SEED("synthetic.seed", synthetic_seed),

      FEDCQ_NUM("cf.dim", int, cf.dim),
      FEDCQ_NUM("cf.layers", int, cf.layers),
      FEDCQ_NUM("cf.lr", double, cf.lr),
      FEDCQ_NUM("cf.l2", double, cf.l2),
      FEDCQ_NUM("cf.epochs", int, cf.epochs),
      FEDCQ_NUM("cf.batch_size", int, cf.batch_size),
      FEDCQ_NUM("cf.negatives", int, cf.negatives_per_positive),
      FEDCQ_NUM("cf.init_std", double, cf.init_std),
      FEDCQ_BOOL("cf.keep_best", cf.keep_best_holdout),

      FEDCQ_NUM("quant.codebook_size", int, stream.codebook_size),
      FEDCQ_NUM("quant.tau", double, stream.tau),
      FEDCQ_NUM("quant.fed_init_std", double, stream.fed_init_std),
      FEDCQ_NUM("quant.local_jitter", double, stream.local_jitter),
      FEDCQ_NUM("quant.input_rms", double, input_rms),
      FEDCQ_NUM("quant.lambda", double, quant_train.lambda),
      FEDCQ_NUM("quant.lr", double, quant_train.lr),
      FEDCQ_NUM("quant.l2", double, quant_train.l2),
      FEDCQ_NUM("quant.batch_size", int, quant_train.batch_size),

      FEDCQ_NUM("fed.rounds", int, federation.rounds),
      FEDCQ_NUM("fed.local_epochs", int, federation.local_epochs),
      FEDCQ_NUM("fed.adapt_epochs", int, federation.adapt_epochs),
      FEDCQ_NUM("fed.ldp_scale", double, federation.ldp.scale),
      FEDCQ_BOOL("fed.ldp_enabled", federation.ldp.enabled),
      Binding{"fed.weighting",
              [](ExperimentConfig& c, const std::string&, const std::string& v) {
                c.federation.weighting = fed::parse_weighting(v);
              },
              [](const ExperimentConfig& c) {
                return std::string(fed::to_string(c.federation.weighting));
              }},

      FEDCQ_NUM("ctr.embed_dim", int, ctr.embed_dim),
      Binding{"ctr.hidden",
              [](ExperimentConfig& c, const std::string& k, const std::string& v) {
                c.ctr.hidden = parse_int_list(k, v);
              },
              [](const ExperimentConfig& c) { return fmt_int_list(c.ctr.hidden); }},
      FEDCQ_NUM("ctr.lr", double, ctr.lr),
      FEDCQ_NUM("ctr.l2", double, ctr.l2),
      FEDCQ_NUM("ctr.epochs", int, ctr.epochs),
      FEDCQ_NUM("ctr.batch_size", int, ctr.batch_size),
      FEDCQ_NUM("ctr.patience", int, ctr.patience),
      FEDCQ_NUM("ctr.init_std", double, ctr.init_std),
  };
  return table;
}

#undef FEDCQ_NUM
#undef FEDCQ_BOOL
#undef FEDCQ_OPT_SEED

const Binding& binding(const std::string& key) {
  for (const auto& b : bindings()) {
    if (key == b.key) return b;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

std::string canonical_axis(const std::string& axis) {
  if (axis == "T") return "quant.codebook_size";
  if (axis == "b") return "fed.ldp_scale";
  return axis;
}

bool affects_pretrain(const std::string& key) {
  return key == "seed" || key.rfind("data.", 0) == 0 || key.rfind("synthetic.", 0) == 0 ||
         key.rfind("cf.", 0) == 0;
}

// ---- files --------------------------------------------------------------------

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  nn::write_file(path, text);
}

std::string jsonl(const std::vector<nlohmann::json>& lines) {
  std::string out;
  for (const auto& l : lines) out += l.dump() + "\n";
  return out;
}

nlohmann::json artifact(const fs::path& root, const fs::path& path) {
  return {{"path", fs::relative(path, root).generic_string()}, {"digest", file_digest(path)}};
}

fs::path artifact_path(const RunManifest& m, const nlohmann::json& a) {
  return m.root() / a.at("path").get<std::string>();
}

ExperimentConfig with_auto_dims(ExperimentConfig c) {
  c.stream.input_dim = c.cf.dim;
  c.stream.latent_dim = c.cf.dim;
  return c;
}

}  // namespace

// ---- ExperimentConfig -----------------------------------------------------------

void ExperimentConfig::set(const std::string& key, const std::string& value) {
  binding(key).set(*this, key, trim(value));
}

std::string ExperimentConfig::get(const std::string& key) const { return binding(key).get(*this); }

std::vector<std::string> ExperimentConfig::keys() {
  std::vector<std::string> k;
  for (const auto& b : bindings()) k.emplace_back(b.key);
  return k;
}

void ExperimentConfig::validate() const {
  if (data_source == "files" && market_files.empty()) {
    throw ConfigError("data.source=files needs data.markets");
  }
  if (data_source == "synthetic") synthetic.validate();
  if (min_interactions < 0) throw ConfigError("data.min_interactions must be >= 0");
  if (ratios.train < 1 || ratios.valid < 1 || ratios.test < 1) {
    throw ConfigError("every split ratio must be positive");
  }
  if (cf.dim < 1 || cf.layers < 0 || cf.epochs < 0 || cf.batch_size < 1 ||
      cf.negatives_per_positive < 1 || !(cf.lr > 0)) {
    throw ConfigError("invalid cf.* settings");
  }
  with_auto_dims(*this).stream.validate();
  quant_train.validate();
  if (!(input_rms > 0)) throw ConfigError("quant.input_rms must be positive");
  federation.validate();
  ctr.validate();
}

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& b : bindings()) j[b.key] = b.get(*this);
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  for (const auto& [k, v] : j.items()) c.set(k, v.get<std::string>());
  return c;
}

void apply_config_text(ExperimentConfig& config, const std::string& text,
                       const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
    }
    try {
      config.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

void apply_config_file(ExperimentConfig& config, const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  apply_config_text(config, ss.str(), path.string());
}

void apply_override(ExperimentConfig& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) {
    throw ConfigError("override '" + assignment + "' is not key=value");
  }
  config.set(trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

// ---- in-memory stages -----------------------------------------------------------

std::vector<data::MarketDataset> prepare_markets(const ExperimentConfig& config) {
  config.validate();
  std::vector<data::MarketDataset> raw;
  if (config.data_source == "synthetic") {
    data::SyntheticSpec spec = config.synthetic;
    spec.seed = config.synthetic_seed.value_or(derive_seed(config.seed, "synthetic"));
    raw = data::generate_synthetic(spec);
  } else {
    for (const auto& [market, path] : config.market_files) {
      raw.push_back(data::load_interactions(path, market));
    }
  }
  std::vector<data::MarketDataset> out;
  const std::uint64_t split_root = config.split_seed.value_or(derive_seed(config.seed, "split"));
  for (std::size_t k = 0; k < raw.size(); ++k) {
    data::MarketDataset d = data::filter_min_interactions(raw[k], config.min_interactions);
    d = data::split_ctr(d, config.ratios, derive_seed(split_root, "ctr", k));
    d = data::split_cf_leave_one_out(d, derive_seed(split_root, "cf", k),
                                     data::SingletonPolicy::kKeepInTrain);
    out.push_back(std::move(d));
  }
  return out;
}

PretrainResult run_pretrain(const ExperimentConfig& config) {
  PretrainResult r;
  r.markets = prepare_markets(config);
  for (std::size_t k = 0; k < r.markets.size(); ++k) {
    cf::CfConfig c = config.cf;
    c.seed = derive_seed(config.seed, "cf", k);
    c.require_all_users = false;
    cf::CfResult res = cf::train_cf(r.markets[k], c);
    r.embeddings.push_back(std::move(res.propagated));
    r.cf_train_loss.push_back(std::move(res.train_loss));
    r.cf_holdout_loss.push_back(std::move(res.holdout_loss));
    r.cf_best_epoch.push_back(res.best_epoch);
  }
  return r;
}

std::vector<fed::ClientData> client_inputs(const ExperimentConfig& config,
                                           const PretrainResult& pretrain) {
  std::vector<fed::ClientData> out;
  for (std::size_t k = 0; k < pretrain.markets.size(); ++k) {
    const auto& d = pretrain.markets[k];
    fed::ClientData c;
    c.market_id = d.market_id;
    c.embeddings = pretrain.embeddings[k];
    const double sq = c.embeddings.users.squaredNorm() + c.embeddings.items.squaredNorm();
    const double n = static_cast<double>(c.embeddings.users.size() + c.embeddings.items.size());
    if (sq > 0) {
      const double s = config.input_rms / std::sqrt(sq / n);
      c.embeddings.users *= s;
      c.embeddings.items *= s;
    }
    c.positives = cf::BipartiteGraph::from_dataset(d).edges();
    c.num_interactions = d.count(data::Split::kTrain);
    out.push_back(std::move(c));
  }
  return out;
}

FederateResult run_federate(const ExperimentConfig& config, const PretrainResult& pretrain,
                            const std::function<void(const fed::RoundReport&, const fed::Server&)>& on_round) {
  FederateResult r;
  if (!ctr::uses_tokens(config.mode)) return r;
  const ExperimentConfig c = with_auto_dims(config);
  quant::StreamConfig stream = c.stream;
  stream.two_level = ctr::uses_local_tokens(c.mode);
  fed::FederationConfig fc = c.federation;
  fc.aggregate = c.mode != ctr::AblationMode::kNoGlobal;
  if (c.mode == ctr::AblationMode::kRandomCodebook) {
    fc.rounds = 0;
    fc.init_local_from_data = false;
  }
  auto inputs = client_inputs(c, pretrain);
  r.server = std::make_unique<fed::Server>(stream.codebook_size, stream.latent_dim,
                                           static_cast<int>(inputs.size()), stream.fed_init_std,
                                           derive_seed(c.seed, "server"));
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    r.clients.push_back(std::make_unique<fed::Client>(std::move(inputs[k]), stream, c.quant_train,
                                                      derive_seed(c.seed, "client", k)));
  }
  r.rounds = fed::run_federation(*r.server, r.clients, fc, on_round);
  return r;
}

std::vector<quant::TokenTable> run_tokenize(const FederateResult& federated) {
  std::vector<quant::TokenTable> out;
  for (const auto& c : federated.clients) out.push_back(c->tokenize());
  return out;
}

CtrRunResult run_train_ctr(const ExperimentConfig& config,
                           const std::vector<data::MarketDataset>& markets,
                           const std::vector<quant::TokenTable>& tokens) {
  const bool need_tokens = ctr::uses_tokens(config.mode);
  if (need_tokens && tokens.size() != markets.size()) {
    throw DependencyError(std::string("mode ") + ctr::to_string(config.mode) +
                          " needs one token table per market");
  }
  CtrRunResult r;
  std::vector<double> aucs;
  std::vector<std::size_t> sizes;
  for (std::size_t k = 0; k < markets.size(); ++k) {
    ctr::CtrConfig c = config.ctr;
    c.seed = derive_seed(config.seed, "ctr", k);
    const quant::TokenTable* t = need_tokens ? &tokens[k] : nullptr;
    if (t && t->market_id != markets[k].market_id) {
      throw Error("token table for " + t->market_id + " paired with market " +
                  markets[k].market_id);
    }
    ctr::CtrResult res = ctr::train_ctr(markets[k], t, config.mode, c);
    for (const auto& m : res.history) {
      r.metrics.push_back(ctr::metrics_line(markets[k].market_id, config.mode, m));
    }
    aucs.push_back(res.test_auc);
    sizes.push_back(res.test_size);
    r.markets.push_back(markets[k].market_id);
    r.results.push_back(std::move(res));
  }
  r.overall_auc = ctr::evaluate_overall(aucs, sizes, config.weighted_overall);
  return r;
}

CtrRunResult run_experiment(const ExperimentConfig& config, const PretrainResult* pretrained) {
  config.validate();
  PretrainResult local;
  if (!pretrained) {
    local = run_pretrain(config);
    pretrained = &local;
  }
  const FederateResult federated = run_federate(config, *pretrained);
  return run_train_ctr(config, pretrained->markets, run_tokenize(federated));
}

// ---- manifest -----------------------------------------------------------------

namespace {
const std::vector<std::string>& stage_order() {
  static const std::vector<std::string> s = {"pretrain", "federate", "tokenize", "train_ctr"};
  return s;
}
}  // namespace

RunManifest RunManifest::load_or_create(const fs::path& root) {
  RunManifest m;
  m.root_ = root;
  const fs::path path = root / "manifest.json";
  if (fs::exists(path)) {
    try {
      m.json_ = nlohmann::json::parse(nn::read_file(path));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string() + ": " + e.what());
    }
  } else {
    m.json_ = {{"format", "fedcq-run"}, {"code_version", kVersion}, {"stages", nlohmann::json::object()}};
  }
  if (fs::exists(root / "timings.json")) {
    m.timings_ = nlohmann::json::parse(nn::read_file(root / "timings.json"));
  } else {
    m.timings_ = nlohmann::json::object();
  }
  return m;
}

bool RunManifest::has_stage(const std::string& stage) const {
  return json_.contains("stages") && json_["stages"].contains(stage);
}

const nlohmann::json& RunManifest::stage(const std::string& stage) const {
  return json_.at("stages").at(stage);
}

void RunManifest::set_stage(const std::string& stage, nlohmann::json value) {
  json_["stages"][stage] = std::move(value);
}

void RunManifest::invalidate_from(const std::string& stage) {
  bool drop = false;
  for (const auto& s : stage_order()) {
    drop = drop || s == stage;
    if (drop) {
      json_["stages"].erase(s);
      timings_.erase(s);
    }
  }
}

std::optional<ExperimentConfig> RunManifest::config() const {
  if (!json_.contains("config")) return std::nullopt;
  return ExperimentConfig::from_json(json_["config"]);
}

void RunManifest::set_config(const ExperimentConfig& config) {
  json_["config"] = config.to_json();
  json_["code_version"] = kVersion;
}

void RunManifest::record_time(const std::string& stage, double seconds) {
  timings_[stage] = {{"wall_seconds", seconds}};
}

void RunManifest::save() const {
  write_text(root_ / "manifest.json", json_.dump(2) + "\n");
  write_text(root_ / "timings.json", timings_.dump(2) + "\n");
}

std::string file_digest(const fs::path& path) {
  const std::string bytes = nn::read_file(path);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---- disk-backed commands ---------------------------------------------------------

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

void require(const RunManifest& m, const std::string& stage, const std::string& command) {
  if (!m.has_stage(stage)) {
    throw DependencyError("missing " + stage + " artifacts in " + m.root().string() +
                          "; run `fedcq " + command + "` first");
  }
}

PretrainResult load_pretrain(const RunManifest& m) {
  const auto& st = m.stage("pretrain");
  PretrainResult r;
  r.markets = data::load_datasets(m.root() / st.at("datasets").get<std::string>());
  for (const auto& d : r.markets) {
    const auto& a = st.at("embeddings").at(d.market_id);
    r.embeddings.push_back(cf::import_embeddings(artifact_path(m, a)));
  }
  return r;
}

void check_mode(const ExperimentConfig& config, const RunManifest& m, const std::string& stage) {
  const std::string recorded = m.stage(stage).at("mode").get<std::string>();
  if (recorded != ctr::to_string(config.mode)) {
    throw ConfigError(stage + " ran in mode " + recorded + ", but mode " +
                      ctr::to_string(config.mode) + " was requested; re-run `fedcq federate`");
  }
}

}  // namespace

void cmd_pretrain(const ExperimentConfig& config, const fs::path& root) {
  const auto t0 = Clock::now();
  config.validate();
  RunManifest m = RunManifest::load_or_create(root);
  m.invalidate_from("pretrain");
  m.set_config(config);
  const PretrainResult r = run_pretrain(config);
  const fs::path dir = root / "pretrain";
  data::save_datasets(dir / "datasets", r.markets, {{"config", config.to_json()}});
  nlohmann::json stage = {{"datasets", "pretrain/datasets"},
                          {"dataset_manifest", artifact(root, dir / "datasets" / "manifest.json")}};
  std::vector<nlohmann::json> log;
  for (std::size_t k = 0; k < r.markets.size(); ++k) {
    const std::string& id = r.markets[k].market_id;
    const fs::path emb = dir / "embeddings" / (id + ".emb");
    fs::create_directories(emb.parent_path());
    cf::export_embeddings(emb, r.embeddings[k]);
    stage["embeddings"][id] = artifact(root, emb);
    stage["market_files"][id] = artifact(root, dir / "datasets" / (id + ".csv"));
    for (std::size_t e = 0; e < r.cf_holdout_loss[k].size(); ++e) {
      nlohmann::json line = {{"market", id}, {"epoch", e}, {"holdout_bpr", r.cf_holdout_loss[k][e]}};
      if (e > 0) line["train_bpr"] = r.cf_train_loss[k][e - 1];
      log.push_back(line);
    }
    stage["cf_best_epoch"][id] = r.cf_best_epoch[k];
  }
  write_text(dir / "cf_loss.jsonl", jsonl(log));
  stage["cf_log"] = artifact(root, dir / "cf_loss.jsonl");
  m.set_stage("pretrain", stage);
  m.record_time("pretrain", seconds_since(t0));
  m.save();
}

void cmd_federate(const ExperimentConfig& config, const fs::path& root) {
  const auto t0 = Clock::now();
  config.validate();
  RunManifest m = RunManifest::load_or_create(root);
  require(m, "pretrain", "pretrain");
  m.invalidate_from("federate");
  m.set_config(config);
  const PretrainResult pre = load_pretrain(m);
  const fs::path dir = root / "federate";
  fs::create_directories(dir);
  std::vector<nlohmann::json> rounds;
  nlohmann::json snapshots = nlohmann::json::array();
  const FederateResult r = run_federate(
      config, pre, [&](const fed::RoundReport& rr, const fed::Server& server) {
        rounds.push_back(rr.to_json());
        if (config.mode == ctr::AblationMode::kNoGlobal) return;  // server never changes
        nn::Checkpoint snap;
        snap.meta["round"] = std::to_string(rr.round);
        snap.add("user_codebook", server.user_codebook());
        snap.add("item_codebook", server.item_codebook());
        char name[32];
        std::snprintf(name, sizeof name, "round_%04d.ckpt", rr.round);
        const fs::path path = dir / "rounds" / name;
        fs::create_directories(path.parent_path());
        nn::save_checkpoint(path, snap);
        snapshots.push_back(artifact(root, path));
      });
  nlohmann::json stage = {{"mode", ctr::to_string(config.mode)}};
  if (!r.server) {
    stage["skipped"] = true;
  } else {
    write_text(dir / "rounds.jsonl", jsonl(rounds));
    stage["rounds"] = artifact(root, dir / "rounds.jsonl");
    stage["round_snapshots"] = snapshots;
    nn::Checkpoint global;
    global.meta["rounds_completed"] = std::to_string(r.server->rounds_completed());
    global.add("user_codebook", r.server->user_codebook());
    global.add("item_codebook", r.server->item_codebook());
    nn::save_checkpoint(dir / "global.ckpt", global);
    stage["global"] = artifact(root, dir / "global.ckpt");
    for (const auto& c : r.clients) {
      const std::string& id = c->market_id();
      nn::save_checkpoint(dir / (id + ".user.ckpt"), c->quantizer().users().to_checkpoint());
      nn::save_checkpoint(dir / (id + ".item.ckpt"), c->quantizer().items().to_checkpoint());
      stage["clients"][id] = {{"user", artifact(root, dir / (id + ".user.ckpt"))},
                              {"item", artifact(root, dir / (id + ".item.ckpt"))}};
    }
    const ExperimentConfig c = with_auto_dims(config);
    const fed::CommCost cost = fed::comm_cost_report(
        c.stream.codebook_size, c.stream.latent_dim, c.federation.rounds, c.ctr.tower_spec(2));
    write_text(dir / "comm_cost.json", cost.to_json().dump(2) + "\n");
    stage["comm_cost"] = artifact(root, dir / "comm_cost.json");
  }
  m.set_stage("federate", stage);
  m.record_time("federate", seconds_since(t0));
  m.save();
}

void cmd_tokenize(const ExperimentConfig& config, const fs::path& root) {
  const auto t0 = Clock::now();
  config.validate();
  RunManifest m = RunManifest::load_or_create(root);
  require(m, "federate", "federate");
  check_mode(config, m, "federate");
  m.invalidate_from("tokenize");
  m.set_config(config);
  nlohmann::json stage = {{"mode", ctr::to_string(config.mode)}};
  if (m.stage("federate").value("skipped", false)) {
    stage["skipped"] = true;
  } else {
    const PretrainResult pre = load_pretrain(m);
    const auto inputs = client_inputs(config, pre);
    const fs::path dir = root / "tokenize";
    fs::create_directories(dir);
    for (const auto& in : inputs) {
      const auto& clients = m.stage("federate").at("clients").at(in.market_id);
      const auto users =
          quant::QuantizerStream::from_checkpoint(nn::load_checkpoint(artifact_path(m, clients.at("user"))));
      const auto items =
          quant::QuantizerStream::from_checkpoint(nn::load_checkpoint(artifact_path(m, clients.at("item"))));
      const quant::TokenTable t = quant::tokenize(in.market_id, users, items, in.embeddings);
      const fs::path uf = dir / (in.market_id + ".user_tokens.csv");
      const fs::path itf = dir / (in.market_id + ".item_tokens.csv");
      t.save_csv(uf, itf);
      const auto uu = t.user_usage();
      const auto iu = t.item_usage();
      stage["tables"][in.market_id] = {{"codebook_size", t.codebook_size},
                                       {"two_level", t.two_level},
                                       {"users", artifact(root, uf)},
                                       {"items", artifact(root, itf)},
                                       {"user_codes_used", {uu.used_fed, uu.used_local}},
                                       {"item_codes_used", {iu.used_fed, iu.used_local}}};
    }
  }
  m.set_stage("tokenize", stage);
  m.record_time("tokenize", seconds_since(t0));
  m.save();
}

CtrRunResult cmd_train_ctr(const ExperimentConfig& config, const fs::path& root) {
  const auto t0 = Clock::now();
  config.validate();
  RunManifest m = RunManifest::load_or_create(root);
  // Ids-only training reads no tokens, so it only needs the datasets.
  const bool need_tokens = ctr::uses_tokens(config.mode);
  if (need_tokens) {
    require(m, "tokenize", "tokenize");
    check_mode(config, m, "tokenize");
  } else {
    require(m, "pretrain", "pretrain");
  }
  m.invalidate_from("train_ctr");
  m.set_config(config);
  const auto markets = data::load_datasets(root / m.stage("pretrain").at("datasets").get<std::string>());
  std::vector<quant::TokenTable> tokens;
  if (need_tokens) {
    for (const auto& d : markets) {
      const auto& t = m.stage("tokenize").at("tables").at(d.market_id);
      tokens.push_back(quant::TokenTable::load_csv(d.market_id, t.at("codebook_size").get<int>(),
                                                   t.at("two_level").get<bool>(),
                                                   artifact_path(m, t.at("users")),
                                                   artifact_path(m, t.at("items"))));
    }
  }
  CtrRunResult r = run_train_ctr(config, markets, tokens);
  const fs::path dir = root / "train_ctr";
  write_text(dir / "metrics.jsonl", jsonl(r.metrics));
  write_text(dir / "report.csv", report_csv(r.markets, {{ctr::to_string(config.mode), r}}));
  nlohmann::json summary = {{"mode", ctr::to_string(config.mode)}, {"overall_test_auc", r.overall_auc}};
  nlohmann::json stage = {{"mode", ctr::to_string(config.mode)}};
  for (std::size_t k = 0; k < r.markets.size(); ++k) {
    auto& res = r.results[k];
    summary["markets"][r.markets[k]] = {{"test_auc", res.test_auc},
                                        {"valid_auc", res.valid_auc},
                                        {"best_epoch", res.best_epoch},
                                        {"test_size", res.test_size}};
    nn::Checkpoint ck;
    ck.meta["market"] = r.markets[k];
    ck.meta["mode"] = ctr::to_string(config.mode);
    for (nn::Param* p : res.model.params()) ck.add(p->name, p->value);
    const fs::path model = dir / "models" / (r.markets[k] + ".ckpt");
    fs::create_directories(model.parent_path());
    nn::save_checkpoint(model, ck);
    stage["models"][r.markets[k]] = artifact(root, model);
  }
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  stage["metrics"] = artifact(root, dir / "metrics.jsonl");
  stage["report"] = artifact(root, dir / "report.csv");
  stage["summary"] = artifact(root, dir / "summary.json");
  m.set_stage("train_ctr", stage);
  m.record_time("train_ctr", seconds_since(t0));
  m.save();
  return r;
}

std::string report_csv(const std::vector<std::string>& markets,
                       const std::vector<std::pair<std::string, CtrRunResult>>& rows) {
  std::ostringstream out;
  out << "label";
  for (const auto& id : markets) out << ',' << id;
  out << ",overall\n";
  for (const auto& [label, r] : rows) {
    out << label;
    for (const auto& res : r.results) out << ',' << fmt(res.test_auc);
    out << ',' << fmt(r.overall_auc) << '\n';
  }
  return out.str();
}

std::vector<SweepResult::Summary> SweepResult::summarize() const {
  std::vector<Summary> out;
  for (const auto& p : points) {
    auto it = std::find_if(out.begin(), out.end(), [&](const Summary& s) { return s.value == p.value; });
    if (it == out.end()) {
      out.push_back({p.value});
      it = out.end() - 1;
    }
    if (!p.ok) {
      ++it->failures;
      continue;
    }
    ++it->runs;
    it->mean += p.overall_auc;
  }
  for (auto& s : out) {
    if (s.runs == 0) continue;
    s.mean /= s.runs;
    double ss = 0;
    for (const auto& p : points) {
      if (p.ok && p.value == s.value) ss += (p.overall_auc - s.mean) * (p.overall_auc - s.mean);
    }
    s.stddev = s.runs > 1 ? std::sqrt(ss / (s.runs - 1)) : 0.0;
  }
  return out;
}

SweepResult cmd_sweep(const ExperimentConfig& config, const std::string& axis,
                      const std::vector<std::string>& values, int repeats, const fs::path& root) {
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  if (repeats < 1) throw ConfigError("sweep repeats must be >= 1");
  const std::string key = canonical_axis(axis);
  {
    // Reject malformed grids up front; everything later is per-point.
    ExperimentConfig probe = config;
    for (const auto& v : values) probe.set(key, v);
  }
  SweepResult result;
  result.axis = axis;
  const bool share_pretrain = !affects_pretrain(key);
  for (int rep = 0; rep < repeats; ++rep) {
    const std::uint64_t seed = config.seed + static_cast<std::uint64_t>(rep);
    std::optional<PretrainResult> cached;
    for (const auto& v : values) {
      SweepPoint p;
      p.value = v;
      p.seed = seed;
      try {
        ExperimentConfig c = config;
        c.seed = seed;
        c.set(key, v);
        c.validate();
        if (share_pretrain && !cached) cached = run_pretrain(c);
        const CtrRunResult r = run_experiment(c, share_pretrain ? &*cached : nullptr);
        p.ok = true;
        p.overall_auc = r.overall_auc;
        for (const auto& res : r.results) p.market_auc.push_back(res.test_auc);
        if (result.markets.empty()) result.markets = r.markets;
        if (!root.empty()) {
          const fs::path dir = root / "sweep" / (axis + "=" + v) / ("seed=" + std::to_string(seed));
          write_text(dir / "metrics.jsonl", jsonl(r.metrics));
          write_text(dir / "report.csv", report_csv(r.markets, {{v, r}}));
          write_text(dir / "config.json", c.to_json().dump(2) + "\n");
        }
      } catch (const std::exception& e) {
        p.ok = false;
        p.error = e.what();
      }
      result.points.push_back(std::move(p));
    }
  }
  if (!root.empty()) {
    std::ostringstream all;
    all << "value,seed,status,overall";
    for (const auto& id : result.markets) all << ',' << id;
    all << ",error\n";
    for (const auto& p : result.points) {
      all << p.value << ',' << p.seed << ',' << (p.ok ? "ok" : "failed") << ','
          << (p.ok ? fmt(p.overall_auc) : "");
      for (std::size_t k = 0; k < result.markets.size(); ++k) {
        all << ',' << (k < p.market_auc.size() ? fmt(p.market_auc[k]) : "");
      }
      std::string err = p.error;
      std::replace(err.begin(), err.end(), ',', ';');
      std::replace(err.begin(), err.end(), '\n', ' ');
      all << ',' << err << '\n';
    }
    write_text(root / "sweep" / (axis + ".csv"), all.str());
    std::ostringstream sum;
    sum << "value,runs,failures,mean_overall,std_overall\n";
    for (const auto& s : result.summarize()) {
      sum << s.value << ',' << s.runs << ',' << s.failures << ',' << fmt(s.mean) << ','
          << fmt(s.stddev) << '\n';
    }
    write_text(root / "sweep" / (axis + "_summary.csv"), sum.str());
  }
  return result;
}

std::string cmd_report(const fs::path& root) {
  std::ostringstream out;
  bool any = false;
  auto emit = [&](const std::string& title, const fs::path& path) {
    if (!fs::exists(path)) return;
    any = true;
    out << "== " << title << " (" << path.generic_string() << ")\n" << nn::read_file(path) << '\n';
  };
  emit("CTR test AUC", root / "train_ctr" / "report.csv");
  emit("communication cost", root / "federate" / "comm_cost.json");
  if (fs::exists(root / "sweep")) {
    std::vector<fs::path> summaries;
    for (const auto& e : fs::directory_iterator(root / "sweep")) {
      const std::string name = e.path().filename().string();
      if (name.size() > 12 && name.ends_with("_summary.csv")) summaries.push_back(e.path());
    }
    std::sort(summaries.begin(), summaries.end());
    for (const auto& p : summaries) {
      const std::string name = p.filename().string();
      emit("sweep over " + name.substr(0, name.size() - 12), p);
    }
  }
  if (!any) throw DependencyError("nothing to report in " + root.string() + "; run `fedcq train-ctr` or `fedcq sweep` first");
  return out.str();
}

}  // namespace fedcq::pipeline

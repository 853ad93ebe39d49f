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
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "fedcq/cf.hpp"
#include "fedcq/ctr.hpp"
#include "fedcq/data.hpp"
#include "fedcq/federation.hpp"
#include "fedcq/quantizer.hpp"
#include "fedcq/tokens.hpp"

namespace fedcq::pipeline {

inline constexpr const char* kVersion = "fedcq 0.1.0";
inline constexpr const char* kOutputRootEnv = "FEDCQ_OUT";

// Every knob of an end-to-end run. Settable by dotted key (see keys()).
struct ExperimentConfig {
  std::uint64_t seed = 42;
  ctr::AblationMode mode = ctr::AblationMode::kFull;
  bool weighted_overall = true;

  // "synthetic" or "files" (market_files: market id -> interaction file).
  std::string data_source = "synthetic";
  std::vector<std::pair<std::string, std::string>> market_files;
  data::SyntheticSpec synthetic;
  std::optional<std::uint64_t> synthetic_seed;  // default: derived from seed
  int min_interactions = 3;
  data::SplitRatios ratios;
  std::optional<std::uint64_t> split_seed;  // default: derived from seed

  cf::CfConfig cf;
  quant::StreamConfig stream;
  quant::QuantizerTrainConfig quant_train;
  // Quantizer inputs are rescaled per market to this RMS per coordinate.
  double input_rms = 1.0;
  fed::FederationConfig federation;
  ctr::CtrConfig ctr;

  // key = value setters; unknown keys and malformed values throw ConfigError.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static std::vector<std::string> keys();
  void validate() const;
  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
};

// Plain-text config: one "key = value" per line, '#' starts a comment.
void apply_config_text(ExperimentConfig& config, const std::string& text,
                       const std::string& origin = "<config>");
void apply_config_file(ExperimentConfig& config, const std::filesystem::path& path);
// "key=value" override.
void apply_override(ExperimentConfig& config, const std::string& assignment);

// ---- In-memory stages ----------------------------------------------------

struct PretrainResult {
  std::vector<data::MarketDataset> markets;  // filtered and split
  std::vector<cf::EmbeddingTable> embeddings;  // propagated CF embeddings
  std::vector<std::vector<double>> cf_train_loss;
  std::vector<std::vector<double>> cf_holdout_loss;
  std::vector<int> cf_best_epoch;
};

struct FederateResult {
  std::unique_ptr<fed::Server> server;
  std::vector<std::unique_ptr<fed::Client>> clients;
  std::vector<fed::RoundReport> rounds;
};

struct CtrRunResult {
  std::vector<std::string> markets;
  std::vector<ctr::CtrResult> results;
  double overall_auc = 0;
  std::vector<nlohmann::json> metrics;
};

std::vector<data::MarketDataset> prepare_markets(const ExperimentConfig& config);
PretrainResult run_pretrain(const ExperimentConfig& config);
// Rescales to config.input_rms and collects the quantizer training pairs.
std::vector<fed::ClientData> client_inputs(const ExperimentConfig& config,
                                           const PretrainResult& pretrain);
// Mode-aware Phase 1; returns no clients for local_only.
FederateResult run_federate(const ExperimentConfig& config, const PretrainResult& pretrain,
                            const std::function<void(const fed::RoundReport&, const fed::Server&)>& on_round = {});
std::vector<quant::TokenTable> run_tokenize(const FederateResult& federated);
CtrRunResult run_train_ctr(const ExperimentConfig& config,
                           const std::vector<data::MarketDataset>& markets,
                           const std::vector<quant::TokenTable>& tokens);
// All stages; `pretrained` skips pretraining when given.
CtrRunResult run_experiment(const ExperimentConfig& config,
                            const PretrainResult* pretrained = nullptr);

// ---- Disk-backed commands -------------------------------------------------

// <root>/manifest.json: config snapshot, per-stage artifacts (relative paths
// with content hashes) and the code version. Wall-clock times go to
// <root>/timings.json so that manifests of identical runs are identical.
class RunManifest {
 public:
  static RunManifest load_or_create(const std::filesystem::path& root);
  const std::filesystem::path& root() const { return root_; }
  nlohmann::json& json() { return json_; }
  bool has_stage(const std::string& stage) const;
  const nlohmann::json& stage(const std::string& stage) const;
  void set_stage(const std::string& stage, nlohmann::json value);
  // Drops `stage` and every stage after it.
  void invalidate_from(const std::string& stage);
  std::optional<ExperimentConfig> config() const;
  void set_config(const ExperimentConfig& config);
  void record_time(const std::string& stage, double seconds);
  void save() const;

 private:
  std::filesystem::path root_;
  nlohmann::json json_;
  nlohmann::json timings_;
};

// Hex FNV-1a of a file's bytes.
std::string file_digest(const std::filesystem::path& path);

void cmd_pretrain(const ExperimentConfig& config, const std::filesystem::path& root);
void cmd_federate(const ExperimentConfig& config, const std::filesystem::path& root);
void cmd_tokenize(const ExperimentConfig& config, const std::filesystem::path& root);
CtrRunResult cmd_train_ctr(const ExperimentConfig& config, const std::filesystem::path& root);

struct SweepPoint {
  std::string value;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  double overall_auc = 0;
  std::vector<double> market_auc;
};

struct SweepResult {
  std::string axis;
  std::vector<std::string> markets;
  std::vector<SweepPoint> points;

  // Mean and sample standard deviation of overall AUC per value, in grid
  // order, over successful points.
  struct Summary {
    std::string value;
    int runs = 0;
    int failures = 0;
    double mean = 0;
    double stddev = 0;
  };
  std::vector<Summary> summarize() const;
};

// Runs every value of `axis` ("T", "b", "mode" or any config key) for
// `repeats` seeds (seed, seed + 1, ...). A failing point is recorded and the
// sweep continues. When `root` is non-empty each point writes its metrics
// under <root>/sweep/<axis>=<value>/seed=<s>/ and the consolidated CSVs go
// to <root>/sweep/.
SweepResult cmd_sweep(const ExperimentConfig& config, const std::string& axis,
                      const std::vector<std::string>& values, int repeats,
                      const std::filesystem::path& root);

// Human-readable summary of whatever reports exist under `root`.
std::string cmd_report(const std::filesystem::path& root);

// Table with one row per mode/label: label, per-market AUC..., overall.
std::string report_csv(const std::vector<std::string>& markets,
                       const std::vector<std::pair<std::string, CtrRunResult>>& rows);

}  // namespace fedcq::pipeline

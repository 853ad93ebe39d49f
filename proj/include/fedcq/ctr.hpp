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
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "fedcq/data.hpp"
#include "fedcq/nn/adam.hpp"
#include "fedcq/nn/mlp.hpp"
#include "fedcq/tokens.hpp"

namespace fedcq::ctr {

using nn::Matrix;

enum class AblationMode {
  kFull,            // ids + federated and local tokens
  kNoLocal,         // single-level quantizer, federated tokens only
  kNoGlobal,        // two-level tokens trained without any aggregation
  kRandomCodebook,  // tokens from a frozen, randomly initialised quantizer
  kLocalOnly,       // ids only
};
AblationMode parse_mode(const std::string& s);
const char* to_string(AblationMode m);
bool uses_tokens(AblationMode m);
bool uses_local_tokens(AblationMode m);
const std::vector<AblationMode>& all_modes();

struct FieldSpec {
  std::string name;
  int cardinality = 0;
};

// Ordered categorical fields: user id, item id, then (per mode) user fed,
// user local, item fed, item local tokens, then dataset side features.
std::vector<FieldSpec> feature_schema(const data::MarketDataset& d,
                                      const quant::TokenTable* tokens, AblationMode mode);
std::vector<int> build_features(const data::InteractionRecord& r,
                                const quant::TokenTable* tokens, AblationMode mode);

struct CtrConfig {
  int embed_dim = 16;
  std::vector<int> hidden = {512, 256, 128};
  double lr = 1e-3;
  double l2 = 1e-6;
  int epochs = 20;
  int batch_size = 256;
  int patience = 5;
  double init_std = 0.05;
  std::uint64_t seed = 0;

  void validate() const;
  nn::MlpSpec tower_spec(int num_fields) const;
};

class CtrModel {
 public:
  CtrModel() = default;
  CtrModel(std::string market_id, std::vector<FieldSpec> schema, AblationMode mode,
           const CtrConfig& config, Rng& rng);

  const std::string& market_id() const { return market_id_; }
  AblationMode mode() const { return mode_; }
  const std::vector<FieldSpec>& schema() const { return schema_; }
  int fused_width() const { return static_cast<int>(schema_.size()) * embed_dim_; }
  nn::Param& table(std::size_t field) { return tables_.at(field); }
  const nn::Param& table(std::size_t field) const { return tables_.at(field); }
  nn::Mlp& tower() { return tower_; }

  // Rows of `features` are per-record field-index lists.
  nn::Var logits(nn::Tape& tape, const std::vector<std::vector<int>>& features);
  std::vector<double> predict_features(const std::vector<std::vector<int>>& features) const;
  nn::ParamRefs params();

 private:
  void check(const std::vector<std::vector<int>>& features) const;

  std::string market_id_;
  std::vector<FieldSpec> schema_;
  AblationMode mode_ = AblationMode::kFull;
  int embed_dim_ = 16;
  std::vector<nn::Param> tables_;
  nn::Mlp tower_;
};

// Probabilities in (0, 1), in record order.
std::vector<double> predict(const CtrModel& model, std::span<const data::InteractionRecord> records,
                            const quant::TokenTable* tokens);

// Area under the ROC curve via average ranks: ties count one half.
double auc(std::span<const double> scores, std::span<const int> labels);
// Mean log-loss of probabilities.
double log_loss(std::span<const double> probs, std::span<const int> labels);

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0;
  double valid_auc = 0;
  double test_auc = 0;
};

struct CtrResult {
  CtrModel model;  // best-validation-AUC parameters
  std::vector<EpochMetrics> history;
  int best_epoch = 0;
  double valid_auc = 0;
  double test_auc = 0;
  std::size_t test_size = 0;
};

CtrResult train_ctr(const data::MarketDataset& d, const quant::TokenTable* tokens,
                    AblationMode mode, const CtrConfig& config);

// Weighted by test-set size, or the plain mean when `weighted` is false.
double evaluate_overall(std::span<const double> aucs, std::span<const std::size_t> sizes,
                        bool weighted = true);

nlohmann::json metrics_line(const std::string& market, AblationMode mode, const EpochMetrics& m);

}  // namespace fedcq::ctr

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

#include "fedcq/ctr.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fedcq/error.hpp"
#include "fedcq/rng.hpp"

namespace fedcq::ctr {
namespace {

constexpr std::size_t kPredictChunk = 4096;

std::vector<std::vector<int>> features_of(std::span<const data::InteractionRecord> records,
                                          const quant::TokenTable* tokens, AblationMode mode) {
  std::vector<std::vector<int>> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(build_features(r, tokens, mode));
  return out;
}

std::vector<int> labels_of(std::span<const data::InteractionRecord> records) {
  std::vector<int> y;
  y.reserve(records.size());
  for (const auto& r : records) y.push_back(r.label);
  return y;
}

bool both_classes(std::span<const int> labels) {
  bool pos = false, neg = false;
  for (int y : labels) (y ? pos : neg) = true;
  return pos && neg;
}

}  // namespace

AblationMode parse_mode(const std::string& s) {
  for (AblationMode m : all_modes()) {
    if (s == to_string(m)) return m;
  }
  throw ConfigError("unknown mode '" + s +
                    "' (expected full, no_local, no_global, random_codebook or local_only)");
}

const char* to_string(AblationMode m) {
  switch (m) {
    case AblationMode::kFull: return "full";
    case AblationMode::kNoLocal: return "no_local";
    case AblationMode::kNoGlobal: return "no_global";
    case AblationMode::kRandomCodebook: return "random_codebook";
    case AblationMode::kLocalOnly: return "local_only";
  }
  return "?";
}

const std::vector<AblationMode>& all_modes() {
  static const std::vector<AblationMode> modes = {
      AblationMode::kFull, AblationMode::kNoLocal, AblationMode::kNoGlobal,
      AblationMode::kRandomCodebook, AblationMode::kLocalOnly};
  return modes;
}

bool uses_tokens(AblationMode m) { return m != AblationMode::kLocalOnly; }
bool uses_local_tokens(AblationMode m) { return uses_tokens(m) && m != AblationMode::kNoLocal; }

std::vector<FieldSpec> feature_schema(const data::MarketDataset& d,
                                      const quant::TokenTable* tokens, AblationMode mode) {
  std::vector<FieldSpec> s = {{"user", d.num_users}, {"item", d.num_items}};
  if (uses_tokens(mode)) {
    if (!tokens) throw Error(std::string("mode ") + to_string(mode) + " needs a token table");
    if (uses_local_tokens(mode) && !tokens->two_level) {
      throw Error(std::string("mode ") + to_string(mode) + " needs local tokens");
    }
    const int T = tokens->codebook_size;
    s.push_back({"user_fed", T});
    if (uses_local_tokens(mode)) s.push_back({"user_local", T});
    s.push_back({"item_fed", T});
    if (uses_local_tokens(mode)) s.push_back({"item_local", T});
  }
  for (std::size_t f = 0; f < d.feature_fields.size(); ++f) {
    s.push_back({"f:" + d.feature_fields[f], d.feature_cardinality[f]});
  }
  return s;
}

std::vector<int> build_features(const data::InteractionRecord& r,
                                const quant::TokenTable* tokens, AblationMode mode) {
  std::vector<int> f = {r.user, r.item};
  if (uses_tokens(mode)) {
    if (!tokens) throw Error(std::string("mode ") + to_string(mode) + " needs a token table");
    const quant::TokenPair& u = tokens->user(r.user);
    const quant::TokenPair& i = tokens->item(r.item);
    f.push_back(u.fed);
    if (uses_local_tokens(mode)) f.push_back(u.local);
    f.push_back(i.fed);
    if (uses_local_tokens(mode)) f.push_back(i.local);
  }
  f.insert(f.end(), r.features.begin(), r.features.end());
  return f;
}

void CtrConfig::validate() const {
  if (embed_dim < 1) throw ConfigError("embedding width must be positive");
  if (!(lr > 0)) throw ConfigError("CTR learning rate must be positive");
  if (l2 < 0) throw ConfigError("CTR l2 must be >= 0");
  if (epochs < 0) throw ConfigError("CTR epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("CTR batch size must be positive");
  if (patience < 1) throw ConfigError("early-stopping patience must be positive");
  for (int h : hidden) {
    if (h < 1) throw ConfigError("hidden widths must be positive");
  }
}

nn::MlpSpec CtrConfig::tower_spec(int num_fields) const {
  std::vector<int> widths = hidden;
  widths.push_back(1);
  return {num_fields * embed_dim, widths, nn::Activation::kRelu, nn::Activation::kIdentity};
}

CtrModel::CtrModel(std::string market_id, std::vector<FieldSpec> schema, AblationMode mode,
                   const CtrConfig& config, Rng& rng)
    : market_id_(std::move(market_id)),
      schema_(std::move(schema)),
      mode_(mode),
      embed_dim_(config.embed_dim) {
  config.validate();
  for (const auto& f : schema_) {
    if (f.cardinality < 1) throw ConfigError("field " + f.name + " has no values");
    Matrix t(f.cardinality, embed_dim_);
    for (Eigen::Index k = 0; k < t.size(); ++k) t.data()[k] = config.init_std * standard_normal(rng);
    tables_.emplace_back("embedding." + f.name, std::move(t));
  }
  tower_ = nn::Mlp(config.tower_spec(static_cast<int>(schema_.size())), rng);
}

void CtrModel::check(const std::vector<std::vector<int>>& features) const {
  for (const auto& row : features) {
    if (row.size() != schema_.size()) {
      throw ShapeError("expected " + std::to_string(schema_.size()) + " fields, got " +
                       std::to_string(row.size()));
    }
    for (std::size_t f = 0; f < row.size(); ++f) {
      if (row[f] < 0 || row[f] >= schema_[f].cardinality) {
        throw Error("unseen " + schema_[f].name + " id " + std::to_string(row[f]) +
                    " in market " + market_id_);
      }
    }
  }
}

nn::Var CtrModel::logits(nn::Tape& tape, const std::vector<std::vector<int>>& features) {
  check(features);
  std::vector<nn::Var> parts;
  std::vector<int> column(features.size());
  for (std::size_t f = 0; f < schema_.size(); ++f) {
    for (std::size_t k = 0; k < features.size(); ++k) column[k] = features[k][f];
    parts.push_back(tape.gather_rows(tape.param(tables_[f]), column));
  }
  return tower_.forward(tape, tape.concat_cols(parts));
}

std::vector<double> CtrModel::predict_features(const std::vector<std::vector<int>>& features) const {
  check(features);
  std::vector<double> out;
  out.reserve(features.size());
  for (std::size_t start = 0; start < features.size(); start += kPredictChunk) {
    const std::size_t end = std::min(features.size(), start + kPredictChunk);
    Matrix x(static_cast<Eigen::Index>(end - start), fused_width());
    for (std::size_t k = start; k < end; ++k) {
      for (std::size_t f = 0; f < schema_.size(); ++f) {
        x.block(static_cast<Eigen::Index>(k - start), static_cast<Eigen::Index>(f) * embed_dim_, 1,
                embed_dim_) = tables_[f].value.row(features[k][f]);
      }
    }
    const Matrix logit = tower_.forward(x);
    for (Eigen::Index k = 0; k < logit.rows(); ++k) {
      out.push_back(1.0 / (1.0 + std::exp(-logit(k, 0))));
    }
  }
  return out;
}

nn::ParamRefs CtrModel::params() {
  nn::ParamRefs p;
  for (auto& t : tables_) p.push_back(&t);
  for (nn::Param* q : tower_.params()) p.push_back(q);
  return p;
}

std::vector<double> predict(const CtrModel& model, std::span<const data::InteractionRecord> records,
                            const quant::TokenTable* tokens) {
  return model.predict_features(features_of(records, tokens, model.mode()));
}

double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ShapeError("auc: scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0;
  double n_pos = 0;
  for (std::size_t start = 0; start < order.size();) {
    std::size_t end = start + 1;
    while (end < order.size() && scores[order[end]] == scores[order[start]]) ++end;
    // Ranks start..end-1 (1-based: start+1..end) share their average.
    const double avg_rank = 0.5 * static_cast<double>(start + 1 + end);
    for (std::size_t k = start; k < end; ++k) {
      if (labels[order[k]]) {
        pos_rank_sum += avg_rank;
        n_pos += 1;
      }
    }
    start = end;
  }
  const double n_neg = static_cast<double>(scores.size()) - n_pos;
  if (n_pos == 0 || n_neg == 0) throw Error("AUC is undefined with a single class");
  return (pos_rank_sum - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg);
}

double log_loss(std::span<const double> probs, std::span<const int> labels) {
  if (probs.size() != labels.size() || probs.empty()) throw ShapeError("log_loss: bad inputs");
  double total = 0;
  for (std::size_t k = 0; k < probs.size(); ++k) {
    const double p = std::clamp(probs[k], 1e-15, 1 - 1e-15);
    total -= labels[k] ? std::log(p) : std::log1p(-p);
  }
  return total / static_cast<double>(probs.size());
}

CtrResult train_ctr(const data::MarketDataset& d, const quant::TokenTable* tokens,
                    AblationMode mode, const CtrConfig& config) {
  config.validate();
  if (!d.has_ctr_split()) throw Error("market " + d.market_id + " has no CTR split");
  const auto train = d.records(data::Split::kTrain);
  const auto valid = d.records(data::Split::kValid);
  const auto test = d.records(data::Split::kTest);
  const auto y_train = labels_of(train);
  const auto y_valid = labels_of(valid);
  const auto y_test = labels_of(test);
  if (!both_classes(y_train)) {
    throw Error("training split of market " + d.market_id + " has a single class");
  }
  const auto x_train = features_of(train, tokens, mode);
  const auto x_valid = features_of(valid, tokens, mode);
  const auto x_test = features_of(test, tokens, mode);

  Rng init_rng = make_rng(config.seed, "ctr/init");
  CtrResult result;
  result.model = CtrModel(d.market_id, feature_schema(d, tokens, mode), mode, config, init_rng);
  result.test_size = test.size();
  CtrModel& model = result.model;
  nn::Adam opt(model.params(), nn::AdamConfig{.lr = config.lr, .l2 = config.l2});

  auto evaluate = [&](int epoch, double train_loss) {
    EpochMetrics m{epoch, train_loss, auc(model.predict_features(x_valid), y_valid),
                   auc(model.predict_features(x_test), y_test)};
    result.history.push_back(m);
    return m;
  };
  auto snapshot = [&]() {
    std::vector<Matrix> s;
    for (nn::Param* p : model.params()) s.push_back(p->value);
    return s;
  };

  EpochMetrics best = evaluate(0, log_loss(model.predict_features(x_train), y_train));
  std::vector<Matrix> best_params = snapshot();
  int since_best = 0;

  Rng rng = make_rng(config.seed, "ctr/shuffle");
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto bs = static_cast<std::size_t>(config.batch_size);
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t end = std::min(order.size(), start + bs);
      std::vector<std::vector<int>> xb;
      std::vector<double> yb;
      for (std::size_t k = start; k < end; ++k) {
        xb.push_back(x_train[order[k]]);
        yb.push_back(static_cast<double>(y_train[order[k]]));
      }
      nn::zero_grads(opt.params());
      nn::Tape tape;
      const nn::Var loss = tape.mean(tape.bce_with_logits(model.logits(tape, xb), yb));
      tape.backward(loss);
      opt.step();
      loss_sum += tape.scalar(loss) * static_cast<double>(end - start);
    }
    const EpochMetrics m = evaluate(epoch, loss_sum / static_cast<double>(order.size()));
    if (m.valid_auc > best.valid_auc) {
      best = m;
      best_params = snapshot();
      since_best = 0;
    } else if (++since_best >= config.patience) {
      break;
    }
  }
  const nn::ParamRefs params = model.params();
  for (std::size_t k = 0; k < params.size(); ++k) params[k]->value = best_params[k];
  result.best_epoch = best.epoch;
  result.valid_auc = best.valid_auc;
  result.test_auc = best.test_auc;
  return result;
}

double evaluate_overall(std::span<const double> aucs, std::span<const std::size_t> sizes,
                        bool weighted) {
  if (aucs.empty()) throw EmptyDatasetError("no markets to aggregate");
  if (weighted && sizes.size() != aucs.size()) {
    throw ShapeError("one test size per market is required");
  }
  double num = 0, den = 0;
  for (std::size_t k = 0; k < aucs.size(); ++k) {
    const double w = weighted ? static_cast<double>(sizes[k]) : 1.0;
    num += w * aucs[k];
    den += w;
  }
  if (den <= 0) throw ConfigError("test sizes sum to zero");
  return num / den;
}

nlohmann::json metrics_line(const std::string& market, AblationMode mode, const EpochMetrics& m) {
  return {{"market", market},       {"mode", to_string(mode)},   {"epoch", m.epoch},
          {"train_loss", m.train_loss}, {"valid_auc", m.valid_auc}, {"test_auc", m.test_auc}};
}

}  // namespace fedcq::ctr

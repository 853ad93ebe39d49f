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

#include "fedcq/cf.hpp"
#include "fedcq/nn/adam.hpp"
#include "fedcq/nn/checkpoint.hpp"
#include "fedcq/nn/mlp.hpp"
#include "fedcq/nn/tape.hpp"
#include "fedcq/rng.hpp"
#include "fedcq/tokens.hpp"

namespace fedcq::quant {

using nn::Matrix;
using nn::RowVector;

enum class CodebookRole { kFederated, kLocal };
enum class Entity { kUser, kItem };
const char* to_string(CodebookRole r);
const char* to_string(Entity e);

// T codewords of width d_latent. The federated codebook is the only tensor
// that ever leaves a client.
class Codebook {
 public:
  Codebook() = default;
  Codebook(CodebookRole role, Entity entity, Matrix codewords);

  CodebookRole role() const { return role_; }
  Entity entity() const { return entity_; }
  int size() const { return static_cast<int>(param_.value.rows()); }
  int width() const { return static_cast<int>(param_.value.cols()); }
  const Matrix& codewords() const { return param_.value; }
  nn::Param& param() { return param_; }
  const nn::Param& param() const { return param_; }
  // Replaces the codewords; the shape must not change.
  void set_codewords(const Matrix& c);

 private:
  CodebookRole role_ = CodebookRole::kFederated;
  Entity entity_ = Entity::kUser;
  nn::Param param_;
};

// Pairwise cosine similarity of rows. Zero rows of `b` always throw; zero rows
// of `a` throw or score by raw dot product (i.e. 0) depending on `policy`.
Matrix cosine_matrix(const Matrix& a, const Matrix& b, nn::ZeroNormPolicy policy);
// Index of the row maximum; ties resolve to the lowest index.
std::vector<int> argmax_rows(const Matrix& m);
RowVector softmax(const RowVector& logits);

struct Assignment {
  int index = -1;
  RowVector probs;  // softmax(cos(r, c_j) / tau)
};
Assignment assign(const RowVector& r, const Codebook& codebook, double tau,
                  nn::ZeroNormPolicy policy = nn::ZeroNormPolicy::kThrow);

struct StreamConfig {
  int input_dim = 16;
  int latent_dim = 16;
  int codebook_size = 256;
  double tau = 0.1;
  bool two_level = true;
  // Standard deviation of the server's initial federated codewords and of
  // the jitter added to sampled local codewords (relative to residual RMS).
  double fed_init_std = 0.5;
  double local_jitter = 0.01;

  void validate() const;
};

// Encoder, federated codebook, optional local codebook and decoder for one
// entity type.
class QuantizerStream {
 public:
  QuantizerStream() = default;
  // Encoder/decoder get Glorot weights; both codebooks start Gaussian.
  QuantizerStream(Entity entity, const StreamConfig& config, Rng& rng);

  Entity entity() const { return entity_; }
  const StreamConfig& config() const { return config_; }
  bool two_level() const { return config_.two_level; }
  double tau() const { return config_.tau; }

  nn::Mlp& encoder() { return encoder_; }
  const nn::Mlp& encoder() const { return encoder_; }
  nn::Mlp& decoder() { return decoder_; }
  const nn::Mlp& decoder() const { return decoder_; }
  Codebook& fed() { return fed_; }
  const Codebook& fed() const { return fed_; }
  Codebook& local();
  const Codebook& local() const;

  nn::ParamRefs params();
  nn::ParamRefs encoder_decoder_params();

  // Re-draws the local codebook from the level-1 residuals of `embeddings`
  // (sampled without replacement when there are at least T rows) plus jitter.
  void init_local_from_data(const Matrix& embeddings, Rng& rng);

  nn::Checkpoint to_checkpoint() const;
  static QuantizerStream from_checkpoint(const nn::Checkpoint& ckpt);

 private:
  Entity entity_ = Entity::kUser;
  StreamConfig config_;
  nn::Mlp encoder_;
  nn::Mlp decoder_;
  Codebook fed_;
  Codebook local_;
};

// Single-entity inference path. Local fields stay empty / -1 on a
// single-level stream.
struct QuantizationResult {
  RowVector z;
  int fed_index = -1;
  RowVector fed_probs;
  RowVector residual;
  int local_index = -1;
  RowVector local_probs;
  RowVector quantized;
  RowVector reconstruction;
};
QuantizationResult quantize(const QuantizerStream& s, const RowVector& e,
                            nn::ZeroNormPolicy policy = nn::ZeroNormPolicy::kDotFallback);

// Codes for every row of `embeddings`.
std::vector<TokenPair> encode_all(const QuantizerStream& s, const Matrix& embeddings);
TokenTable tokenize(const std::string& market_id, const QuantizerStream& users,
                    const QuantizerStream& items, const cf::EmbeddingTable& embeddings);

// Reference loss values computed without the tape.
double code_loss(const QuantizationResult& q);
double align_loss(const Matrix& quantized, const Matrix& embeddings, double tau);
double rec_loss(const RowVector& user_recon, const RowVector& item_recon, double label);
double total_loss(double rec, double code_u, double code_i, double align_u, double align_i,
                  double lambda);

enum class GradientPath {
  kStraightThrough,  // decoder sees z_q, its gradient flows to z
  kExact,            // decoder sees z_q and differentiates through it
};

// Tape nodes of one stream applied to a batch of embeddings.
struct StreamGraph {
  nn::Var z;
  nn::Var fed_logits;
  std::vector<int> fed_index;
  nn::Var local_logits;
  std::vector<int> local_index;
  nn::Var quantized;
  nn::Var decoder_input;
  nn::Var reconstruction;
  nn::Var code_loss;   // batch mean
  nn::Var align_loss;  // batch mean
};
StreamGraph record_stream(nn::Tape& tape, QuantizerStream& s, const Matrix& embeddings,
                          GradientPath path);

// (user, item, label) training pairs.
struct PairBatch {
  std::vector<int> users;
  std::vector<int> items;
  std::vector<double> labels;
};

struct LossReport {
  double total = 0;
  double rec = 0;
  double code_u = 0;
  double code_i = 0;
  double align_u = 0;
  double align_i = 0;

  LossReport& operator+=(const LossReport& o);
  LossReport scaled(double s) const;
};

// Records the full objective on `tape`; returns the scalar total.
nn::Var record_objective(nn::Tape& tape, QuantizerStream& users, QuantizerStream& items,
                         const cf::EmbeddingTable& embeddings, const PairBatch& batch,
                         double lambda, GradientPath path, LossReport* report = nullptr);

// Which parameters a step may change.
enum class TrainScope { kAll, kLocalCodebooksOnly };

struct QuantizerTrainConfig {
  double lr = 1e-3;
  double l2 = 0.0;
  double lambda = 1.0;
  int batch_size = 256;  // positive pairs per batch (each gets one negative)
  GradientPath path = GradientPath::kStraightThrough;

  void validate() const;
};

// One optimisation step over both streams.
LossReport train_step(QuantizerStream& users, QuantizerStream& items,
                      const cf::EmbeddingTable& embeddings, const PairBatch& batch,
                      nn::Adam& optimizer, const QuantizerTrainConfig& config);

// Both streams of one market plus their optimiser.
class MarketQuantizer {
 public:
  MarketQuantizer(std::string market_id, const StreamConfig& stream,
                  const QuantizerTrainConfig& train, std::uint64_t seed);
  // The optimiser holds pointers into the streams.
  MarketQuantizer(const MarketQuantizer&) = delete;
  MarketQuantizer& operator=(const MarketQuantizer&) = delete;

  const std::string& market_id() const { return market_id_; }
  QuantizerStream& users() { return users_; }
  const QuantizerStream& users() const { return users_; }
  QuantizerStream& items() { return items_; }
  const QuantizerStream& items() const { return items_; }
  nn::Adam& optimizer() { return optimizer_; }

  void set_scope(TrainScope scope);
  void init_local_from_data(const cf::EmbeddingTable& embeddings, Rng& rng);
  // One pass over the shuffled positives, each paired with a uniformly
  // sampled negative item. Returns the batch-averaged losses.
  LossReport train_epoch(const cf::EmbeddingTable& embeddings,
                         std::span<const std::pair<int, int>> positives, Rng& rng);
  TokenTable tokenize(const cf::EmbeddingTable& embeddings) const;

 private:
  void rebuild_optimizer();

  std::string market_id_;
  QuantizerTrainConfig train_;
  QuantizerStream users_;
  QuantizerStream items_;
  nn::Adam optimizer_;
};

}  // namespace fedcq::quant

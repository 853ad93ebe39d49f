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
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"

#include "fedcq/cf.hpp"
#include "fedcq/nn/mlp.hpp"
#include "fedcq/quantizer.hpp"

namespace fedcq::fed {

using nn::Matrix;

// Laplace noise added to every coordinate of an uploaded codebook.
struct LdpConfig {
  bool enabled = true;
  double scale = 0.001;  // Laplace b

  void validate() const;
};

// Returns a perturbed copy of a federated codebook. Local codebooks never
// leave the client: passing one throws PrivacyWallError.
Matrix ldp_perturb(const quant::Codebook& codebook, const LdpConfig& config, Rng& rng);

// The only payload a client uploads: its two federated codebooks.
//
// Wire format (version 1, little-endian): "FCQMSG01", u32 version, u32 round,
// u32 len + market_id, u32 T, u32 d, then T*d f64 user codewords and T*d f64
// item codewords, both row-major.
struct FederatedMessage {
  int round = 0;
  std::string market_id;
  Matrix user_codebook;
  Matrix item_codebook;

  long long parameter_count() const {
    return static_cast<long long>(user_codebook.size() + item_codebook.size());
  }
  std::string serialize() const;
  static FederatedMessage deserialize(std::string_view bytes);
};

enum class Weighting { kUniform, kBySize };
Weighting parse_weighting(const std::string& s);
const char* to_string(Weighting w);

struct LedgerEntry {
  int round = 0;
  int clients = 0;
  long long params_per_client = 0;
  long long bytes_per_client = 0;
  long long total_params = 0;
};

class Server {
 public:
  // Federated codebooks start as seeded Gaussians shared with every client.
  Server(int codebook_size, int latent_dim, int expected_clients, double init_std,
         std::uint64_t seed);

  const Matrix& user_codebook() const { return user_; }
  const Matrix& item_codebook() const { return item_; }
  void set_codebooks(Matrix user, Matrix item);
  int expected_clients() const { return expected_clients_; }
  int rounds_completed() const { return rounds_completed_; }
  const std::vector<LedgerEntry>& ledger() const { return ledger_; }

  // Index-aligned (optionally weighted) mean of all client codebooks. Needs
  // one message per expected client, all from the same round and shape.
  void aggregate(std::span<const FederatedMessage> messages,
                 std::span<const double> weights = {}, long long bytes_per_client = 0);

 private:
  int codebook_size_;
  int latent_dim_;
  int expected_clients_;
  Matrix user_;
  Matrix item_;
  int rounds_completed_ = 0;
  std::vector<LedgerEntry> ledger_;
};

// Everything a market keeps private.
struct ClientData {
  std::string market_id;
  cf::EmbeddingTable embeddings;
  std::vector<std::pair<int, int>> positives;  // quantizer training pairs
  std::size_t num_interactions = 0;            // weight for size-weighted means
};

class Client {
 public:
  Client(ClientData data, const quant::StreamConfig& stream,
         const quant::QuantizerTrainConfig& train, std::uint64_t seed);

  const ClientData& data() const { return data_; }
  const std::string& market_id() const { return data_.market_id; }
  quant::MarketQuantizer& quantizer() { return quantizer_; }
  const quant::MarketQuantizer& quantizer() const { return quantizer_; }

  // Overwrites the federated codebooks with the global ones. On the first
  // call the local codebooks are drawn from this client's residuals.
  void receive(const Matrix& user_fed, const Matrix& item_fed, bool init_local = true);
  // Local-codebook-only epochs (no-op on single-level streams).
  quant::LossReport adapt(int epochs);
  // Epochs updating every quantizer parameter.
  quant::LossReport train(int epochs);
  FederatedMessage upload(int round, const LdpConfig& ldp);
  quant::TokenTable tokenize() const;

 private:
  ClientData data_;
  quant::MarketQuantizer quantizer_;
  std::uint64_t seed_;
  Rng rng_;
  bool local_initialised_ = false;
};

struct FederationConfig {
  int rounds = 10;
  int local_epochs = 1;
  int adapt_epochs = 1;
  LdpConfig ldp;
  bool aggregate = true;  // false: clients never exchange after the shared init
  Weighting weighting = Weighting::kUniform;
  bool init_local_from_data = true;

  void validate() const;
};

struct RoundReport {
  int round = 0;
  std::vector<std::string> markets;
  std::vector<quant::LossReport> adapt_loss;
  std::vector<quant::LossReport> local_loss;
  std::vector<double> fed_usage;  // fraction of federated user codes in use
  long long params_per_client = 0;
  long long bytes_per_client = 0;

  nlohmann::json to_json() const;
};

// Broadcast, adapt, local training, perturbed upload and aggregation.
RoundReport run_round(Server& server, std::span<const std::unique_ptr<Client>> clients,
                      const FederationConfig& config, int round);

// Shared initial broadcast, `rounds` rounds, then a final broadcast and
// adaptation so every client tokenises against the last global codebooks.
std::vector<RoundReport> run_federation(
    Server& server, std::span<const std::unique_ptr<Client>> clients,
    const FederationConfig& config,
    const std::function<void(const RoundReport&, const Server&)>& on_round = {});

// Nearest-codeword (Euclidean) assignment, ties to the lowest index.
std::vector<int> nearest_codewords(const Matrix& x, const Matrix& codebook);
// Gradient of sum_n ||c_{k(n)} - x_n||^2 with respect to every codeword.
Matrix assignment_gradient(const Matrix& x, const Matrix& codebook);
// Max over codewords of || grad on the union of shards - sum of per-shard
// grads ||. Zero up to rounding when the global gradient decomposes.
double decomposition_gap(std::span<const Matrix> shards, const Matrix& codebook);

struct CommCost {
  long long codebook_params_per_round = 0;  // one client upload: 2 * T * d
  long long codebook_params_total = 0;      // over all rounds
  long long backbone_params_per_round = 0;  // full dense model upload
  long long backbone_params_total = 0;
  double reduction_factor = 0;  // backbone / codebook

  nlohmann::json to_json() const;
};
CommCost comm_cost_report(int codebook_size, int latent_dim, int rounds,
                          const nn::MlpSpec& backbone);

}  // namespace fedcq::fed

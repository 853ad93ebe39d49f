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

#include "fedcq/federation.hpp"

#include <cmath>
#include <cstring>

#include "fedcq/error.hpp"
#include "fedcq/nn/checkpoint.hpp"

namespace fedcq::fed {
namespace {

constexpr std::string_view kMessageMagic = "FCQMSG01";
constexpr std::uint32_t kMessageVersion = 1;

nlohmann::json loss_json(const quant::LossReport& r) {
  return {{"total", r.total}, {"rec", r.rec},         {"code_u", r.code_u},
          {"code_i", r.code_i}, {"align_u", r.align_u}, {"align_i", r.align_i}};
}

}  // namespace

void LdpConfig::validate() const {
  if (!(scale >= 0) || !std::isfinite(scale)) {
    throw ConfigError("Laplace scale must be a finite value >= 0");
  }
}

Matrix ldp_perturb(const quant::Codebook& codebook, const LdpConfig& config, Rng& rng) {
  if (codebook.role() != quant::CodebookRole::kFederated) {
    throw PrivacyWallError(std::string("refusing to release the local ") +
                           quant::to_string(codebook.entity()) + " codebook");
  }
  config.validate();
  Matrix out = codebook.codewords();
  if (!config.enabled || config.scale == 0) return out;
  for (Eigen::Index k = 0; k < out.size(); ++k) out.data()[k] += laplace(rng, config.scale);
  return out;
}

std::string FederatedMessage::serialize() const {
  if (user_codebook.rows() != item_codebook.rows() ||
      user_codebook.cols() != item_codebook.cols()) {
    throw ShapeError("user and item codebooks differ in shape");
  }
  nn::ByteWriter w;
  w.raw(kMessageMagic);
  w.u32(kMessageVersion);
  w.u32(static_cast<std::uint32_t>(round));
  w.str(market_id);
  w.u32(static_cast<std::uint32_t>(user_codebook.rows()));
  w.u32(static_cast<std::uint32_t>(user_codebook.cols()));
  for (const Matrix* m : {&user_codebook, &item_codebook}) {
    w.raw(std::string_view(reinterpret_cast<const char*>(m->data()),
                           static_cast<std::size_t>(m->size()) * sizeof(double)));
  }
  return w.take();
}

FederatedMessage FederatedMessage::deserialize(std::string_view bytes) {
  nn::ByteReader r(bytes);
  if (r.raw(kMessageMagic.size()) != kMessageMagic) throw ParseError("not a federated message");
  if (const auto v = r.u32(); v != kMessageVersion) {
    throw ParseError("unsupported message version " + std::to_string(v));
  }
  FederatedMessage m;
  m.round = static_cast<int>(r.u32());
  m.market_id = r.str();
  const auto T = static_cast<Eigen::Index>(r.u32());
  const auto d = static_cast<Eigen::Index>(r.u32());
  for (Matrix* c : {&m.user_codebook, &m.item_codebook}) {
    c->resize(T, d);
    const auto raw = r.raw(static_cast<std::size_t>(T * d) * sizeof(double));
    std::memcpy(c->data(), raw.data(), raw.size());
  }
  if (!r.done()) throw ParseError("trailing bytes in federated message");
  return m;
}

Weighting parse_weighting(const std::string& s) {
  if (s == "uniform") return Weighting::kUniform;
  if (s == "size") return Weighting::kBySize;
  throw ConfigError("unknown weighting '" + s + "' (expected uniform or size)");
}

const char* to_string(Weighting w) { return w == Weighting::kUniform ? "uniform" : "size"; }

Server::Server(int codebook_size, int latent_dim, int expected_clients, double init_std,
               std::uint64_t seed)
    : codebook_size_(codebook_size), latent_dim_(latent_dim), expected_clients_(expected_clients) {
  if (codebook_size < 2) throw ConfigError("codebook size must be at least 2");
  if (latent_dim < 1) throw ConfigError("latent width must be positive");
  if (expected_clients < 1) throw ConfigError("federation needs at least one client");
  if (!(init_std > 0)) throw ConfigError("codebook init std must be positive");
  Rng rng = make_rng(seed, "server/init");
  for (Matrix* c : {&user_, &item_}) {
    c->resize(codebook_size, latent_dim);
    for (Eigen::Index k = 0; k < c->size(); ++k) c->data()[k] = init_std * standard_normal(rng);
  }
}

void Server::set_codebooks(Matrix user, Matrix item) {
  for (const Matrix* c : {&user, &item}) {
    if (c->rows() != codebook_size_ || c->cols() != latent_dim_) {
      throw ShapeError("global codebook must be " + std::to_string(codebook_size_) + "x" +
                       std::to_string(latent_dim_));
    }
  }
  user_ = std::move(user);
  item_ = std::move(item);
}

void Server::aggregate(std::span<const FederatedMessage> messages,
                       std::span<const double> weights, long long bytes_per_client) {
  if (static_cast<int>(messages.size()) < expected_clients_) {
    throw Error("aggregation needs " + std::to_string(expected_clients_) +
                " client messages, received " + std::to_string(messages.size()));
  }
  if (!weights.empty() && weights.size() != messages.size()) {
    throw ConfigError("one aggregation weight per message is required");
  }
  const int round = messages.front().round;
  for (const auto& m : messages) {
    if (m.round != round) {
      throw Error("messages from rounds " + std::to_string(round) + " and " +
                  std::to_string(m.round) + " cannot be aggregated together");
    }
    for (const Matrix* c : {&m.user_codebook, &m.item_codebook}) {
      if (c->rows() != codebook_size_ || c->cols() != latent_dim_) {
        throw ShapeError("client " + m.market_id + " sent a " + std::to_string(c->rows()) + "x" +
                         std::to_string(c->cols()) + " codebook, expected " +
                         std::to_string(codebook_size_) + "x" + std::to_string(latent_dim_));
      }
    }
  }
  // Running mean: exact when every client sends the same codebook.
  Matrix user = messages.front().user_codebook;
  Matrix item = messages.front().item_codebook;
  double total_w = weights.empty() ? 1.0 : weights.front();
  for (std::size_t k = 1; k < messages.size(); ++k) {
    const double w = weights.empty() ? 1.0 : weights[k];
    if (!(w >= 0)) throw ConfigError("aggregation weights must be >= 0");
    total_w += w;
    if (total_w == 0) continue;
    const double f = w / total_w;
    user += f * (messages[k].user_codebook - user);
    item += f * (messages[k].item_codebook - item);
  }
  if (total_w <= 0) throw ConfigError("aggregation weights sum to zero");
  user_ = std::move(user);
  item_ = std::move(item);
  ++rounds_completed_;
  const long long per_client = messages.front().parameter_count();
  ledger_.push_back({round, static_cast<int>(messages.size()), per_client, bytes_per_client,
                     per_client * static_cast<long long>(messages.size())});
}

Client::Client(ClientData data, const quant::StreamConfig& stream,
               const quant::QuantizerTrainConfig& train, std::uint64_t seed)
    : data_(std::move(data)),
      quantizer_(data_.market_id, stream, train, seed),
      seed_(seed),
      rng_(make_rng(seed, "client/train")) {}

void Client::receive(const Matrix& user_fed, const Matrix& item_fed, bool init_local) {
  quantizer_.users().fed().set_codewords(user_fed);
  quantizer_.items().fed().set_codewords(item_fed);
  if (!local_initialised_) {
    if (init_local) {
      Rng rng = make_rng(seed_, "client/local-init");
      quantizer_.init_local_from_data(data_.embeddings, rng);
    }
    local_initialised_ = true;
  }
}

quant::LossReport Client::adapt(int epochs) {
  quant::LossReport last;
  if (!quantizer_.users().two_level()) return last;
  quantizer_.set_scope(quant::TrainScope::kLocalCodebooksOnly);
  for (int e = 0; e < epochs; ++e) last = quantizer_.train_epoch(data_.embeddings, data_.positives, rng_);
  quantizer_.set_scope(quant::TrainScope::kAll);
  return last;
}

quant::LossReport Client::train(int epochs) {
  quant::LossReport last;
  quantizer_.set_scope(quant::TrainScope::kAll);
  for (int e = 0; e < epochs; ++e) last = quantizer_.train_epoch(data_.embeddings, data_.positives, rng_);
  return last;
}

FederatedMessage Client::upload(int round, const LdpConfig& ldp) {
  Rng rng = make_rng(seed_, "client/ldp", static_cast<std::uint64_t>(round));
  FederatedMessage m;
  m.round = round;
  m.market_id = data_.market_id;
  m.user_codebook = ldp_perturb(quantizer_.users().fed(), ldp, rng);
  m.item_codebook = ldp_perturb(quantizer_.items().fed(), ldp, rng);
  return m;
}

quant::TokenTable Client::tokenize() const { return quantizer_.tokenize(data_.embeddings); }

void FederationConfig::validate() const {
  if (rounds < 0 || local_epochs < 0 || adapt_epochs < 0) {
    throw ConfigError("rounds and epoch counts must be >= 0");
  }
  ldp.validate();
}

nlohmann::json RoundReport::to_json() const {
  nlohmann::json clients = nlohmann::json::array();
  for (std::size_t k = 0; k < markets.size(); ++k) {
    clients.push_back({{"market", markets[k]},
                       {"adapt_loss", loss_json(adapt_loss[k])},
                       {"local_loss", loss_json(local_loss[k])},
                       {"fed_user_code_usage", fed_usage[k]}});
  }
  return {{"round", round},
          {"params_per_client", params_per_client},
          {"bytes_per_client", bytes_per_client},
          {"clients", clients}};
}

RoundReport run_round(Server& server, std::span<const std::unique_ptr<Client>> clients,
                      const FederationConfig& config, int round) {
  RoundReport report;
  report.round = round;
  std::vector<FederatedMessage> received;
  std::vector<double> weights;
  for (const auto& c : clients) {
    if (config.aggregate) {
      c->receive(server.user_codebook(), server.item_codebook(), config.init_local_from_data);
    }
    report.markets.push_back(c->market_id());
    report.adapt_loss.push_back(c->adapt(config.adapt_epochs));
    report.local_loss.push_back(c->train(config.local_epochs));
    const auto usage = quant::encode_all(c->quantizer().users(), c->data().embeddings.users);
    std::vector<char> seen(static_cast<std::size_t>(server.user_codebook().rows()), 0);
    int used = 0;
    for (const auto& t : usage) used += seen[static_cast<std::size_t>(t.fed)]++ == 0;
    report.fed_usage.push_back(static_cast<double>(used) / static_cast<double>(seen.size()));
    if (config.aggregate) {
      // The message crosses the wire as bytes only.
      const std::string bytes = c->upload(round, config.ldp).serialize();
      report.bytes_per_client = static_cast<long long>(bytes.size());
      received.push_back(FederatedMessage::deserialize(bytes));
      report.params_per_client = received.back().parameter_count();
      weights.push_back(static_cast<double>(c->data().num_interactions));
    }
  }
  if (config.aggregate) {
    server.aggregate(received,
                     config.weighting == Weighting::kBySize ? std::span<const double>(weights)
                                                             : std::span<const double>(),
                     report.bytes_per_client);
  }
  return report;
}

std::vector<RoundReport> run_federation(Server& server,
                                        std::span<const std::unique_ptr<Client>> clients,
                                        const FederationConfig& config,
                                        const std::function<void(const RoundReport&, const Server&)>& on_round) {
  config.validate();
  if (static_cast<int>(clients.size()) != server.expected_clients()) {
    throw ConfigError("server expects " + std::to_string(server.expected_clients()) +
                      " clients, got " + std::to_string(clients.size()));
  }
  for (const auto& c : clients) {
    c->receive(server.user_codebook(), server.item_codebook(), config.init_local_from_data);
  }
  std::vector<RoundReport> reports;
  for (int r = 1; r <= config.rounds; ++r) {
    reports.push_back(run_round(server, clients, config, r));
    if (on_round) on_round(reports.back(), server);
  }
  if (config.rounds > 0) {
    for (const auto& c : clients) {
      if (config.aggregate) c->receive(server.user_codebook(), server.item_codebook());
      c->adapt(config.adapt_epochs);
    }
  }
  return reports;
}

std::vector<int> nearest_codewords(const Matrix& x, const Matrix& codebook) {
  if (x.cols() != codebook.cols()) throw ShapeError("nearest_codewords: width mismatch");
  std::vector<int> idx(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index n = 0; n < x.rows(); ++n) {
    Eigen::Index best = 0;
    double best_d = (codebook.row(0) - x.row(n)).squaredNorm();
    for (Eigen::Index j = 1; j < codebook.rows(); ++j) {
      const double dist = (codebook.row(j) - x.row(n)).squaredNorm();
      if (dist < best_d) {
        best_d = dist;
        best = j;
      }
    }
    idx[static_cast<std::size_t>(n)] = static_cast<int>(best);
  }
  return idx;
}

Matrix assignment_gradient(const Matrix& x, const Matrix& codebook) {
  Matrix grad = Matrix::Zero(codebook.rows(), codebook.cols());
  const auto idx = nearest_codewords(x, codebook);
  for (Eigen::Index n = 0; n < x.rows(); ++n) {
    const int j = idx[static_cast<std::size_t>(n)];
    grad.row(j) += 2.0 * (codebook.row(j) - x.row(n));
  }
  return grad;
}

double decomposition_gap(std::span<const Matrix> shards, const Matrix& codebook) {
  if (shards.empty()) throw EmptyDatasetError("no shards");
  Eigen::Index rows = 0;
  for (const auto& s : shards) rows += s.rows();
  Matrix all(rows, codebook.cols());
  Eigen::Index at = 0;
  for (const auto& s : shards) {
    all.middleRows(at, s.rows()) = s;
    at += s.rows();
  }
  Matrix summed = Matrix::Zero(codebook.rows(), codebook.cols());
  for (const auto& s : shards) summed += assignment_gradient(s, codebook);
  return (assignment_gradient(all, codebook) - summed).rowwise().norm().maxCoeff();
}

nlohmann::json CommCost::to_json() const {
  return {{"codebook_params_per_round", codebook_params_per_round},
          {"codebook_params_total", codebook_params_total},
          {"backbone_params_per_round", backbone_params_per_round},
          {"backbone_params_total", backbone_params_total},
          {"reduction_factor", reduction_factor}};
}

CommCost comm_cost_report(int codebook_size, int latent_dim, int rounds,
                          const nn::MlpSpec& backbone) {
  if (codebook_size < 1 || latent_dim < 1 || rounds < 0) {
    throw ConfigError("invalid communication-cost arguments");
  }
  CommCost c;
  c.codebook_params_per_round = 2LL * codebook_size * latent_dim;
  c.codebook_params_total = c.codebook_params_per_round * rounds;
  c.backbone_params_per_round = backbone.parameter_count();
  c.backbone_params_total = c.backbone_params_per_round * rounds;
  c.reduction_factor = static_cast<double>(c.backbone_params_per_round) /
                       static_cast<double>(c.codebook_params_per_round);
  return c;
}

}  // namespace fedcq::fed

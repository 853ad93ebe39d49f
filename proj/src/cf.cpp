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

#include "fedcq/cf.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "fedcq/error.hpp"
#include "fedcq/nn/adam.hpp"
#include "fedcq/nn/checkpoint.hpp"
#include "fedcq/rng.hpp"

namespace fedcq::cf {
namespace {

constexpr std::string_view kEmbeddingMagic = "FCQEMB01";
constexpr std::uint32_t kEmbeddingVersion = 1;

double log_sigmoid(double x) {
  return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

// Plain (tape-free) BPR loss on propagated embeddings.
double bpr_value(const EmbeddingTable& e, std::span<const int> users,
                 std::span<const int> pos, std::span<const int> neg) {
  if (users.empty()) return 0.0;
  double total = 0;
  for (std::size_t k = 0; k < users.size(); ++k) {
    const double diff = e.users.row(users[k]).dot(e.items.row(pos[k])) -
                        e.users.row(users[k]).dot(e.items.row(neg[k]));
    total -= log_sigmoid(diff);
  }
  return total / static_cast<double>(users.size());
}

int sample_negative(Rng& rng, int num_items, const std::vector<std::vector<int>>& seen, int user) {
  const auto& s = seen[static_cast<std::size_t>(user)];
  int j = 0;
  for (int attempt = 0; attempt < 16; ++attempt) {
    j = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(num_items)));
    if (!std::binary_search(s.begin(), s.end(), j)) break;
  }
  return j;
}

}  // namespace

Matrix EmbeddingTable::stacked() const {
  Matrix s(users.rows() + items.rows(), users.cols());
  s.topRows(users.rows()) = users;
  s.bottomRows(items.rows()) = items;
  return s;
}

EmbeddingTable EmbeddingTable::from_stacked(std::string market_id, const Matrix& stacked,
                                            int num_users) {
  EmbeddingTable t;
  t.market_id = std::move(market_id);
  t.users = stacked.topRows(num_users);
  t.items = stacked.bottomRows(stacked.rows() - num_users);
  return t;
}

BipartiteGraph::BipartiteGraph(int num_users, int num_items,
                               std::vector<std::pair<int, int>> edges)
    : num_users_(num_users), num_items_(num_items), edges_(std::move(edges)) {
  if (num_users < 0 || num_items < 0) throw ConfigError("negative graph size");
  std::sort(edges_.begin(), edges_.end());
  edges_.erase(std::unique(edges_.begin(), edges_.end()), edges_.end());
  user_degree_.assign(static_cast<std::size_t>(num_users), 0);
  item_degree_.assign(static_cast<std::size_t>(num_items), 0);
  for (const auto& [u, i] : edges_) {
    if (u < 0 || u >= num_users || i < 0 || i >= num_items) {
      throw Error("graph edge (" + std::to_string(u) + ", " + std::to_string(i) +
                  ") outside the node range");
    }
    ++user_degree_[static_cast<std::size_t>(u)];
    ++item_degree_[static_cast<std::size_t>(i)];
  }
  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(edges_.size() * 2);
  for (const auto& [u, i] : edges_) {
    const double w = 1.0 / std::sqrt(static_cast<double>(user_degree_[static_cast<std::size_t>(u)]) *
                                     item_degree_[static_cast<std::size_t>(i)]);
    trips.emplace_back(u, num_users + i, w);
    trips.emplace_back(num_users + i, u, w);
  }
  adjacency_.resize(num_users + num_items, num_users + num_items);
  adjacency_.setFromTriplets(trips.begin(), trips.end());
}

BipartiteGraph BipartiteGraph::from_dataset(const data::MarketDataset& d) {
  std::vector<std::pair<int, int>> edges;
  for (std::size_t k = 0; k < d.interactions.size(); ++k) {
    const auto& r = d.interactions[k];
    if (r.label != 1) continue;
    if (d.has_ctr_split() && d.ctr_split[k] != data::Split::kTrain) continue;
    if (d.has_cf_split() && d.cf_holdout[k]) continue;
    edges.emplace_back(r.user, r.item);
  }
  return BipartiteGraph(d.num_users, d.num_items, std::move(edges));
}

EmbeddingTable propagate(const BipartiteGraph& g, const EmbeddingTable& e0, int layers) {
  if (layers < 0) throw ConfigError("propagation layers must be >= 0");
  if (e0.users.rows() != g.num_users() || e0.items.rows() != g.num_items()) {
    throw ShapeError("embedding table does not match the graph size");
  }
  Matrix layer = e0.stacked();
  Matrix acc = layer;
  for (int l = 0; l < layers; ++l) {
    layer = g.adjacency() * layer;
    acc += layer;
  }
  acc /= static_cast<double>(layers + 1);
  return EmbeddingTable::from_stacked(e0.market_id, acc, g.num_users());
}

nn::Var propagate(nn::Tape& tape, const BipartiteGraph& g, nn::Var stacked, int layers) {
  if (layers < 0) throw ConfigError("propagation layers must be >= 0");
  nn::Var layer = stacked;
  nn::Var acc = stacked;
  for (int l = 0; l < layers; ++l) {
    layer = tape.spmm(g.adjacency(), layer);
    acc = tape.add(acc, layer);
  }
  return tape.scale(acc, 1.0 / static_cast<double>(layers + 1));
}

nn::Var bpr_loss(nn::Tape& tape, nn::Var stacked, int num_users, std::span<const int> users,
                 std::span<const int> positives, std::span<const int> negatives) {
  if (users.size() != positives.size() || users.size() != negatives.size()) {
    throw ShapeError("bpr_loss: triple components differ in length");
  }
  std::vector<int> pos_rows(positives.begin(), positives.end());
  std::vector<int> neg_rows(negatives.begin(), negatives.end());
  for (auto& r : pos_rows) r += num_users;
  for (auto& r : neg_rows) r += num_users;
  const nn::Var eu = tape.gather_rows(stacked, users);
  const nn::Var diff = tape.sub(tape.row_dot(eu, tape.gather_rows(stacked, pos_rows)),
                                tape.row_dot(eu, tape.gather_rows(stacked, neg_rows)));
  const std::vector<double> ones(users.size(), 1.0);
  return tape.mean(tape.bce_with_logits(diff, ones));
}

CfResult train_cf(const data::MarketDataset& d, const CfConfig& config) {
  if (config.dim <= 0 || config.batch_size <= 0 || config.epochs < 0 ||
      config.negatives_per_positive <= 0) {
    throw ConfigError("invalid CF configuration");
  }
  const BipartiteGraph graph = BipartiteGraph::from_dataset(d);
  if (config.require_all_users) {
    for (int u = 0; u < graph.num_users(); ++u) {
      if (graph.user_degree(u) == 0) {
        throw Error("user " + std::to_string(u) + " of market " + d.market_id +
                    " has no CF training items");
      }
    }
  }
  if (graph.edges().empty()) throw EmptyDatasetError("market " + d.market_id + " has no CF edges");

  Rng init_rng = make_rng(config.seed, "cf/init");
  Matrix init(graph.num_users() + graph.num_items(), config.dim);
  for (Eigen::Index k = 0; k < init.size(); ++k) {
    init.data()[k] = config.init_std * standard_normal(init_rng);
  }
  nn::Param e0("cf.embeddings", init);
  nn::Adam opt({&e0}, nn::AdamConfig{.lr = config.lr, .l2 = config.l2});

  // Everything the user has interacted with positively (train or held out)
  // is excluded from negative sampling.
  std::vector<std::vector<int>> seen(static_cast<std::size_t>(graph.num_users()));
  std::vector<int> ho_users, ho_pos, ho_neg;
  for (const auto& [u, i] : graph.edges()) seen[static_cast<std::size_t>(u)].push_back(i);
  for (std::size_t k = 0; k < d.interactions.size(); ++k) {
    if (d.has_cf_split() && d.cf_holdout[k]) {
      const auto& r = d.interactions[k];
      seen[static_cast<std::size_t>(r.user)].push_back(r.item);
      ho_users.push_back(r.user);
      ho_pos.push_back(r.item);
    }
  }
  for (auto& s : seen) std::sort(s.begin(), s.end());
  Rng ho_rng = make_rng(config.seed, "cf/holdout-negatives");
  for (int u : ho_users) ho_neg.push_back(sample_negative(ho_rng, graph.num_items(), seen, u));

  CfResult result;
  auto holdout = [&]() {
    const EmbeddingTable e = propagate(
        graph, EmbeddingTable::from_stacked(d.market_id, e0.value, graph.num_users()),
        config.layers);
    return bpr_value(e, ho_users, ho_pos, ho_neg);
  };
  result.holdout_loss.push_back(holdout());
  Matrix best = e0.value;
  double best_loss = result.holdout_loss[0];

  Rng rng = make_rng(config.seed, "cf/train");
  std::vector<std::size_t> order(graph.edges().size());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      std::vector<int> us, ps, ns;
      for (std::size_t k = start; k < end; ++k) {
        const auto [u, i] = graph.edges()[order[k]];
        for (int n = 0; n < config.negatives_per_positive; ++n) {
          us.push_back(u);
          ps.push_back(i);
          ns.push_back(sample_negative(rng, graph.num_items(), seen, u));
        }
      }
      e0.zero_grad();
      nn::Tape tape;
      const nn::Var final_emb = propagate(tape, graph, tape.param(e0), config.layers);
      const nn::Var loss = bpr_loss(tape, final_emb, graph.num_users(), us, ps, ns);
      tape.backward(loss);
      opt.step();
      epoch_loss += tape.scalar(loss);
      ++batches;
    }
    result.train_loss.push_back(epoch_loss / std::max(batches, 1));
    result.holdout_loss.push_back(holdout());
    if (result.holdout_loss.back() < best_loss) {
      best_loss = result.holdout_loss.back();
      best = e0.value;
      result.best_epoch = epoch + 1;
    }
  }
  const bool select = config.keep_best_holdout && !ho_users.empty();
  if (!select) result.best_epoch = config.epochs;
  result.base =
      EmbeddingTable::from_stacked(d.market_id, select ? best : e0.value, graph.num_users());
  result.propagated = propagate(graph, result.base, config.layers);
  return result;
}

void export_embeddings(const std::filesystem::path& path, const EmbeddingTable& table) {
  if (table.users.cols() != table.items.cols()) {
    throw ShapeError("user and item embeddings have different widths");
  }
  nn::ByteWriter w;
  w.raw(kEmbeddingMagic);
  w.u32(kEmbeddingVersion);
  w.u32(static_cast<std::uint32_t>(table.dim()));
  w.u64(static_cast<std::uint64_t>(table.users.rows()));
  w.u64(static_cast<std::uint64_t>(table.items.rows()));
  w.str(table.market_id);
  w.raw(std::string_view(reinterpret_cast<const char*>(table.users.data()),
                         static_cast<std::size_t>(table.users.size()) * sizeof(double)));
  w.raw(std::string_view(reinterpret_cast<const char*>(table.items.data()),
                         static_cast<std::size_t>(table.items.size()) * sizeof(double)));
  nn::write_file(path, w.take());
}

EmbeddingTable import_embeddings(const std::filesystem::path& path,
                                 std::optional<int> expected_dim) {
  const std::string bytes = nn::read_file(path);
  nn::ByteReader r(bytes);
  if (r.raw(kEmbeddingMagic.size()) != kEmbeddingMagic) {
    throw ParseError(path.string() + " is not a fedcq embedding file");
  }
  if (const auto v = r.u32(); v != kEmbeddingVersion) {
    throw ParseError("unsupported embedding file version " + std::to_string(v));
  }
  const int dim = static_cast<int>(r.u32());
  if (expected_dim && *expected_dim != dim) {
    throw ShapeError("embedding dimension mismatch: expected d=" + std::to_string(*expected_dim) +
                     ", found d=" + std::to_string(dim));
  }
  const auto nu = static_cast<Eigen::Index>(r.u64());
  const auto ni = static_cast<Eigen::Index>(r.u64());
  EmbeddingTable t;
  t.market_id = r.str();
  auto read_rows = [&](Eigen::Index rows) {
    Matrix m(rows, dim);
    const auto raw = r.raw(static_cast<std::size_t>(rows * dim) * sizeof(double));
    std::memcpy(m.data(), raw.data(), raw.size());
    return m;
  };
  t.users = read_rows(nu);
  t.items = read_rows(ni);
  if (!r.done()) throw ParseError("trailing bytes in " + path.string());
  return t;
}

}  // namespace fedcq::cf

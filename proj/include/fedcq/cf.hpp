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
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedcq/data.hpp"
#include "fedcq/nn/tape.hpp"
#include "fedcq/nn/tensor.hpp"

namespace fedcq::cf {

using nn::Matrix;

// Per-market user and item embeddings (row u of `users` is user u).
struct EmbeddingTable {
  std::string market_id;
  Matrix users;
  Matrix items;

  int dim() const { return static_cast<int>(users.cols()); }
  // Users stacked above items, the layout propagation works on.
  Matrix stacked() const;
  static EmbeddingTable from_stacked(std::string market_id, const Matrix& stacked,
                                     int num_users);
};

// User-item interaction graph with symmetric normalisation
// 1 / sqrt(deg(u) * deg(i)) on every edge.
class BipartiteGraph {
 public:
  BipartiteGraph(int num_users, int num_items, std::vector<std::pair<int, int>> edges);

  // Positive CF-training edges of a dataset: label 1, CTR-train split when a
  // split exists, and not held out by leave-one-out.
  static BipartiteGraph from_dataset(const data::MarketDataset& d);

  int num_users() const { return num_users_; }
  int num_items() const { return num_items_; }
  // Deduplicated, sorted (user, item) edges.
  const std::vector<std::pair<int, int>>& edges() const { return edges_; }
  int user_degree(int u) const { return user_degree_[static_cast<std::size_t>(u)]; }
  int item_degree(int i) const { return item_degree_[static_cast<std::size_t>(i)]; }
  // (users + items) square normalised adjacency.
  const nn::SparseMatrix& adjacency() const { return adjacency_; }

 private:
  int num_users_;
  int num_items_;
  std::vector<std::pair<int, int>> edges_;
  std::vector<int> user_degree_;
  std::vector<int> item_degree_;
  nn::SparseMatrix adjacency_;
};

// Mean of the layer-0..L embeddings, layer l+1 = A * layer l.
EmbeddingTable propagate(const BipartiteGraph& g, const EmbeddingTable& e0, int layers);
nn::Var propagate(nn::Tape& tape, const BipartiteGraph& g, nn::Var stacked, int layers);

// Mean over triples of -log sigmoid(<e_u, e_pos> - <e_u, e_neg>), where rows
// come from the stacked (users then items) embedding matrix.
nn::Var bpr_loss(nn::Tape& tape, nn::Var stacked, int num_users, std::span<const int> users,
                 std::span<const int> positives, std::span<const int> negatives);

struct CfConfig {
  int dim = 16;
  int layers = 2;
  double lr = 1e-2;
  double l2 = 1e-4;
  int epochs = 40;
  int batch_size = 512;
  int negatives_per_positive = 1;
  double init_std = 0.1;
  // When set, a user without CF-training positives is an error; otherwise the
  // user keeps its initial embedding.
  bool require_all_users = true;
  // Return the embeddings of the epoch with the lowest held-out loss (epoch 0
  // is the initialisation) instead of the last epoch's.
  bool keep_best_holdout = true;
  std::uint64_t seed = 0;
};

struct CfResult {
  EmbeddingTable base;        // trained layer-0 embeddings
  EmbeddingTable propagated;  // the collaborative embeddings handed downstream
  // Mean BPR loss per epoch (train) and on held-out items; holdout_loss[0] is
  // measured before the first epoch.
  std::vector<double> train_loss;
  std::vector<double> holdout_loss;
  int best_epoch = 0;  // epoch whose embeddings were returned
};

CfResult train_cf(const data::MarketDataset& d, const CfConfig& config);

// Embedding file (version 1, little-endian):
//   "FCQEMB01", u32 version, u32 dim, u64 num_users, u64 num_items,
//   u32 len + market_id bytes, users row-major f64, items row-major f64.
// The same file is used for exporting embeddings to external plotting tools.
void export_embeddings(const std::filesystem::path& path, const EmbeddingTable& table);
EmbeddingTable import_embeddings(const std::filesystem::path& path,
                                 std::optional<int> expected_dim = std::nullopt);

}  // namespace fedcq::cf

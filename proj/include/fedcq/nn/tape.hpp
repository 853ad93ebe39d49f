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
#include <span>
#include <vector>

#include <Eigen/SparseCore>

#include "fedcq/nn/tensor.hpp"

namespace fedcq::nn {

using SparseMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;

// Handle to a value recorded on a Tape.
struct Var {
  std::int32_t id = -1;
  bool valid() const { return id >= 0; }
};

enum class Activation { kIdentity, kRelu, kSigmoid };

// How cosine similarity treats an all-zero row on the left-hand side.
enum class ZeroNormPolicy {
  kThrow,        // cosine is undefined: raise
  kDotFallback,  // use the raw dot product for that row (which is zero)
};

// Reverse-mode gradient tape over dense matrices. One tape records one
// forward computation; backward() pushes d(loss)/d(node) to every node and
// accumulates into the bound Param::grad of every parameter leaf. A tape is
// owned by a single model step; there is no global graph state.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  Var param(Param& p);

  const Matrix& value(Var v) const;
  const Matrix& grad(Var v) const;
  double scalar(Var v) const;
  std::size_t size() const { return nodes_.size(); }

  Var matmul(Var a, Var b);
  Var spmm(const SparseMatrix& a, Var b);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  // x (n x m) + row (1 x m) broadcast over rows.
  Var add_row(Var x, Var row);
  Var scale(Var a, double s);
  Var activate(Var a, Activation act);
  Var relu(Var a) { return activate(a, Activation::kRelu); }
  Var sigmoid(Var a) { return activate(a, Activation::kSigmoid); }
  Var gather_rows(Var table, std::span<const int> rows);
  Var concat_cols(std::span<const Var> parts);
  // Pairwise cosine similarity between the rows of a (n x d) and b (m x d):
  // result is n x m. Zero rows in b always throw.
  Var cosine(Var a, Var b, ZeroNormPolicy policy = ZeroNormPolicy::kThrow);
  // Row-wise inner product of equally shaped a and b: n x 1.
  Var row_dot(Var a, Var b);
  // Per-row -log softmax(logits)[target]: n x 1.
  Var softmax_xent(Var logits, std::span<const int> targets);
  // Per-row binary cross-entropy of sigmoid(logit) against a 0/1 label.
  Var bce_with_logits(Var logits, std::span<const double> labels);
  Var mean(Var a);
  Var sum(Var a);
  // Forward value of `quantized`; backward routes the incoming gradient to
  // `latent` unchanged and nothing to `quantized`.
  Var straight_through(Var latent, Var quantized);

  // Requires a scalar (1 x 1) loss recorded on this tape. May be called once.
  void backward(Var loss);

 private:
  using Backward = std::function<void(Tape&, std::size_t)>;
  struct Node {
    Matrix value;
    Matrix grad;
    Param* param = nullptr;
    bool requires_grad = false;
    Backward backward;
  };

  Var push(Matrix value, bool requires_grad, Backward backward);
  Node& node(Var v);
  const Node& node(Var v) const;
  bool needs(Var v) const { return node(v).requires_grad; }
  Matrix& g(std::size_t i) { return nodes_[i].grad; }
  Matrix& g(Var v) { return nodes_[static_cast<std::size_t>(v.id)].grad; }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

}  // namespace fedcq::nn

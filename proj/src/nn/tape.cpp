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

#include "fedcq/nn/tape.hpp"

#include <cmath>
#include <string>

#include "fedcq/error.hpp"

namespace fedcq::nn {
namespace {

std::string dims(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shapes " + dims(a) + " and " + dims(b) + " differ");
  }
}

}  // namespace

Var Tape::push(Matrix value, bool requires_grad, Backward backward) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

Tape::Node& Tape::node(Var v) {
  if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
    throw Error("variable does not belong to this tape");
  }
  return nodes_[static_cast<std::size_t>(v.id)];
}

const Tape::Node& Tape::node(Var v) const {
  if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
    throw Error("variable does not belong to this tape");
  }
  return nodes_[static_cast<std::size_t>(v.id)];
}

Var Tape::constant(Matrix value) { return push(std::move(value), false, nullptr); }

Var Tape::param(Param& p) {
  Var v = push(p.value, true, nullptr);
  nodes_.back().param = &p;
  return v;
}

const Matrix& Tape::value(Var v) const { return node(v).value; }

const Matrix& Tape::grad(Var v) const {
  if (!backward_done_) throw Error("gradients are only available after backward()");
  return node(v).grad;
}

double Tape::scalar(Var v) const {
  const Matrix& m = value(v);
  if (m.size() != 1) throw ShapeError("expected a scalar, got " + dims(m));
  return m(0, 0);
}

Var Tape::matmul(Var a, Var b) {
  const Matrix& A = value(a);
  const Matrix& B = value(b);
  if (A.cols() != B.rows()) {
    throw ShapeError("matmul: " + dims(A) + " times " + dims(B));
  }
  return push(A * B, needs(a) || needs(b), [a, b](Tape& t, std::size_t self) {
    const Matrix& G = t.g(self);
    if (t.needs(a)) t.g(a).noalias() += G * t.value(b).transpose();
    if (t.needs(b)) t.g(b).noalias() += t.value(a).transpose() * G;
  });
}

Var Tape::spmm(const SparseMatrix& a, Var b) {
  const Matrix& B = value(b);
  if (a.cols() != B.rows()) {
    throw ShapeError("spmm: sparse " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " times " + dims(B));
  }
  const SparseMatrix* A = &a;
  return push(Matrix(a * B), needs(b), [A, b](Tape& t, std::size_t self) {
    t.g(b).noalias() += A->transpose() * t.g(self);
  });
}

Var Tape::add(Var a, Var b) {
  require_same_shape(value(a), value(b), "add");
  return push(value(a) + value(b), needs(a) || needs(b), [a, b](Tape& t, std::size_t self) {
    if (t.needs(a)) t.g(a) += t.g(self);
    if (t.needs(b)) t.g(b) += t.g(self);
  });
}

Var Tape::sub(Var a, Var b) {
  require_same_shape(value(a), value(b), "sub");
  return push(value(a) - value(b), needs(a) || needs(b), [a, b](Tape& t, std::size_t self) {
    if (t.needs(a)) t.g(a) += t.g(self);
    if (t.needs(b)) t.g(b) -= t.g(self);
  });
}

Var Tape::add_row(Var x, Var row) {
  const Matrix& X = value(x);
  const Matrix& R = value(row);
  if (R.rows() != 1 || R.cols() != X.cols()) {
    throw ShapeError("add_row: " + dims(X) + " plus row " + dims(R));
  }
  Matrix out = X;
  out.rowwise() += R.row(0);
  return push(std::move(out), needs(x) || needs(row), [x, row](Tape& t, std::size_t self) {
    if (t.needs(x)) t.g(x) += t.g(self);
    if (t.needs(row)) t.g(row) += t.g(self).colwise().sum();
  });
}

Var Tape::scale(Var a, double s) {
  return push(value(a) * s, needs(a), [a, s](Tape& t, std::size_t self) {
    t.g(a) += s * t.g(self);
  });
}

Var Tape::activate(Var a, Activation act) {
  switch (act) {
    case Activation::kIdentity:
      return a;
    case Activation::kRelu: {
      Matrix out = value(a).cwiseMax(0.0);
      return push(std::move(out), needs(a), [a](Tape& t, std::size_t self) {
        t.g(a).array() += (t.value(a).array() > 0.0).select(t.g(self).array(), 0.0);
      });
    }
    case Activation::kSigmoid: {
      Matrix out = (1.0 / (1.0 + (-value(a).array()).exp())).matrix();
      return push(std::move(out), needs(a), [a](Tape& t, std::size_t self) {
        const auto s = t.nodes_[self].value.array();
        t.g(a).array() += t.g(self).array() * s * (1.0 - s);
      });
    }
  }
  throw Error("unknown activation");
}

Var Tape::gather_rows(Var table, std::span<const int> rows) {
  const Matrix& T = value(table);
  Matrix out(static_cast<Eigen::Index>(rows.size()), T.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= T.rows()) {
      throw ShapeError("gather_rows: row " + std::to_string(rows[i]) + " outside table of " +
                       std::to_string(T.rows()) + " rows");
    }
    out.row(static_cast<Eigen::Index>(i)) = T.row(rows[i]);
  }
  std::vector<int> idx(rows.begin(), rows.end());
  return push(std::move(out), needs(table),
              [table, idx = std::move(idx)](Tape& t, std::size_t self) {
                Matrix& gt = t.g(table);
                const Matrix& G = t.g(self);
                for (std::size_t i = 0; i < idx.size(); ++i) {
                  gt.row(idx[i]) += G.row(static_cast<Eigen::Index>(i));
                }
              });
}

Var Tape::concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const Eigen::Index rows = value(parts[0]).rows();
  Eigen::Index cols = 0;
  bool any = false;
  for (Var p : parts) {
    if (value(p).rows() != rows) throw ShapeError("concat_cols: row counts differ");
    cols += value(p).cols();
    any |= needs(p);
  }
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  for (Var p : parts) {
    const Matrix& v = value(p);
    out.middleCols(at, v.cols()) = v;
    at += v.cols();
  }
  std::vector<Var> in(parts.begin(), parts.end());
  return push(std::move(out), any, [in = std::move(in)](Tape& t, std::size_t self) {
    Eigen::Index at = 0;
    for (Var p : in) {
      const Eigen::Index w = t.value(p).cols();
      if (t.needs(p)) t.g(p) += t.g(self).middleCols(at, w);
      at += w;
    }
  });
}

Var Tape::cosine(Var a, Var b, ZeroNormPolicy policy) {
  const Matrix& A = value(a);
  const Matrix& B = value(b);
  if (A.cols() != B.cols()) {
    throw ShapeError("cosine: widths " + std::to_string(A.cols()) + " and " +
                     std::to_string(B.cols()) + " differ");
  }
  Eigen::VectorXd na = A.rowwise().norm();
  const Eigen::VectorXd nb = B.rowwise().norm();
  std::vector<char> fallback(static_cast<std::size_t>(A.rows()), 0);
  for (Eigen::Index j = 0; j < nb.size(); ++j) {
    if (!(nb(j) > 0.0)) {
      throw NumericError("cosine: codeword/candidate row " + std::to_string(j) +
                         " has zero norm (collapsed vector)");
    }
  }
  for (Eigen::Index i = 0; i < na.size(); ++i) {
    if (!(na(i) > 0.0)) {
      if (policy == ZeroNormPolicy::kThrow) {
        throw NumericError("cosine: input row " + std::to_string(i) +
                           " has zero norm; cosine similarity is undefined");
      }
      fallback[static_cast<std::size_t>(i)] = 1;
      na(i) = 1.0;  // the row is zero, so it stays zero after "normalizing"
    }
  }
  Matrix An = A.array().colwise() / na.array();
  Matrix Bn = B.array().colwise() / nb.array();
  Matrix S = An * Bn.transpose();
  return push(std::move(S), needs(a) || needs(b),
              [a, b, An = std::move(An), Bn = std::move(Bn), na = std::move(na), nb,
               fallback = std::move(fallback)](Tape& t, std::size_t self) {
                const Matrix& G = t.g(self);
                if (t.needs(a)) {
                  Matrix dAn = G * Bn;
                  const Eigen::VectorXd proj = (dAn.array() * An.array()).rowwise().sum();
                  for (Eigen::Index i = 0; i < dAn.rows(); ++i) {
                    if (fallback[static_cast<std::size_t>(i)]) continue;
                    dAn.row(i) = (dAn.row(i) - proj(i) * An.row(i)) / na(i);
                  }
                  t.g(a) += dAn;
                }
                if (t.needs(b)) {
                  Matrix dBn = G.transpose() * An;
                  const Eigen::VectorXd proj = (dBn.array() * Bn.array()).rowwise().sum();
                  for (Eigen::Index j = 0; j < dBn.rows(); ++j) {
                    dBn.row(j) = (dBn.row(j) - proj(j) * Bn.row(j)) / nb(j);
                  }
                  t.g(b) += dBn;
                }
              });
}

Var Tape::row_dot(Var a, Var b) {
  require_same_shape(value(a), value(b), "row_dot");
  Matrix out = (value(a).array() * value(b).array()).rowwise().sum().matrix();
  return push(std::move(out), needs(a) || needs(b), [a, b](Tape& t, std::size_t self) {
    const auto G = t.g(self).col(0).array();
    if (t.needs(a)) t.g(a).array() += t.value(b).array().colwise() * G;
    if (t.needs(b)) t.g(b).array() += t.value(a).array().colwise() * G;
  });
}

Var Tape::softmax_xent(Var logits, std::span<const int> targets) {
  const Matrix& L = value(logits);
  if (static_cast<Eigen::Index>(targets.size()) != L.rows()) {
    throw ShapeError("softmax_xent: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(L.rows()) + " rows");
  }
  Matrix probs(L.rows(), L.cols());
  Matrix out(L.rows(), 1);
  for (Eigen::Index i = 0; i < L.rows(); ++i) {
    const int tgt = targets[static_cast<std::size_t>(i)];
    if (tgt < 0 || tgt >= L.cols()) throw ShapeError("softmax_xent: target out of range");
    const double m = L.row(i).maxCoeff();
    const auto e = (L.row(i).array() - m).exp();
    const double z = e.sum();
    probs.row(i) = e / z;
    out(i, 0) = m + std::log(z) - L(i, tgt);
  }
  std::vector<int> tg(targets.begin(), targets.end());
  return push(std::move(out), needs(logits),
              [logits, probs = std::move(probs), tg = std::move(tg)](Tape& t, std::size_t self) {
                const Matrix& G = t.g(self);
                Matrix& gl = t.g(logits);
                for (Eigen::Index i = 0; i < probs.rows(); ++i) {
                  gl.row(i) += G(i, 0) * probs.row(i);
                  gl(i, tg[static_cast<std::size_t>(i)]) -= G(i, 0);
                }
              });
}

Var Tape::bce_with_logits(Var logits, std::span<const double> labels) {
  const Matrix& X = value(logits);
  if (X.cols() != 1 || static_cast<Eigen::Index>(labels.size()) != X.rows()) {
    throw ShapeError("bce_with_logits: expected a column of " + std::to_string(labels.size()) +
                     " logits, got " + dims(X));
  }
  Matrix out(X.rows(), 1);
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    const double x = X(i, 0);
    const double y = labels[static_cast<std::size_t>(i)];
    out(i, 0) = std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
  }
  std::vector<double> y(labels.begin(), labels.end());
  return push(std::move(out), needs(logits),
              [logits, y = std::move(y)](Tape& t, std::size_t self) {
                const Matrix& X = t.value(logits);
                Matrix& gx = t.g(logits);
                const Matrix& G = t.g(self);
                for (Eigen::Index i = 0; i < X.rows(); ++i) {
                  const double s = 1.0 / (1.0 + std::exp(-X(i, 0)));
                  gx(i, 0) += G(i, 0) * (s - y[static_cast<std::size_t>(i)]);
                }
              });
}

Var Tape::mean(Var a) {
  const Matrix& A = value(a);
  if (A.size() == 0) throw ShapeError("mean of an empty matrix");
  const double n = static_cast<double>(A.size());
  Matrix out(1, 1);
  out(0, 0) = A.sum() / n;
  return push(std::move(out), needs(a), [a, n](Tape& t, std::size_t self) {
    t.g(a).array() += t.g(self)(0, 0) / n;
  });
}

Var Tape::sum(Var a) {
  Matrix out(1, 1);
  out(0, 0) = value(a).sum();
  return push(std::move(out), needs(a), [a](Tape& t, std::size_t self) {
    t.g(a).array() += t.g(self)(0, 0);
  });
}

Var Tape::straight_through(Var latent, Var quantized) {
  require_same_shape(value(latent), value(quantized), "straight_through");
  return push(value(quantized), needs(latent), [latent](Tape& t, std::size_t self) {
    t.g(latent) += t.g(self);
  });
}

void Tape::backward(Var loss) {
  if (nodes_.empty() || !loss.valid()) {
    throw Error("backward() called without a recorded forward pass");
  }
  if (backward_done_) throw Error("backward() already ran on this tape");
  const Matrix& L = value(loss);
  if (L.size() != 1) throw ShapeError("backward() needs a scalar loss, got " + dims(L));
  if (!std::isfinite(L(0, 0))) throw NumericError("loss is not finite");
  for (auto& n : nodes_) {
    if (n.requires_grad) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  }
  backward_done_ = true;
  if (!needs(loss)) return;
  g(loss)(0, 0) = 1.0;
  for (std::size_t i = static_cast<std::size_t>(loss.id) + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.requires_grad && n.backward) n.backward(*this, i);
  }
  for (auto& n : nodes_) {
    if (n.param != nullptr) n.param->grad += n.grad;
  }
}

}  // namespace fedcq::nn

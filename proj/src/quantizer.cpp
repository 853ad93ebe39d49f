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

#include "fedcq/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "fedcq/error.hpp"

namespace fedcq::quant {
namespace {

using nn::Tape;
using nn::Var;
using nn::ZeroNormPolicy;

nn::MlpSpec encoder_spec(const StreamConfig& c) {
  return {c.input_dim, {2 * c.input_dim, c.latent_dim}, nn::Activation::kRelu,
          nn::Activation::kIdentity};
}

nn::MlpSpec decoder_spec(const StreamConfig& c) {
  return {c.latent_dim, {2 * c.input_dim, c.input_dim}, nn::Activation::kRelu,
          nn::Activation::kIdentity};
}

Matrix gaussian(Eigen::Index rows, Eigen::Index cols, double std, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = std * standard_normal(rng);
  return m;
}

Matrix gather(const Matrix& table, const std::vector<int>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), table.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    out.row(static_cast<Eigen::Index>(k)) = table.row(rows[k]);
  }
  return out;
}

double neg_log_softmax_at(const RowVector& logits, int target) {
  const double m = logits.maxCoeff();
  return std::log((logits.array() - m).exp().sum()) + m - logits(target);
}

void add_mlp(nn::Checkpoint& ckpt, const std::string& prefix, const nn::Mlp& mlp) {
  for (std::size_t l = 0; l < mlp.num_layers(); ++l) {
    ckpt.add(prefix + mlp.weight(l).name, mlp.weight(l).value);
    ckpt.add(prefix + mlp.bias(l).name, mlp.bias(l).value);
  }
}

void load_mlp(const nn::Checkpoint& ckpt, const std::string& prefix, nn::Mlp& mlp) {
  for (std::size_t l = 0; l < mlp.num_layers(); ++l) {
    for (nn::Param* p : {&mlp.weight(l), &mlp.bias(l)}) {
      const Matrix& v = ckpt.get(prefix + p->name);
      if (v.rows() != p->value.rows() || v.cols() != p->value.cols()) {
        throw ShapeError("checkpoint tensor " + prefix + p->name + " has the wrong shape");
      }
      p->value = v;
    }
  }
}

}  // namespace

const char* to_string(CodebookRole r) {
  return r == CodebookRole::kFederated ? "federated" : "local";
}

const char* to_string(Entity e) { return e == Entity::kUser ? "user" : "item"; }

Codebook::Codebook(CodebookRole role, Entity entity, Matrix codewords)
    : role_(role), entity_(entity) {
  if (codewords.rows() < 2) {
    throw ConfigError("codebook size must be at least 2, got " +
                      std::to_string(codewords.rows()));
  }
  if (codewords.cols() < 1) throw ConfigError("codebook width must be positive");
  param_ = nn::Param(std::string(to_string(entity)) + "." + to_string(role) + "_codebook",
                     std::move(codewords));
}

void Codebook::set_codewords(const Matrix& c) {
  if (c.rows() != param_.value.rows() || c.cols() != param_.value.cols()) {
    throw ShapeError("codebook shape mismatch: expected " + std::to_string(size()) + "x" +
                     std::to_string(width()) + ", got " + std::to_string(c.rows()) + "x" +
                     std::to_string(c.cols()));
  }
  param_.value = c;
}

Matrix cosine_matrix(const Matrix& a, const Matrix& b, ZeroNormPolicy policy) {
  if (a.cols() != b.cols()) throw ShapeError("cosine: width mismatch");
  Eigen::VectorXd na = a.rowwise().norm();
  const Eigen::VectorXd nb = b.rowwise().norm();
  for (Eigen::Index j = 0; j < nb.size(); ++j) {
    if (nb(j) == 0.0) throw NumericError("cosine: zero-norm codeword " + std::to_string(j));
  }
  Matrix out = a * b.transpose();
  for (Eigen::Index i = 0; i < na.size(); ++i) {
    if (na(i) == 0.0) {
      if (policy == ZeroNormPolicy::kThrow) {
        throw NumericError("cosine: zero-norm input row " + std::to_string(i));
      }
      continue;  // dot products of a zero row are already zero
    }
    out.row(i) /= na(i);
  }
  for (Eigen::Index j = 0; j < nb.size(); ++j) out.col(j) /= nb(j);
  return out;
}

std::vector<int> argmax_rows(const Matrix& m) {
  std::vector<int> idx(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index j = 1; j < m.cols(); ++j) {
      if (m(i, j) > m(i, best)) best = j;
    }
    idx[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return idx;
}

RowVector softmax(const RowVector& logits) {
  const RowVector e = (logits.array() - logits.maxCoeff()).exp();
  return e / e.sum();
}

Assignment assign(const RowVector& r, const Codebook& codebook, double tau,
                  ZeroNormPolicy policy) {
  if (tau <= 0) throw ConfigError("temperature must be positive");
  if (r.size() != codebook.width()) {
    throw ShapeError("assign: vector width " + std::to_string(r.size()) +
                     " does not match codebook width " + std::to_string(codebook.width()));
  }
  const Matrix logits = cosine_matrix(r, codebook.codewords(), policy) / tau;
  Assignment a;
  a.index = argmax_rows(logits)[0];
  a.probs = softmax(logits.row(0));
  return a;
}

void StreamConfig::validate() const {
  if (input_dim < 1 || latent_dim < 1) throw ConfigError("stream widths must be positive");
  if (codebook_size < 2) {
    throw ConfigError("codebook size must be at least 2, got " + std::to_string(codebook_size));
  }
  if (!(tau > 0)) throw ConfigError("temperature must be positive");
  if (!(fed_init_std > 0)) throw ConfigError("codebook init std must be positive");
  if (local_jitter < 0) throw ConfigError("local codebook jitter must be >= 0");
}

QuantizerStream::QuantizerStream(Entity entity, const StreamConfig& config, Rng& rng)
    : entity_(entity), config_(config) {
  config_.validate();
  encoder_ = nn::Mlp(encoder_spec(config_), rng);
  decoder_ = nn::Mlp(decoder_spec(config_), rng);
  fed_ = Codebook(CodebookRole::kFederated, entity,
                  gaussian(config_.codebook_size, config_.latent_dim, config_.fed_init_std, rng));
  if (config_.two_level) {
    local_ = Codebook(CodebookRole::kLocal, entity,
                      gaussian(config_.codebook_size, config_.latent_dim, config_.fed_init_std, rng));
  }
}

Codebook& QuantizerStream::local() {
  if (!config_.two_level) throw Error("single-level stream has no local codebook");
  return local_;
}

const Codebook& QuantizerStream::local() const {
  if (!config_.two_level) throw Error("single-level stream has no local codebook");
  return local_;
}

nn::ParamRefs QuantizerStream::encoder_decoder_params() {
  nn::ParamRefs out = encoder_.params();
  for (nn::Param* p : decoder_.params()) out.push_back(p);
  return out;
}

nn::ParamRefs QuantizerStream::params() {
  nn::ParamRefs out = encoder_decoder_params();
  out.push_back(&fed_.param());
  if (config_.two_level) out.push_back(&local_.param());
  return out;
}

void QuantizerStream::init_local_from_data(const Matrix& embeddings, Rng& rng) {
  if (!config_.two_level) return;
  if (embeddings.rows() == 0) throw EmptyDatasetError("no embeddings to initialise from");
  const Matrix z = encoder_.forward(embeddings);
  const auto idx = argmax_rows(cosine_matrix(z, fed_.codewords(), ZeroNormPolicy::kDotFallback));
  const Matrix residual = z - gather(fed_.codewords(), idx);
  const auto n = static_cast<std::size_t>(residual.rows());
  const auto T = static_cast<std::size_t>(config_.codebook_size);
  std::vector<int> pick;
  if (n >= T) {
    std::vector<int> all(n);
    std::iota(all.begin(), all.end(), 0);
    shuffle(all.begin(), all.end(), rng);
    pick.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(T));
  } else {
    for (std::size_t k = 0; k < T; ++k) {
      pick.push_back(static_cast<int>(uniform_index(rng, n)));
    }
  }
  const double rms = std::sqrt(residual.squaredNorm() / static_cast<double>(residual.size()));
  const double jitter = config_.local_jitter * (rms > 0 ? rms : 1.0);
  Matrix c = gather(residual, pick) + gaussian(config_.codebook_size, config_.latent_dim, jitter, rng);
  // A zero codeword would make cosine assignment undefined.
  for (Eigen::Index j = 0; j < c.rows(); ++j) {
    if (c.row(j).norm() == 0.0) c(j, 0) = 1e-6;
  }
  local_.set_codewords(c);
}

nn::Checkpoint QuantizerStream::to_checkpoint() const {
  nn::Checkpoint ckpt;
  ckpt.meta["entity"] = to_string(entity_);
  ckpt.meta["input_dim"] = std::to_string(config_.input_dim);
  ckpt.meta["latent_dim"] = std::to_string(config_.latent_dim);
  ckpt.meta["codebook_size"] = std::to_string(config_.codebook_size);
  ckpt.meta["two_level"] = config_.two_level ? "1" : "0";
  ckpt.add("tau", Matrix::Constant(1, 1, config_.tau));
  add_mlp(ckpt, "encoder.", encoder_);
  add_mlp(ckpt, "decoder.", decoder_);
  ckpt.add("codebook.fed", fed_.codewords());
  if (config_.two_level) ckpt.add("codebook.local", local_.codewords());
  return ckpt;
}

QuantizerStream QuantizerStream::from_checkpoint(const nn::Checkpoint& ckpt) {
  StreamConfig c;
  c.input_dim = std::stoi(ckpt.meta_at("input_dim"));
  c.latent_dim = std::stoi(ckpt.meta_at("latent_dim"));
  c.codebook_size = std::stoi(ckpt.meta_at("codebook_size"));
  c.two_level = ckpt.meta_at("two_level") == "1";
  c.tau = ckpt.get("tau")(0, 0);
  const std::string& e = ckpt.meta_at("entity");
  if (e != "user" && e != "item") throw ParseError("unknown stream entity '" + e + "'");
  Rng scratch(0);
  QuantizerStream s(e == "user" ? Entity::kUser : Entity::kItem, c, scratch);
  load_mlp(ckpt, "encoder.", s.encoder_);
  load_mlp(ckpt, "decoder.", s.decoder_);
  s.fed_.set_codewords(ckpt.get("codebook.fed"));
  if (c.two_level) s.local_.set_codewords(ckpt.get("codebook.local"));
  return s;
}

QuantizationResult quantize(const QuantizerStream& s, const RowVector& e, ZeroNormPolicy policy) {
  QuantizationResult q;
  q.z = s.encoder().forward(e);
  const Assignment a0 = assign(q.z, s.fed(), s.tau(), policy);
  q.fed_index = a0.index;
  q.fed_probs = a0.probs;
  q.quantized = s.fed().codewords().row(a0.index);
  if (s.two_level()) {
    q.residual = q.z - q.quantized;
    const Assignment a1 = assign(q.residual, s.local(), s.tau(), policy);
    q.local_index = a1.index;
    q.local_probs = a1.probs;
    q.quantized += s.local().codewords().row(a1.index);
  }
  q.reconstruction = s.decoder().forward(q.quantized);
  return q;
}

std::vector<TokenPair> encode_all(const QuantizerStream& s, const Matrix& embeddings) {
  std::vector<TokenPair> out(static_cast<std::size_t>(embeddings.rows()));
  if (embeddings.rows() == 0) return out;
  const Matrix z = s.encoder().forward(embeddings);
  const auto fed = argmax_rows(cosine_matrix(z, s.fed().codewords(), ZeroNormPolicy::kDotFallback));
  for (std::size_t k = 0; k < out.size(); ++k) out[k].fed = fed[k];
  if (s.two_level()) {
    const Matrix r = z - gather(s.fed().codewords(), fed);
    const auto local =
        argmax_rows(cosine_matrix(r, s.local().codewords(), ZeroNormPolicy::kDotFallback));
    for (std::size_t k = 0; k < out.size(); ++k) out[k].local = local[k];
  }
  return out;
}

TokenTable tokenize(const std::string& market_id, const QuantizerStream& users,
                    const QuantizerStream& items, const cf::EmbeddingTable& embeddings) {
  if (users.config().codebook_size != items.config().codebook_size ||
      users.two_level() != items.two_level()) {
    throw ConfigError("user and item streams disagree on codebook layout");
  }
  TokenTable t;
  t.market_id = market_id;
  t.codebook_size = users.config().codebook_size;
  t.two_level = users.two_level();
  t.users = encode_all(users, embeddings.users);
  t.items = encode_all(items, embeddings.items);
  return t;
}

double code_loss(const QuantizationResult& q) {
  double loss = -std::log(q.fed_probs(q.fed_index));
  if (q.local_index >= 0) loss -= std::log(q.local_probs(q.local_index));
  return loss;
}

double align_loss(const Matrix& quantized, const Matrix& embeddings, double tau) {
  if (quantized.rows() != embeddings.rows()) throw ShapeError("align_loss: batch mismatch");
  if (quantized.rows() == 0) throw EmptyDatasetError("align_loss: empty batch");
  const Matrix logits = cosine_matrix(quantized, embeddings, ZeroNormPolicy::kDotFallback) / tau;
  double total = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    total += neg_log_softmax_at(logits.row(i), static_cast<int>(i));
  }
  return total / static_cast<double>(logits.rows());
}

double rec_loss(const RowVector& user_recon, const RowVector& item_recon, double label) {
  const double x = user_recon.dot(item_recon);
  // Numerically stable binary cross-entropy with logits.
  return std::max(x, 0.0) - x * label + std::log1p(std::exp(-std::abs(x)));
}

double total_loss(double rec, double code_u, double code_i, double align_u, double align_i,
                  double lambda) {
  return rec + lambda * (code_u + code_i + align_u + align_i);
}

StreamGraph record_stream(Tape& tape, QuantizerStream& s, const Matrix& embeddings,
                          GradientPath path) {
  if (embeddings.cols() != s.config().input_dim) {
    throw ShapeError("stream expects embeddings of width " +
                     std::to_string(s.config().input_dim) + ", got " +
                     std::to_string(embeddings.cols()));
  }
  if (s.config().latent_dim != s.config().input_dim) {
    throw ShapeError("alignment needs the latent width to equal the embedding width");
  }
  const double inv_tau = 1.0 / s.tau();
  StreamGraph g;
  const Var e = tape.constant(embeddings);
  g.z = s.encoder().forward(tape, e);

  const Var c0_all = tape.param(s.fed().param());
  g.fed_logits = tape.scale(tape.cosine(g.z, c0_all, ZeroNormPolicy::kDotFallback), inv_tau);
  g.fed_index = argmax_rows(tape.value(g.fed_logits));
  const Var c0 = tape.gather_rows(c0_all, g.fed_index);
  Var code = tape.mean(tape.softmax_xent(g.fed_logits, g.fed_index));
  g.quantized = c0;
  if (s.two_level()) {
    const Var r1 = tape.sub(g.z, c0);
    const Var c1_all = tape.param(s.local().param());
    g.local_logits = tape.scale(tape.cosine(r1, c1_all, ZeroNormPolicy::kDotFallback), inv_tau);
    g.local_index = argmax_rows(tape.value(g.local_logits));
    g.quantized = tape.add(c0, tape.gather_rows(c1_all, g.local_index));
    code = tape.add(code, tape.mean(tape.softmax_xent(g.local_logits, g.local_index)));
  }
  g.code_loss = code;

  std::vector<int> diagonal(static_cast<std::size_t>(embeddings.rows()));
  std::iota(diagonal.begin(), diagonal.end(), 0);
  g.align_loss = tape.mean(tape.softmax_xent(
      tape.scale(tape.cosine(g.quantized, e, ZeroNormPolicy::kDotFallback), inv_tau), diagonal));

  g.decoder_input = path == GradientPath::kStraightThrough
                        ? tape.straight_through(g.z, g.quantized)
                        : g.quantized;
  g.reconstruction = s.decoder().forward(tape, g.decoder_input);
  return g;
}

LossReport& LossReport::operator+=(const LossReport& o) {
  total += o.total;
  rec += o.rec;
  code_u += o.code_u;
  code_i += o.code_i;
  align_u += o.align_u;
  align_i += o.align_i;
  return *this;
}

LossReport LossReport::scaled(double s) const {
  return {total * s, rec * s, code_u * s, code_i * s, align_u * s, align_i * s};
}

Var record_objective(Tape& tape, QuantizerStream& users, QuantizerStream& items,
                     const cf::EmbeddingTable& embeddings, const PairBatch& batch, double lambda,
                     GradientPath path, LossReport* report) {
  if (batch.users.size() != batch.items.size() || batch.users.size() != batch.labels.size()) {
    throw ShapeError("pair batch components differ in length");
  }
  if (batch.users.empty()) throw EmptyDatasetError("empty training batch");
  // Each distinct entity is encoded once; the in-batch alignment softmax
  // would otherwise contain duplicate columns.
  auto unique_rows = [](const std::vector<int>& ids, std::vector<int>& pos) {
    std::map<int, int> slot;
    std::vector<int> uniq;
    pos.resize(ids.size());
    for (std::size_t k = 0; k < ids.size(); ++k) {
      auto [it, inserted] = slot.emplace(ids[k], static_cast<int>(uniq.size()));
      if (inserted) uniq.push_back(ids[k]);
      pos[k] = it->second;
    }
    return uniq;
  };
  std::vector<int> upos, ipos;
  const auto uniq_u = unique_rows(batch.users, upos);
  const auto uniq_i = unique_rows(batch.items, ipos);
  for (int u : uniq_u) {
    if (u < 0 || u >= embeddings.users.rows()) {
      throw Error("user " + std::to_string(u) + " has no embedding");
    }
  }
  for (int i : uniq_i) {
    if (i < 0 || i >= embeddings.items.rows()) {
      throw Error("item " + std::to_string(i) + " has no embedding");
    }
  }
  const StreamGraph gu = record_stream(tape, users, gather(embeddings.users, uniq_u), path);
  const StreamGraph gi = record_stream(tape, items, gather(embeddings.items, uniq_i), path);
  const Var logits = tape.row_dot(tape.gather_rows(gu.reconstruction, upos),
                                  tape.gather_rows(gi.reconstruction, ipos));
  const Var rec = tape.mean(tape.bce_with_logits(logits, batch.labels));
  const Var reg = tape.add(tape.add(gu.code_loss, gi.code_loss),
                           tape.add(gu.align_loss, gi.align_loss));
  const Var total = tape.add(rec, tape.scale(reg, lambda));
  if (report) {
    report->total = tape.scalar(total);
    report->rec = tape.scalar(rec);
    report->code_u = tape.scalar(gu.code_loss);
    report->code_i = tape.scalar(gi.code_loss);
    report->align_u = tape.scalar(gu.align_loss);
    report->align_i = tape.scalar(gi.align_loss);
  }
  return total;
}

void QuantizerTrainConfig::validate() const {
  if (!(lr > 0)) throw ConfigError("quantizer learning rate must be positive");
  if (batch_size < 1) throw ConfigError("quantizer batch size must be positive");
  if (lambda < 0) throw ConfigError("lambda must be >= 0");
}

LossReport train_step(QuantizerStream& users, QuantizerStream& items,
                      const cf::EmbeddingTable& embeddings, const PairBatch& batch,
                      nn::Adam& optimizer, const QuantizerTrainConfig& config) {
  nn::zero_grads(optimizer.params());
  LossReport report;
  Tape tape;
  const Var loss = record_objective(tape, users, items, embeddings, batch, config.lambda,
                                    config.path, &report);
  tape.backward(loss);
  optimizer.step();
  return report;
}

MarketQuantizer::MarketQuantizer(std::string market_id, const StreamConfig& stream,
                                 const QuantizerTrainConfig& train, std::uint64_t seed)
    : market_id_(std::move(market_id)), train_(train) {
  train_.validate();
  Rng rng_u = make_rng(seed, "quantizer/user");
  Rng rng_i = make_rng(seed, "quantizer/item");
  users_ = QuantizerStream(Entity::kUser, stream, rng_u);
  items_ = QuantizerStream(Entity::kItem, stream, rng_i);
  rebuild_optimizer();
}

void MarketQuantizer::rebuild_optimizer() {
  nn::ParamRefs all = users_.params();
  for (nn::Param* p : items_.params()) all.push_back(p);
  optimizer_ = nn::Adam(all, nn::AdamConfig{.lr = train_.lr, .l2 = train_.l2});
}

void MarketQuantizer::set_scope(TrainScope scope) {
  for (QuantizerStream* s : {&users_, &items_}) {
    nn::set_trainable(s->params(), scope == TrainScope::kAll);
    if (s->two_level()) s->local().param().trainable = true;
  }
}

void MarketQuantizer::init_local_from_data(const cf::EmbeddingTable& embeddings, Rng& rng) {
  users_.init_local_from_data(embeddings.users, rng);
  items_.init_local_from_data(embeddings.items, rng);
}

LossReport MarketQuantizer::train_epoch(const cf::EmbeddingTable& embeddings,
                                        std::span<const std::pair<int, int>> positives,
                                        Rng& rng) {
  if (positives.empty()) throw EmptyDatasetError("market " + market_id_ + " has no positives");
  std::vector<std::size_t> order(positives.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  shuffle(order.begin(), order.end(), rng);
  const auto num_items = static_cast<std::uint64_t>(embeddings.items.rows());
  LossReport sum;
  int batches = 0;
  const auto bs = static_cast<std::size_t>(train_.batch_size);
  for (std::size_t start = 0; start < order.size(); start += bs) {
    PairBatch batch;
    for (std::size_t k = start; k < std::min(order.size(), start + bs); ++k) {
      const auto [u, i] = positives[order[k]];
      batch.users.push_back(u);
      batch.items.push_back(i);
      batch.labels.push_back(1.0);
      batch.users.push_back(u);
      batch.items.push_back(static_cast<int>(uniform_index(rng, num_items)));
      batch.labels.push_back(0.0);
    }
    sum += train_step(users_, items_, embeddings, batch, optimizer_, train_);
    ++batches;
  }
  return sum.scaled(1.0 / batches);
}

TokenTable MarketQuantizer::tokenize(const cf::EmbeddingTable& embeddings) const {
  return quant::tokenize(market_id_, users_, items_, embeddings);
}

}  // namespace fedcq::quant

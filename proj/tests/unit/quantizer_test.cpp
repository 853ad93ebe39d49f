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

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include <gtest/gtest.h>

#include "fedcq/error.hpp"
#include "fedcq/nn/gradcheck.hpp"
#include "fedcq/quantizer.hpp"
#include "support/test_util.hpp"

namespace fedcq::quant {
namespace {

using fedcq::testing::random_matrix;
using fedcq::testing::temp_dir;
using nn::ZeroNormPolicy;

StreamConfig small_config(int d, int T, bool two_level = true) {
  StreamConfig c;
  c.input_dim = d;
  c.latent_dim = d;
  c.codebook_size = T;
  c.two_level = two_level;
  return c;
}

QuantizerStream make_stream(Entity e, int d, int T, std::uint64_t seed, bool two_level = true) {
  Rng rng(seed);
  return QuantizerStream(e, small_config(d, T, two_level), rng);
}

// relu(x) - relu(-x) = x through the d -> 2d -> d encoder.
void make_encoder_identity(QuantizerStream& s) {
  const int d = s.config().input_dim;
  Matrix w0(d, 2 * d), w1(2 * d, d);
  w0 << Matrix::Identity(d, d), -Matrix::Identity(d, d);
  w1 << Matrix::Identity(d, d), -Matrix::Identity(d, d);
  s.encoder().weight(0).value = w0;
  s.encoder().weight(1).value = w1;
  s.encoder().bias(0).value.setZero();
  s.encoder().bias(1).value.setZero();
}

Codebook book(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix m(static_cast<Eigen::Index>(rows.size()),
           static_cast<Eigen::Index>(rows.begin()->size()));
  Eigen::Index r = 0;
  for (const auto& row : rows) {
    Eigen::Index c = 0;
    for (double v : row) m(r, c++) = v;
    ++r;
  }
  return Codebook(CodebookRole::kFederated, Entity::kUser, m);
}

RowVector row(std::initializer_list<double> v) {
  RowVector r(static_cast<Eigen::Index>(v.size()));
  Eigen::Index k = 0;
  for (double x : v) r(k++) = x;
  return r;
}

TEST(AssignTest, OrthonormalBasisExample) {
  const Assignment a = assign(row({1, 0}), book({{1, 0}, {0, 1}}), 1.0);
  EXPECT_EQ(a.index, 0);
  const double e = std::exp(1.0);
  EXPECT_NEAR(a.probs(0), e / (e + 1), 1e-15);
  EXPECT_NEAR(a.probs(1), 1 / (e + 1), 1e-15);
}

TEST(AssignTest, TieGoesToLowestIndex) {
  const Assignment a = assign(row({1, 1}), book({{1, 0}, {0, 1}}), 0.1);
  EXPECT_EQ(a.index, 0);
  EXPECT_NEAR(a.probs(0), 0.5, 1e-15);
  EXPECT_NEAR(a.probs(1), 0.5, 1e-15);
}

TEST(AssignTest, ScaleInvarianceProperty) {
  Rng rng(1);
  for (int trial = 0; trial < 1000; ++trial) {
    const Codebook b(CodebookRole::kLocal, Entity::kItem, random_matrix(8, 4, rng));
    const RowVector r = random_matrix(1, 4, rng);
    const double alpha = std::exp(6.0 * uniform01(rng) - 3.0);
    const Assignment a = assign(r, b, 0.1), scaled = assign(alpha * r, b, 0.1);
    ASSERT_EQ(a.index, scaled.index);
    ASSERT_LT((a.probs - scaled.probs).cwiseAbs().maxCoeff(), 1e-12);
    ASSERT_NEAR(a.probs.sum(), 1.0, 1e-9);
    ASSERT_GE(a.probs.minCoeff(), 0.0);
  }
}

TEST(AssignTest, ZeroNormPolicies) {
  const Codebook b = book({{1, 0}, {0, 1}, {-1, 0}});
  EXPECT_THROW(assign(row({0, 0}), b, 0.1), NumericError);
  const Assignment a = assign(row({0, 0}), b, 0.1, ZeroNormPolicy::kDotFallback);
  EXPECT_EQ(a.index, 0);
  EXPECT_NEAR(a.probs(2), 1.0 / 3.0, 1e-15);
  EXPECT_THROW(assign(row({1, 0}), book({{1, 0}, {0, 0}}), 0.1, ZeroNormPolicy::kDotFallback),
               NumericError);
}

TEST(AssignTest, RejectsBadArguments) {
  EXPECT_THROW(assign(row({1, 0, 0}), book({{1, 0}, {0, 1}}), 0.1), ShapeError);
  EXPECT_THROW(assign(row({1, 0}), book({{1, 0}, {0, 1}}), 0.0), ConfigError);
  EXPECT_THROW(book({{1, 0}}), ConfigError);
  Codebook b = book({{1, 0}, {0, 1}});
  EXPECT_THROW(b.set_codewords(Matrix::Ones(3, 2)), ShapeError);
  EXPECT_EQ(b.param().name, "user.federated_codebook");
}

TEST(QuantizeTest, ResidualAndCompositionAreExact) {
  Rng rng(2);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto s = make_stream(trial % 2 ? Entity::kUser : Entity::kItem, 4, 8,
                               static_cast<std::uint64_t>(trial / 50));
    const RowVector e = random_matrix(1, 4, rng);
    const QuantizationResult q = quantize(s, e);
    const RowVector c0 = s.fed().codewords().row(q.fed_index);
    const RowVector c1 = s.local().codewords().row(q.local_index);
    ASSERT_EQ(q.residual, RowVector(q.z - c0));
    ASSERT_EQ(q.quantized, RowVector(c0 + c1));
    // Adding c0 back is one rounding step away from z.
    for (Eigen::Index k = 0; k < 4; ++k) {
      ASSERT_LE(std::abs(q.residual(k) + c0(k) - q.z(k)),
                2 * std::numeric_limits<double>::epsilon() * std::max(std::abs(c0(k)), 1.0));
    }
    ASSERT_NEAR(q.fed_probs.sum(), 1.0, 1e-9);
    ASSERT_NEAR(q.local_probs.sum(), 1.0, 1e-9);
    Eigen::Index best0, best1;
    q.fed_probs.maxCoeff(&best0);
    q.local_probs.maxCoeff(&best1);
    ASSERT_EQ(q.fed_index, best0);
    ASSERT_EQ(q.local_index, best1);
    const QuantizationResult again = quantize(s, e);
    ASSERT_EQ(again.fed_index, q.fed_index);
    ASSERT_EQ(again.local_index, q.local_index);
  }
}

TEST(QuantizeTest, SingleLevelSkipsLocalCodebook) {
  const auto s = make_stream(Entity::kUser, 4, 8, 3, false);
  const QuantizationResult q = quantize(s, RowVector::Ones(4));
  EXPECT_EQ(q.local_index, -1);
  EXPECT_EQ(q.quantized, RowVector(s.fed().codewords().row(q.fed_index)));
  EXPECT_THROW(s.local(), Error);
}

TEST(QuantizeTest, ZeroResidualDegeneracy) {
  auto s = make_stream(Entity::kUser, 3, 4, 4);
  make_encoder_identity(s);
  const RowVector e = row({0.3, -0.2, 0.9});
  Matrix fed = s.fed().codewords();
  fed.row(2) = e;
  s.fed().set_codewords(fed);
  EXPECT_THROW(quantize(s, e, ZeroNormPolicy::kThrow), NumericError);
  const QuantizationResult q = quantize(s, e);
  EXPECT_EQ(q.fed_index, 2);
  EXPECT_EQ(q.residual, RowVector::Zero(3));
  EXPECT_EQ(q.local_index, 0);
}

TEST(LossTest, CodeLossExamples) {
  QuantizationResult q;
  q.fed_index = 0;
  q.local_index = 1;
  q.fed_probs = row({0.5, 0.5});
  q.local_probs = row({0.5, 0.5});
  EXPECT_NEAR(code_loss(q), 2 * std::log(2.0), 1e-15);
  q.fed_probs = row({1.0, 0.0});
  q.local_probs = row({0.0, 1.0});
  EXPECT_EQ(code_loss(q), 0.0);
}

TEST(LossTest, AlignLossExamples) {
  EXPECT_EQ(align_loss(row({1, 2}), row({3, -1}), 0.1), 0.0);
  Matrix zq(2, 2), e(2, 2);
  zq << 1, 1, 1, 1;
  e << 1, 0, 0, 1;
  EXPECT_NEAR(align_loss(zq, e, 0.1), std::log(2.0), 1e-15);
  EXPECT_THROW(align_loss(zq, Matrix(e.topRows(1)), 0.1), ShapeError);
}

TEST(LossTest, RecAndTotalExamples) {
  EXPECT_NEAR(rec_loss(row({1, -1}), row({1, 1}), 1.0), std::log(2.0), 1e-15);
  EXPECT_LT(rec_loss(row({30}), row({30}), 1.0), 1e-300);
  EXPECT_NEAR(rec_loss(row({1e4}), row({1e4}), 0.0), 1e8, 1e-6);
  EXPECT_NEAR(total_loss(0.3, 0.05, 0.05, 0.05, 0.05, 1.0), 0.5, 1e-15);
  EXPECT_EQ(total_loss(0.3, 0.1, 0.2, 0.3, 0.4, 0.0), 0.3);
  EXPECT_NEAR(total_loss(0.3, 0.05, 0.05, 0.05, 0.05, 2.0) - 0.3, 0.4, 1e-15);
}

TEST(StreamGraphTest, TapeMatchesScalarReference) {
  Rng rng(5);
  auto s = make_stream(Entity::kUser, 4, 6, 5);
  const Matrix e = random_matrix(4, 4, rng);
  nn::Tape t;
  const StreamGraph g = record_stream(t, s, e, GradientPath::kStraightThrough);
  double code = 0;
  Matrix zq(4, 4);
  for (Eigen::Index r = 0; r < 4; ++r) {
    const QuantizationResult q = quantize(s, e.row(r));
    code += code_loss(q);
    zq.row(r) = q.quantized;
    EXPECT_EQ(g.fed_index[static_cast<std::size_t>(r)], q.fed_index);
    EXPECT_EQ(g.local_index[static_cast<std::size_t>(r)], q.local_index);
    EXPECT_LT((RowVector(t.value(g.reconstruction).row(r)) - q.reconstruction).norm(), 1e-12);
  }
  EXPECT_NEAR(t.scalar(g.code_loss), code / 4, 1e-12);
  EXPECT_NEAR(t.scalar(g.align_loss), align_loss(zq, e, s.tau()), 1e-12);
}

TEST(StreamGraphTest, ObjectiveMatchesScalarReference) {
  Rng rng(6);
  auto users = make_stream(Entity::kUser, 4, 6, 6);
  auto items = make_stream(Entity::kItem, 4, 6, 7);
  const cf::EmbeddingTable emb{"m", random_matrix(3, 4, rng), random_matrix(5, 4, rng)};
  const PairBatch batch{{0, 2, 0, 1}, {4, 1, 3, 4}, {1, 0, 0, 1}};
  nn::Tape t;
  LossReport report;
  const nn::Var total =
      record_objective(t, users, items, emb, batch, 1.0, GradientPath::kStraightThrough, &report);
  double rec = 0;
  for (std::size_t k = 0; k < 4; ++k) {
    rec += rec_loss(quantize(users, emb.users.row(batch.users[k])).reconstruction,
                    quantize(items, emb.items.row(batch.items[k])).reconstruction,
                    batch.labels[k]);
  }
  EXPECT_NEAR(report.rec, rec / 4, 1e-12);
  EXPECT_NEAR(t.scalar(total),
              total_loss(report.rec, report.code_u, report.code_i, report.align_u,
                         report.align_i, 1.0),
              1e-12);
  EXPECT_THROW(record_objective(t, users, items, emb, {{0}, {7}, {1}}, 1.0,
                                GradientPath::kExact),
               Error);
}

// Exact path: every loss term is a smooth function away from assignment
// boundaries and relu kinks, so finite differences apply.
TEST(StreamGraphTest, ExactPathGradientsMatchFiniteDifferences) {
  int checked = 0;
  for (std::uint64_t seed = 10; seed < 16; ++seed) {
    Rng rng(seed);
    auto users = make_stream(Entity::kUser, 4, 4, seed);
    auto items = make_stream(Entity::kItem, 4, 4, seed + 100);
    const cf::EmbeddingTable emb{"m", random_matrix(3, 4, rng), random_matrix(3, 4, rng)};
    const PairBatch batch{{0, 1, 2, 1}, {2, 0, 1, 1}, {1, 0, 1, 0}};
    nn::ParamRefs params = users.params();
    for (nn::Param* p : items.params()) params.push_back(p);
    for (const auto& loss : {0, 1, 2}) {
      const auto r = nn::finite_diff_check(
          [&](nn::Tape& t) {
            if (loss == 0) {
              return record_objective(t, users, items, emb, batch, 1.0, GradientPath::kExact);
            }
            const StreamGraph g = record_stream(t, users, emb.users, GradientPath::kExact);
            return loss == 1 ? g.code_loss : g.align_loss;
          },
          params, 1e-6);
      EXPECT_LT(r.max_rel_error, 1e-4) << "seed " << seed << " loss " << loss << " " << r.worst;
      ++checked;
    }
  }
  EXPECT_EQ(checked, 18);
}

TEST(StreamGraphTest, StraightThroughCopiesDecoderGradientToLatent) {
  Rng rng(7);
  auto s = make_stream(Entity::kUser, 4, 6, 8);
  const Matrix e = random_matrix(3, 4, rng);
  const Matrix w = random_matrix(3, 4, rng);

  nn::Tape a;
  const StreamGraph g = record_stream(a, s, e, GradientPath::kStraightThrough);
  a.backward(a.sum(a.row_dot(g.reconstruction, a.constant(w))));
  const Matrix via_ste = a.grad(g.z);

  nn::Param q("q", a.value(g.quantized));
  nn::Tape b;
  const nn::Var rec = s.decoder().forward(b, b.param(q));
  b.backward(b.sum(b.row_dot(rec, b.constant(w))));
  EXPECT_TRUE(via_ste.isApprox(q.grad, 1e-14));
}

TEST(TrainStepTest, ZeroLearningRateIsRepeatable) {
  Rng rng(9);
  auto users = make_stream(Entity::kUser, 4, 8, 9);
  auto items = make_stream(Entity::kItem, 4, 8, 10);
  const cf::EmbeddingTable emb{"m", random_matrix(5, 4, rng), random_matrix(5, 4, rng)};
  nn::ParamRefs params = users.params();
  for (nn::Param* p : items.params()) params.push_back(p);
  nn::Adam opt(params, {.lr = 0.0});
  const PairBatch batch{{0, 1, 2}, {3, 4, 0}, {1, 0, 1}};
  const QuantizerTrainConfig cfg;
  const LossReport first = train_step(users, items, emb, batch, opt, cfg);
  const LossReport second = train_step(users, items, emb, batch, opt, cfg);
  EXPECT_EQ(first.total, second.total);
  EXPECT_EQ(first.rec, second.rec);
}

TEST(TrainStepTest, FrozenCodebooksNeverChange) {
  Rng rng(11);
  auto users = make_stream(Entity::kUser, 4, 8, 11);
  auto items = make_stream(Entity::kItem, 4, 8, 12);
  make_encoder_identity(users);
  make_encoder_identity(items);
  const cf::EmbeddingTable emb{"m", random_matrix(6, 4, rng), random_matrix(6, 4, rng)};
  nn::ParamRefs params = users.params();
  for (nn::Param* p : items.params()) params.push_back(p);
  for (auto* s : {&users, &items}) {
    s->fed().param().trainable = false;
    s->local().param().trainable = false;
  }
  const Matrix fed = users.fed().codewords(), local = items.local().codewords();
  const Matrix enc = users.encoder().weight(0).value;
  nn::Adam opt(params, {.lr = 1e-2});
  for (int step = 0; step < 20; ++step) {
    train_step(users, items, emb, {{0, 1, 2, 3}, {5, 4, 3, 2}, {1, 0, 1, 0}}, opt, {});
  }
  EXPECT_EQ(users.fed().codewords(), fed);
  EXPECT_EQ(items.local().codewords(), local);
  EXPECT_NE(users.encoder().weight(0).value, enc);
}

TEST(TrainStepTest, LossDecreasesOnSyntheticEmbeddings) {
  Rng rng(13);
  const cf::EmbeddingTable emb{"m", random_matrix(50, 8, rng), random_matrix(50, 8, rng)};
  std::vector<std::pair<int, int>> positives;
  for (int u = 0; u < 50; ++u) {
    for (int i = 0; i < 50; ++i) {
      if (emb.users.row(u).dot(emb.items.row(i)) > 2.0) positives.emplace_back(u, i);
    }
  }
  ASSERT_GT(positives.size(), 50u);
  QuantizerTrainConfig train;
  train.lr = 3e-3;
  train.batch_size = 32;
  MarketQuantizer mq("m", small_config(8, 16), train, 13);
  Rng epoch_rng(14);
  std::vector<double> totals;
  while (mq.optimizer().steps() < 200) totals.push_back(mq.train_epoch(emb, positives, epoch_rng).total);
  ASSERT_GE(totals.size(), 3u);
  EXPECT_LT(totals.back(), totals.front());
}

TEST(MarketQuantizerTest, LocalScopeTouchesOnlyLocalCodebooks) {
  Rng rng(15);
  const cf::EmbeddingTable emb{"m", random_matrix(20, 4, rng), random_matrix(20, 4, rng)};
  std::vector<std::pair<int, int>> positives;
  for (int k = 0; k < 20; ++k) positives.emplace_back(k, (k * 7) % 20);
  MarketQuantizer mq("m", small_config(4, 8), {}, 15);
  mq.init_local_from_data(emb, rng);
  const Matrix fed = mq.users().fed().codewords(), local = mq.items().local().codewords();
  const Matrix dec = mq.items().decoder().weight(1).value;
  mq.set_scope(TrainScope::kLocalCodebooksOnly);
  mq.train_epoch(emb, positives, rng);
  EXPECT_EQ(mq.users().fed().codewords(), fed);
  EXPECT_EQ(mq.items().decoder().weight(1).value, dec);
  EXPECT_NE(mq.items().local().codewords(), local);
  mq.set_scope(TrainScope::kAll);
  mq.train_epoch(emb, positives, rng);
  EXPECT_NE(mq.users().fed().codewords(), fed);
}

TEST(MarketQuantizerTest, LocalInitSamplesResiduals) {
  Rng rng(16);
  auto s = make_stream(Entity::kItem, 4, 8, 16);
  const Matrix e = random_matrix(30, 4, rng);
  s.init_local_from_data(e, rng);
  const Matrix z = s.encoder().forward(e);
  Matrix residual(30, 4);
  for (Eigen::Index r = 0; r < 30; ++r) {
    residual.row(r) = z.row(r) - s.fed().codewords().row(quantize(s, e.row(r)).fed_index);
  }
  const double rms = std::sqrt(residual.squaredNorm() / static_cast<double>(residual.size()));
  for (Eigen::Index j = 0; j < 8; ++j) {
    double nearest = 1e300;
    for (Eigen::Index r = 0; r < 30; ++r) {
      nearest = std::min(nearest, (residual.row(r) - s.local().codewords().row(j)).norm());
    }
    EXPECT_LT(nearest, 10 * s.config().local_jitter * rms) << j;
  }
}

TEST(TokenizeTest, DeterministicInRangeAndPure) {
  Rng rng(17);
  const auto users = make_stream(Entity::kUser, 4, 8, 17);
  const auto items = make_stream(Entity::kItem, 4, 8, 18);
  cf::EmbeddingTable emb{"m", random_matrix(12, 4, rng), random_matrix(9, 4, rng)};
  emb.users.row(5) = emb.users.row(2);
  const TokenTable a = tokenize("m", users, items, emb);
  const TokenTable b = tokenize("m", users, items, emb);
  EXPECT_EQ(a.users, b.users);
  EXPECT_EQ(a.items, b.items);
  EXPECT_EQ(a.user(5), a.user(2));
  EXPECT_NO_THROW(a.validate());
  for (std::size_t k = 0; k < a.users.size(); ++k) {
    const QuantizationResult q = quantize(users, emb.users.row(static_cast<Eigen::Index>(k)));
    EXPECT_EQ(a.users[k], (TokenPair{q.fed_index, q.local_index}));
  }
}

TEST(TokenTableTest, CsvRoundTripAndErrors) {
  TokenTable t{"m", 8, true, {{1, 2}, {7, 0}}, {{3, 3}}};
  const auto dir = temp_dir("tokens");
  t.save_csv(dir / "u.csv", dir / "i.csv");
  const TokenTable back = TokenTable::load_csv("m", 8, true, dir / "u.csv", dir / "i.csv");
  EXPECT_EQ(back.users, t.users);
  EXPECT_EQ(back.items, t.items);
  try {
    t.item(4);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("item 4"), std::string::npos);
  }
  t.users[0].fed = 8;
  EXPECT_THROW(t.validate(), Error);
  fedcq::testing::write_text(dir / "bad.csv", "entity_id,id_fed,id_local\n1,0,0\n");
  EXPECT_THROW(TokenTable::load_csv("m", 8, true, dir / "bad.csv", dir / "i.csv"), ParseError);
  const CodebookUsage usage = back.user_usage();
  EXPECT_EQ(usage.used_fed, 2);
  EXPECT_DOUBLE_EQ(usage.local_fraction(), 0.25);
}

TEST(StreamCheckpointTest, RoundTripPreservesTokens) {
  Rng rng(19);
  auto s = make_stream(Entity::kItem, 4, 8, 19);
  s.init_local_from_data(random_matrix(20, 4, rng), rng);
  const QuantizerStream back = QuantizerStream::from_checkpoint(s.to_checkpoint());
  EXPECT_EQ(back.entity(), Entity::kItem);
  EXPECT_EQ(back.tau(), s.tau());
  const Matrix e = random_matrix(10, 4, rng);
  EXPECT_EQ(encode_all(back, e), encode_all(s, e));
  EXPECT_EQ(back.local().codewords(), s.local().codewords());
}

TEST(UtilizationTest, FractionUsedIsNonIncreasingInCodebookSize) {
  Rng rng(20);
  const Matrix e = random_matrix(200, 8, rng);
  double previous = 1.0;
  for (int T : {16, 64, 256, 512}) {
    double mean = 0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const auto s = make_stream(Entity::kUser, 8, T, seed);
      std::vector<int> used;
      for (const TokenPair& p : encode_all(s, e)) used.push_back(p.fed);
      std::sort(used.begin(), used.end());
      used.erase(std::unique(used.begin(), used.end()), used.end());
      mean += static_cast<double>(used.size()) / T / 5;
    }
    EXPECT_LE(mean, previous) << "T=" << T;
    previous = mean;
  }
}

}  // namespace
}  // namespace fedcq::quant

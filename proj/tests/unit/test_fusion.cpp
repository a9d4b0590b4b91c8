#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "common/gradcheck.hpp"
#include "fusionrec/fusion.hpp"
#include "fusionrec/model.hpp"
#include "unit/helpers.hpp"

using namespace fusionrec;

namespace {

FusionDims dims4(int32_t experts = 3, int32_t active = 2,
                 FusionVariant variant = FusionVariant::kFull) {
  FusionDims d;
  d.d_id = 3;
  d.d_sem = 4;
  d.experts = experts;
  d.active_experts = active;
  d.variant = variant;
  return d;
}

// Plain-loop reference of one expert: softmax(X q / sqrt(d)) weighted sum,
// then the value projection.
std::vector<double> expert_oracle(const std::vector<std::vector<double>>& X,
                                  const std::vector<double>& q,
                                  const std::vector<std::vector<double>>& P) {
  const std::size_t d = q.size();
  std::vector<double> logits;
  for (const auto& row : X) {
    double s = 0;
    for (std::size_t c = 0; c < d; ++c) s += row[c] * q[c];
    logits.push_back(s / std::sqrt(static_cast<double>(d)));
  }
  const double top = *std::max_element(logits.begin(), logits.end());
  double z = 0;
  for (double& l : logits) z += (l = std::exp(l - top));
  std::vector<double> ctx(d, 0.0);
  for (std::size_t t = 0; t < X.size(); ++t) {
    for (std::size_t c = 0; c < d; ++c) ctx[c] += logits[t] / z * X[t][c];
  }
  std::vector<double> out(P[0].size(), 0.0);
  for (std::size_t r = 0; r < d; ++r) {
    for (std::size_t c = 0; c < out.size(); ++c) out[c] += ctx[r] * P[r][c];
  }
  return out;
}

std::vector<std::vector<double>> rows_of(const Matrix<double>& m) {
  std::vector<std::vector<double>> out(m.rows(), std::vector<double>(m.cols()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) out[r][c] = m(r, c);
  }
  return out;
}

// Scalar top-k + softmax reference.
std::vector<double> gate_oracle(const std::vector<double>& scores, int k) {
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return scores[a] > scores[b]; });
  std::vector<double> w(scores.size(), 0.0);
  double z = 0;
  for (int i = 0; i < k; ++i) z += std::exp(scores[order[i]] - scores[order[0]]);
  for (int i = 0; i < k; ++i) w[order[i]] = std::exp(scores[order[i]] - scores[order[0]]) / z;
  return w;
}

Vector<double> vec(std::initializer_list<double> v) {
  Vector<double> out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

}  // namespace

TEST(FusionInit, TokenInitCopiedExactly) {
  const ItemCatalog catalog = fusionrec::testing::make_catalog(5, 8);
  std::vector<float> values(8 * 4);
  std::iota(values.begin(), values.end(), -3.0f);
  TensorContainer init;
  init.add(TensorEntry::from_values<float>(kTokenEmbeddingsTensor, {8, 4}, values));
  const auto params = init_fusion(catalog, dims4(), 1, &init);
  const auto& table = params.at(names::kTokenTable);
  ASSERT_EQ(table.rows(), 8);
  for (Eigen::Index i = 0; i < table.size(); ++i) EXPECT_EQ(table.data()[i], values[i]);
}

TEST(FusionInit, SameSeedIdenticalParameters) {
  const ItemCatalog catalog = fusionrec::testing::make_catalog(5, 8);
  EXPECT_EQ(init_fusion(catalog, dims4(), 9), init_fusion(catalog, dims4(), 9));
  EXPECT_NE(init_fusion(catalog, dims4(), 9), init_fusion(catalog, dims4(), 10));
}

TEST(FusionInit, TokenInitShapeMismatch) {
  const ItemCatalog catalog = fusionrec::testing::make_catalog(5, 8);
  TensorContainer init;
  init.add(TensorEntry::from_values<float>(kTokenEmbeddingsTensor, {8, 3},
                                           std::vector<float>(24, 0.0f)));
  try {
    init_fusion(catalog, dims4(), 1, &init);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kShapeMismatch);
  }
}

TEST(FusionInit, PaddingRowZeroAndScaleNearInitStddev) {
  ItemCatalog catalog = fusionrec::testing::make_catalog(400, 50);
  FusionDims d = dims4();
  d.d_id = 16;
  const auto params = init_fusion(catalog, d, 3);
  const auto& ids = params.at(names::kIdTable);
  EXPECT_TRUE(ids.row(kPaddingItem).isZero());
  const auto body = ids.bottomRows(ids.rows() - 1);
  const double mean = body.cast<double>().mean();
  const double sd = std::sqrt((body.cast<double>().array() - mean).square().mean());
  EXPECT_NEAR(mean, 0.0, 0.002);
  EXPECT_NEAR(sd, 0.02, 0.001);
}

TEST(Expert, SingleTokenIgnoresQuery) {
  std::mt19937_64 rng(1);
  const Matrix<double> X = Matrix<double>::Random(1, 4);
  const Matrix<double> P = Matrix<double>::Random(4, 4);
  const Vector<double> expected = X.row(0) * P;
  for (int trial = 0; trial < 3; ++trial) {
    const Vector<double> q = Vector<double>::Random(4) * 10.0;
    EXPECT_TRUE(expert_attend<double>(X, q, P).isApprox(expected, 1e-14));
  }
}

TEST(Expert, IdenticalRowsGiveRowTimesProjection) {
  const Vector<double> v = vec({0.5, -1.0, 2.0, 0.25});
  Matrix<double> X(3, 4);
  X << v, v, v;
  const Matrix<double> P = Matrix<double>::Random(4, 4);
  EXPECT_TRUE(expert_attend<double>(X, Vector<double>::Random(4), P).isApprox(v * P, 1e-14));
}

TEST(Expert, MatchesHandComputedWeightedSum) {
  Matrix<double> X(3, 2);
  X << 1.0, 0.0, 0.0, 2.0, -1.0, 1.0;
  const Vector<double> q = vec({0.3, -0.7});
  Matrix<double> P(2, 2);
  P << 1.0, 0.5, -0.5, 2.0;
  // logits / sqrt(2): (0.3, -1.4, -1.0) / 1.41421356...
  const double s = std::sqrt(2.0);
  const double e0 = std::exp(0.3 / s), e1 = std::exp(-1.4 / s), e2 = std::exp(-1.0 / s);
  const double z = e0 + e1 + e2;
  const double c0 = (e0 * 1.0 + e2 * -1.0) / z;
  const double c1 = (e1 * 2.0 + e2 * 1.0) / z;
  const Vector<double> got = expert_attend<double>(X, q, P);
  EXPECT_NEAR(got[0], c0 * 1.0 + c1 * -0.5, 1e-14);
  EXPECT_NEAR(got[1], c0 * 0.5 + c1 * 2.0, 1e-14);
}

TEST(Gate, EqualScoresSplitEvenly) {
  const auto g = gate_from_scores<double>(vec({0.3, 0.3}), 2);
  EXPECT_DOUBLE_EQ(g.weights[0], 0.5);
  EXPECT_DOUBLE_EQ(g.weights[1], 0.5);
}

TEST(Gate, TopOneIsArgmax) {
  const auto g = gate_from_scores<double>(vec({0.1, 0.9, -2.0, 0.5}), 1);
  EXPECT_EQ(g.weights, vec({0.0, 1.0, 0.0, 0.0}));
  EXPECT_EQ(g.selected, std::vector<int32_t>{1});
}

TEST(Gate, SoftmaxOfSelectedScores) {
  const auto g = gate_from_scores<double>(vec({1.0, 2.0, 0.0}), 2);
  EXPECT_NEAR(g.weights[0], 0.2689414213699951, 1e-12);
  EXPECT_NEAR(g.weights[1], 0.7310585786300049, 1e-12);
  EXPECT_EQ(g.weights[2], 0.0);
}

TEST(Gate, TiesGoToLowerIndex) {
  const auto g = gate_from_scores<double>(vec({0.0, 1.0, 1.0, 1.0}), 2);
  EXPECT_EQ(g.selected, (std::vector<int32_t>{1, 2}));
  EXPECT_EQ(g.weights[3], 0.0);
}

TEST(Gate, InvalidKRejected) {
  EXPECT_THROW(gate_from_scores<double>(vec({1.0, 2.0}), 0), Error);
  EXPECT_THROW(gate_from_scores<double>(vec({1.0, 2.0}), 3), Error);
}

TEST(Gate, PropertiesOverRandomGates) {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> normal(0.0, 2.0);
  for (int trial = 0; trial < 300; ++trial) {
    const int K = 1 + static_cast<int>(rng() % 8);
    const int k = 1 + static_cast<int>(rng() % K);
    Vector<double> s(K);
    std::vector<double> raw(K);
    for (int j = 0; j < K; ++j) raw[j] = s[j] = normal(rng);
    const auto g = gate_from_scores<double>(s, k);
    const auto oracle = gate_oracle(raw, k);
    int nonzero = 0;
    for (int j = 0; j < K; ++j) {
      EXPECT_GE(g.weights[j], 0.0);
      nonzero += g.weights[j] != 0.0;
      EXPECT_NEAR(g.weights[j], oracle[j], 1e-12);
    }
    EXPECT_EQ(nonzero, k);
    EXPECT_NEAR(g.weights.sum(), 1.0, 1e-6);
    Eigen::Index argmax;
    s.maxCoeff(&argmax);
    EXPECT_NE(std::find(g.selected.begin(), g.selected.end(), argmax), g.selected.end());
    for (double c : {-10.0, 3.0, 100.0}) {
      const auto shifted = gate_from_scores<double>((s.array() + c).matrix(), k);
      EXPECT_EQ(shifted.selected, g.selected);
      EXPECT_LE((shifted.weights - g.weights).cwiseAbs().maxCoeff(), 1e-6);
    }
  }
}

TEST(Gate, MeanPoolsTokensBeforeProjection) {
  Matrix<double> X(2, 2);
  X << 1.0, 3.0, 3.0, -1.0;
  Matrix<double> W(2, 3);
  W << 1.0, 0.0, -1.0, 0.0, 1.0, 2.0;
  // pooled = (2, 1) -> scores (2, 1, 0)
  const auto g = gate<double>(X, W, 3);
  EXPECT_TRUE(g.scores.isApprox(vec({2.0, 1.0, 0.0})));
}

class FuseItemTest : public ::testing::Test {
 protected:
  void SetUp() override {
    catalog.add("plain", {0, 1, 2});
    catalog.add("empty", {});
    catalog.add("single", {3});
    catalog.set_vocab_size(5);
  }
  ParamSet<double> params(const FusionDims& d, uint64_t seed = 4) const {
    return cast_params<double>(init_fusion(catalog, d, seed));
  }
  ItemCatalog catalog;
};

TEST_F(FuseItemTest, ZeroTokenItemHasZeroSemanticHalf) {
  const auto d = dims4();
  const auto p = params(d);
  const Vector<double> e = fuse_item<double>(p, d, catalog, 2);
  EXPECT_TRUE(e.tail(d.d_sem).isZero());
  EXPECT_EQ(e.head(d.d_id), p.at(names::kIdTable).row(2));
}

TEST_F(FuseItemTest, SingleExpertEqualsExpertAttend) {
  const auto d = dims4(1, 1);
  const auto p = params(d);
  const Vector<double> e = fuse_item<double>(p, d, catalog, 1);
  const Matrix<double> X = token_matrix<double>(p.at(names::kTokenTable), catalog.tokens(1));
  const Vector<double> expected =
      expert_attend<double>(X, p.at(names::kExpertQuery).row(0), expert_value(p, 0, d.d_sem));
  EXPECT_TRUE(e.tail(d.d_sem).isApprox(expected, 1e-14));
}

TEST_F(FuseItemTest, MatchesCompositionOfOracles) {
  const auto d = dims4(3, 2);
  const auto p = params(d, 11);
  const Matrix<double> X = token_matrix<double>(p.at(names::kTokenTable), catalog.tokens(1));
  const Vector<double> pooled = X.colwise().mean();
  std::vector<double> scores(3);
  for (int j = 0; j < 3; ++j) scores[j] = pooled.dot(p.at(names::kGate).col(j).transpose());
  const auto w = gate_oracle(scores, 2);
  std::vector<double> expected(d.d_sem, 0.0);
  for (int j = 0; j < 3; ++j) {
    if (w[j] == 0.0) continue;
    const Matrix<double> q = p.at(names::kExpertQuery).row(j);
    const auto out = expert_oracle(rows_of(X), rows_of(q)[0],
                                   rows_of(p.at(names::kExpertValue).block(j * 4, 0, 4, 4)));
    for (int c = 0; c < d.d_sem; ++c) expected[c] += w[j] * out[c];
  }
  const Vector<double> e = fuse_item<double>(p, d, catalog, 1);
  for (int c = 0; c < d.d_sem; ++c) EXPECT_NEAR(e[d.d_id + c], expected[c], 1e-14);
}

TEST_F(FuseItemTest, IdHalfBitEqualToTable) {
  const auto d = dims4();
  const auto p = params(d);
  for (int32_t i = 1; i <= 3; ++i) {
    const Vector<double> e = fuse_item<double>(p, d, catalog, i);
    for (int c = 0; c < d.d_id; ++c) EXPECT_EQ(e[c], p.at(names::kIdTable)(i, c));
  }
}

TEST_F(FuseItemTest, VariantsMaskHalves) {
  const auto full = dims4();
  const auto p = params(full);
  const Vector<double> e_full = fuse_item<double>(p, full, catalog, 1);
  auto d = full;
  d.variant = FusionVariant::kIdOnly;
  const Vector<double> id_only = fuse_item<double>(p, d, catalog, 1);
  EXPECT_EQ(id_only.head(d.d_id), e_full.head(d.d_id));
  EXPECT_TRUE(id_only.tail(d.d_sem).isZero());
  d.variant = FusionVariant::kLlmOnly;
  const Vector<double> llm = fuse_item<double>(p, d, catalog, 1);
  EXPECT_TRUE(llm.head(d.d_id).isZero());
  EXPECT_EQ(llm.tail(d.d_sem), e_full.tail(d.d_sem));
  d.variant = FusionVariant::kPool;
  const Vector<double> pool = fuse_item<double>(p, d, catalog, 1);
  const Matrix<double> X = token_matrix<double>(p.at(names::kTokenTable), catalog.tokens(1));
  EXPECT_TRUE(pool.tail(d.d_sem).isApprox(Vector<double>(X.colwise().mean()), 1e-14));
}

TEST_F(FuseItemTest, UnknownItemRejected) {
  const auto d = dims4();
  const auto p = params(d);
  EXPECT_THROW(fuse_item<double>(p, d, catalog, 4), Error);
  EXPECT_THROW(fuse_item<double>(p, d, catalog, 0), Error);
}

TEST_F(FuseItemTest, EmbedSequenceStacksRowsAndZeroesPadding) {
  const auto d = dims4();
  const auto p = params(d);
  const std::vector<int32_t> items{3, 1, kPaddingItem};
  const Matrix<double> E = embed_sequence<double>(p, d, catalog, items);
  EXPECT_EQ(E.row(0), fuse_item<double>(p, d, catalog, 3));
  EXPECT_EQ(E.row(1), fuse_item<double>(p, d, catalog, 1));
  EXPECT_TRUE(E.row(2).isZero());
  const std::vector<int32_t> swapped{1, 3, kPaddingItem};
  const Matrix<double> S = embed_sequence<double>(p, d, catalog, swapped);
  EXPECT_EQ(S.row(0), E.row(1));
  EXPECT_EQ(S.row(1), E.row(0));
}

TEST_F(FuseItemTest, TapeVersionMatchesDirectVersion) {
  for (auto variant : {FusionVariant::kFull, FusionVariant::kPool, FusionVariant::kLlmOnly,
                       FusionVariant::kIdOnly}) {
    const auto d = dims4(3, 2, variant);
    const auto p = params(d);
    ad::Tape<double> tape;
    auto bind = ParamBinder<double>::inference(tape, p);
    const Matrix<double> got = tape.value(fuse_items<double>(bind, d, catalog, {1, 2, 3, 1}));
    for (int r = 0; r < 4; ++r) {
      const int32_t item = r == 3 ? 1 : r + 1;
      const Vector<double> expected = fuse_item<double>(p, d, catalog, item);
      EXPECT_LE((got.row(r) - expected).cwiseAbs().maxCoeff(), 1e-15);
    }
  }
}

TEST_F(FuseItemTest, GradientsMatchFiniteDifferences) {
  for (auto variant : {FusionVariant::kFull, FusionVariant::kPool}) {
    const auto d = dims4(3, 2, variant);
    const auto p = params(d, 21);
    ParamSet<double> scaled = p;
    for (auto& [name, m] : scaled) m *= 30.0;
    std::mt19937_64 rng(5);
    const Matrix<double> weights = Matrix<double>::Random(3, d.d_model());
    const auto r = fusionrec::testing::gradient_check(scaled, [&](ParamBinder<double>& bind) {
      auto& t = bind.tape();
      const ad::Var e = fuse_items<double>(bind, d, catalog, {1, 2, 3});
      const ad::Var flat = ad::reshape(t, e, 1, 3 * d.d_model());
      const ad::Var w = t.constant(Eigen::Map<const Matrix<double>>(weights.data(), 3 * d.d_model(), 1));
      return ad::matmul(t, flat, w);
    });
    EXPECT_LE(r.max_relative_error, 1e-5) << r.worst_tensor;
  }
}

TEST(FusionVariantNames, RoundTrip) {
  for (auto v : {FusionVariant::kFull, FusionVariant::kPool, FusionVariant::kLlmOnly,
                 FusionVariant::kIdOnly}) {
    EXPECT_EQ(parse_fusion_variant(to_string(v)), v);
  }
  EXPECT_THROW(parse_fusion_variant("bogus"), Error);
}

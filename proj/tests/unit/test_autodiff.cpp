#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "common/gradcheck.hpp"
#include "fusionrec/autodiff.hpp"
#include "fusionrec/params.hpp"

using namespace fusionrec;
using fusionrec::testing::gradient_check;

namespace {

Matrix<double> random_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols,
                             double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Matrix<double> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  return m;
}

// Weighted sum so every output element gets a distinct upstream gradient.
ad::Var weighted_sum(ad::Tape<double>& tape, ad::Var x, uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto& X = tape.value(x);
  const ad::Var w = tape.constant(random_matrix(rng, X.rows(), X.cols()));
  const ad::Var flat_x = ad::reshape(tape, x, 1, X.size());
  const ad::Var flat_w = ad::reshape(tape, w, X.size(), 1);
  return ad::matmul(tape, flat_x, flat_w);
}

constexpr double kTolerance = 1e-5;

}  // namespace

TEST(Autodiff, MatmulAddLinearGradients) {
  std::mt19937_64 rng(1);
  ParamSet<double> p{{"a", random_matrix(rng, 3, 4)},
                     {"b", random_matrix(rng, 4, 2)},
                     {"c", random_matrix(rng, 3, 2)},
                     {"bias", random_matrix(rng, 1, 2)}};
  const auto r = gradient_check(p, [](ParamBinder<double>& bind) {
    auto& t = bind.tape();
    ad::Var y = ad::linear(t, bind("a"), bind("b"), bind("bias"));
    y = ad::add(t, y, bind("c"));
    return weighted_sum(t, ad::scale(t, y, 1.7), 2);
  });
  EXPECT_EQ(r.bound.size(), 4u);
  EXPECT_LE(r.max_relative_error, kTolerance) << r.worst_tensor;
}

TEST(Autodiff, GeluGradient) {
  std::mt19937_64 rng(2);
  ParamSet<double> p{{"x", random_matrix(rng, 4, 5, 2.0)}};
  const auto r = gradient_check(p, [](ParamBinder<double>& bind) {
    return weighted_sum(bind.tape(), ad::gelu(bind.tape(), bind("x")), 3);
  });
  EXPECT_LE(r.max_relative_error, kTolerance) << r.worst_tensor;
}

TEST(Autodiff, GeluMatchesErfDefinition) {
  for (double x : {-3.0, -0.5, 0.0, 0.7, 2.5}) {
    EXPECT_NEAR(ad::gelu_value(x), 0.5 * x * (1 + std::erf(x / std::sqrt(2.0))), 1e-15);
  }
}

TEST(Autodiff, LayerNormGradient) {
  std::mt19937_64 rng(3);
  ParamSet<double> p{{"x", random_matrix(rng, 5, 6)},
                     {"g", random_matrix(rng, 1, 6)},
                     {"b", random_matrix(rng, 1, 6)}};
  const auto r = gradient_check(p, [](ParamBinder<double>& bind) {
    auto& t = bind.tape();
    return weighted_sum(t, ad::layer_norm(t, bind("x"), bind("g"), bind("b")), 4);
  });
  EXPECT_LE(r.max_relative_error, 1e-5) << r.worst_tensor << " " << r.worst_analytic << " "
                                        << r.worst_numeric;
}

TEST(Autodiff, LayerNormRowsHaveZeroMeanUnitVariance) {
  std::mt19937_64 rng(4);
  ad::Tape<double> t;
  const auto y = ad::layer_norm(t, t.constant(random_matrix(rng, 3, 8, 5.0)),
                                t.constant(Matrix<double>::Ones(1, 8)),
                                t.constant(Matrix<double>::Zero(1, 8)));
  for (Eigen::Index r = 0; r < 3; ++r) {
    const auto row = t.value(y).row(r);
    EXPECT_NEAR(row.mean(), 0.0, 1e-12);
    EXPECT_NEAR((row.array() - row.mean()).square().mean(), 1.0, 1e-5);
  }
}

TEST(Autodiff, GatherMaskReshapeGradients) {
  std::mt19937_64 rng(5);
  ParamSet<double> p{{"table", random_matrix(rng, 5, 3)}};
  const auto r = gradient_check(p, [](ParamBinder<double>& bind) {
    auto& t = bind.tape();
    ad::Var g = ad::gather_rows(t, bind("table"), {4, 0, -1, 4, 2, 1});
    g = ad::mask_rows(t, g, {1, 1, 1, 0, 1, 1});
    g = ad::reshape(t, g, 3, 6);
    return weighted_sum(t, g, 6);
  });
  EXPECT_LE(r.max_relative_error, kTolerance);
}

TEST(Autodiff, GatherNegativeIndexGivesZeroRow) {
  ad::Tape<double> t;
  const auto g = ad::gather_rows(t, t.constant(Matrix<double>::Ones(2, 3)), {-1, 1});
  EXPECT_TRUE(t.value(g).row(0).isZero());
  EXPECT_TRUE(t.value(g).row(1).isOnes());
}

TEST(Autodiff, AttentionGradientsBothModes) {
  for (auto mode : {ad::MaskMode::kCausal, ad::MaskMode::kNone}) {
    std::mt19937_64 rng(6);
    ParamSet<double> p{{"q", random_matrix(rng, 8, 4)},
                       {"k", random_matrix(rng, 8, 4)},
                       {"v", random_matrix(rng, 8, 4)}};
    const auto r = gradient_check(p, [mode](ParamBinder<double>& bind) {
      auto& t = bind.tape();
      const int32_t lengths[] = {4, 2};
      return weighted_sum(
          t, ad::attention(t, bind("q"), bind("k"), bind("v"), 2, 4, lengths, 2, mode), 7);
    });
    EXPECT_LE(r.max_relative_error, 1e-5) << r.worst_tensor;
  }
}

TEST(Autodiff, AttentionRowsAreConvexCombinationsOfValidValues) {
  std::mt19937_64 rng(7);
  ad::Tape<double> t;
  const Matrix<double> V = random_matrix(rng, 4, 2);
  const int32_t lengths[] = {2};
  const auto out = ad::attention(t, t.constant(random_matrix(rng, 4, 2)),
                                 t.constant(random_matrix(rng, 4, 2)), t.constant(V), 1, 4,
                                 lengths, 1, ad::MaskMode::kNone);
  // Only rows 0 and 1 are valid keys, so every output lies on their segment.
  for (Eigen::Index r = 0; r < 4; ++r) {
    const Eigen::RowVector2d o = t.value(out).row(r);
    const Eigen::RowVector2d a = V.row(0), b = V.row(1);
    const double lambda = (o - b).dot(a - b) / (a - b).squaredNorm();
    EXPECT_GE(lambda, -1e-12);
    EXPECT_LE(lambda, 1 + 1e-12);
    EXPECT_NEAR(((b + lambda * (a - b)) - o).norm(), 0.0, 1e-12);
  }
}

TEST(Autodiff, SumOfOutputsGivesOnesGradient) {
  ad::Tape<double> t;
  const ad::Var x = t.variable(Matrix<double>::Random(3, 2));
  t.backward(ad::sum(t, ad::scale(t, x, 1.0)));
  EXPECT_TRUE(t.grad(x).isOnes());
}

TEST(Autodiff, ConstantLossGivesZeroGradients) {
  std::mt19937_64 rng(8);
  ad::Tape<double> t;
  const ad::Var x = t.variable(random_matrix(rng, 2, 2));
  const ad::Var y = ad::scale(t, x, 0.0);
  t.backward(ad::sum(t, y));
  EXPECT_TRUE(t.grad(x).isZero());
}

TEST(Autodiff, ShapeMismatchRejected) {
  ad::Tape<double> t;
  const ad::Var a = t.constant(Matrix<double>::Zero(2, 3));
  const ad::Var b = t.constant(Matrix<double>::Zero(2, 3));
  EXPECT_THROW(ad::matmul(t, a, b), Error);
  EXPECT_THROW(ad::add(t, a, t.constant(Matrix<double>::Zero(3, 2))), Error);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  ParamSet<double> p{{"w", Matrix<double>::Constant(2, 2, 0.5)}};
  AdamState<double> state;
  adam_step(p, {{"w", Matrix<double>::Zero(2, 2)}}, state, 0.1);
  EXPECT_TRUE(p.at("w").isApprox(Matrix<double>::Constant(2, 2, 0.5)));
}

TEST(Adam, FirstStepMovesByLearningRate) {
  ParamSet<double> p{{"w", Matrix<double>::Constant(1, 1, 2.0)}};
  AdamState<double> state;
  adam_step(p, {{"w", Matrix<double>::Constant(1, 1, 1.0)}}, state, 0.1);
  // m_hat = 1, v_hat = 1, step = lr / (1 + eps)
  EXPECT_NEAR(p.at("w")(0, 0), 2.0 - 0.1 / (1.0 + 1e-8), 1e-12);
  EXPECT_EQ(state.steps.at("w"), 1);
}

TEST(Adam, DescendsQuadratic) {
  ParamSet<double> p{{"x", Matrix<double>::Constant(1, 1, 1.0)}};
  AdamState<double> state;
  double previous = 1.0;
  for (int i = 0; i < 10; ++i) {
    adam_step(p, {{"x", 2.0 * p.at("x")}}, state, 0.05);
    EXPECT_LT(std::abs(p.at("x")(0, 0)), previous);
    previous = std::abs(p.at("x")(0, 0));
  }
}

TEST(Adam, NonFiniteGradientNamesTensorAndUpdatesNothing) {
  ParamSet<double> p{{"a", Matrix<double>::Ones(1, 1)}, {"b", Matrix<double>::Ones(1, 1)}};
  AdamState<double> state;
  ParamSet<double> g{{"a", Matrix<double>::Ones(1, 1)},
                     {"b", Matrix<double>::Constant(1, 1, std::nan(""))}};
  try {
    adam_step(p, g, state, 0.1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kNonFinite);
    EXPECT_NE(std::string(e.what()).find("'b'"), std::string::npos);
  }
  EXPECT_EQ(p.at("a")(0, 0), 1.0);
  EXPECT_TRUE(state.steps.empty());
}

TEST(Adam, SkipSetAndResetKeepPerTensorSteps) {
  ParamSet<double> p{{"a", Matrix<double>::Ones(1, 1)}, {"b", Matrix<double>::Ones(1, 1)}};
  AdamState<double> state;
  const ParamSet<double> g{{"a", Matrix<double>::Ones(1, 1)}, {"b", Matrix<double>::Ones(1, 1)}};
  const std::set<std::string> skip{"b"};
  adam_step(p, g, state, 0.1, {}, &skip);
  adam_step(p, g, state, 0.1, {}, &skip);
  EXPECT_EQ(p.at("b")(0, 0), 1.0);
  EXPECT_EQ(state.steps.count("b"), 0u);
  adam_step(p, g, state, 0.1);
  EXPECT_EQ(state.steps.at("a"), 3);
  EXPECT_EQ(state.steps.at("b"), 1);
  // First unskipped step of b is a fresh bias-corrected step.
  EXPECT_NEAR(p.at("b")(0, 0), 1.0 - 0.1 / (1.0 + 1e-8), 1e-12);
  state.reset("a");
  EXPECT_EQ(state.first_moment.count("a"), 0u);
}

TEST(ParamBinder, FrozenNamesGetNoGradient) {
  ParamSet<double> p{{"a", Matrix<double>::Ones(2, 2)}, {"b", Matrix<double>::Ones(2, 2)}};
  const std::set<std::string> frozen{"b"};
  ad::Tape<double> t;
  ParamBinder<double> bind(t, p, &frozen);
  t.backward(ad::sum(t, ad::add(t, bind("a"), bind("b"))));
  EXPECT_TRUE(bind.gradients().at("a").isOnes());
  EXPECT_TRUE(bind.gradients().at("b").isZero());
  EXPECT_FALSE(t.requires_grad(bind("b")));
}

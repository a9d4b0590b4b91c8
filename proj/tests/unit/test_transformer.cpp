#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "common/gradcheck.hpp"
#include "fusionrec/model.hpp"
#include "fusionrec/transformer.hpp"

using namespace fusionrec;

namespace {

using Mat = std::vector<std::vector<double>>;

Mat to_rows(const Matrix<double>& m) {
  Mat out(m.rows(), std::vector<double>(m.cols()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) out[r][c] = m(r, c);
  }
  return out;
}

Mat affine(const Mat& x, const Matrix<double>& w, const Matrix<double>& b) {
  Mat out(x.size(), std::vector<double>(w.cols()));
  for (std::size_t r = 0; r < x.size(); ++r) {
    for (Eigen::Index c = 0; c < w.cols(); ++c) {
      double s = b(0, c);
      for (std::size_t k = 0; k < x[r].size(); ++k) s += x[r][k] * w(k, c);
      out[r][c] = s;
    }
  }
  return out;
}

Mat norm(const Mat& x, const Matrix<double>& g, const Matrix<double>& b) {
  Mat out = x;
  for (std::size_t r = 0; r < x.size(); ++r) {
    double mean = 0, var = 0;
    for (double v : x[r]) mean += v;
    mean /= x[r].size();
    for (double v : x[r]) var += (v - mean) * (v - mean);
    var /= x[r].size();
    for (std::size_t c = 0; c < x[r].size(); ++c) {
      out[r][c] = (x[r][c] - mean) / std::sqrt(var + 1e-5) * g(0, c) + b(0, c);
    }
  }
  return out;
}

// Straightforward re-implementation of the pre-norm block stack.
Mat reference_forward(const ParamSet<double>& p, const StackDims& dims, const Mat& input,
                      bool causal, int valid) {
  const int n = dims.max_len;
  const std::size_t d = input[0].size();
  Mat x(n, std::vector<double>(d, 0.0));
  for (int t = 0; t < n; ++t) {
    for (std::size_t c = 0; c < d; ++c) {
      x[t][c] = (t < static_cast<int>(input.size()) ? input[t][c] : 0.0) +
                p.at(names::kPositions)(t, c);
    }
  }
  auto P = [&](int l, const char* leaf) -> const Matrix<double>& {
    return p.at(names::layer(l, leaf));
  };
  const std::size_t dh = d / dims.heads;
  for (int l = 0; l < dims.layers; ++l) {
    const Mat a = norm(x, P(l, "ln1.gain"), P(l, "ln1.bias"));
    const Mat q = affine(a, P(l, "attn.wq"), P(l, "attn.bq"));
    const Mat k = affine(a, P(l, "attn.wk"), P(l, "attn.bk"));
    const Mat v = affine(a, P(l, "attn.wv"), P(l, "attn.bv"));
    Mat ctx(n, std::vector<double>(d, 0.0));
    for (int h = 0; h < dims.heads; ++h) {
      for (int i = 0; i < n; ++i) {
        std::vector<double> w;
        std::vector<int> keys;
        for (int j = 0; j < n; ++j) {
          if (j >= valid || (causal && j > i)) continue;
          double s = 0;
          for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) s += q[i][c] * k[j][c];
          w.push_back(s / std::sqrt(static_cast<double>(dh)));
          keys.push_back(j);
        }
        if (keys.empty()) continue;
        double top = w[0];
        for (double s : w) top = std::max(top, s);
        double z = 0;
        for (double& s : w) z += (s = std::exp(s - top));
        for (std::size_t m = 0; m < keys.size(); ++m) {
          for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) ctx[i][c] += w[m] / z * v[keys[m]][c];
        }
      }
    }
    const Mat o = affine(ctx, P(l, "attn.wo"), P(l, "attn.bo"));
    for (int t = 0; t < n; ++t) {
      for (std::size_t c = 0; c < d; ++c) x[t][c] += o[t][c];
    }
    Mat f = affine(norm(x, P(l, "ln2.gain"), P(l, "ln2.bias")), P(l, "ffn.w1"), P(l, "ffn.b1"));
    for (auto& row : f) {
      for (double& u : row) u = 0.5 * u * (1.0 + std::erf(u / std::sqrt(2.0)));
    }
    const Mat y = affine(f, P(l, "ffn.w2"), P(l, "ffn.b2"));
    for (int t = 0; t < n; ++t) {
      for (std::size_t c = 0; c < d; ++c) x[t][c] += y[t][c];
    }
  }
  return x;
}

ParamSet<double> random_stack(const StackDims& dims, int32_t d_model, uint64_t seed,
                              double scale = 1.0) {
  ParamSet<float> p;
  init_stack(p, dims, d_model, seed);
  auto out = cast_params<double>(p);
  std::mt19937_64 rng(seed + 1000);
  std::normal_distribution<double> normal(0.0, 1.0);
  // Perturb gains and biases away from their identity init and widen weights.
  for (auto& [name, m] : out) {
    const bool gain = name.find("gain") != std::string::npos;
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      m.data()[i] = gain ? 1.0 + 0.1 * normal(rng) : m.data()[i] * scale * 20.0 + 0.1 * normal(rng);
    }
  }
  return out;
}

Matrix<double> random_input(std::mt19937_64& rng, int n, int d) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix<double> m(n, d);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  return m;
}

StackDims small_dims(int layers = 2, int n = 4) {
  StackDims d;
  d.layers = layers;
  d.heads = 2;
  d.d_ff = 16;
  d.max_len = n;
  return d;
}

}  // namespace

TEST(Transformer, EmptyStackAddsPositions) {
  const StackDims dims = small_dims(0, 4);
  const auto p = random_stack(dims, 8, 1);
  std::mt19937_64 rng(1);
  const Matrix<double> E = random_input(rng, 3, 8);
  const auto layers = forward_sequence<double>(p, dims, E, MaskMode::kCausal, 3);
  ASSERT_EQ(layers.size(), 1u);
  EXPECT_TRUE(layers[0].isApprox(E + p.at(names::kPositions).topRows(3)));
}

TEST(Transformer, MatchesReferenceForward) {
  const StackDims dims = small_dims(2, 4);
  for (uint64_t seed = 0; seed < 5; ++seed) {
    const auto p = random_stack(dims, 8, seed);
    std::mt19937_64 rng(seed);
    const Matrix<double> E = random_input(rng, 4, 8);
    for (bool causal : {true, false}) {
      for (int valid : {4, 2}) {
        const auto got = forward_sequence<double>(
            p, dims, E, causal ? MaskMode::kCausal : MaskMode::kNone, valid);
        const Mat expected = reference_forward(p, dims, to_rows(E), causal, valid);
        for (int t = 0; t < 4; ++t) {
          for (int c = 0; c < 8; ++c) EXPECT_NEAR(got.back()(t, c), expected[t][c], 1e-5);
        }
      }
    }
  }
}

TEST(Transformer, PositionZeroIgnoresLaterItemsUnderCausalMask) {
  const StackDims dims = small_dims(2, 4);
  const auto p = random_stack(dims, 8, 3);
  std::mt19937_64 rng(3);
  Matrix<double> E = random_input(rng, 4, 8);
  const auto before = forward_sequence<double>(p, dims, E, MaskMode::kCausal, 4);
  E.row(1) += random_input(rng, 1, 8) * 5.0;
  const auto after = forward_sequence<double>(p, dims, E, MaskMode::kCausal, 4);
  for (std::size_t l = 0; l < before.size(); ++l) {
    EXPECT_LE((before[l].row(0) - after[l].row(0)).cwiseAbs().maxCoeff(), 1e-6);
  }
  EXPECT_GT((before.back().row(1) - after.back().row(1)).cwiseAbs().maxCoeff(), 1e-3);
}

TEST(Transformer, CausalInvarianceEveryLayerRandomInstances) {
  const StackDims dims = small_dims(2, 6);
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = random_stack(dims, 8, 100 + trial);
    Matrix<double> E = random_input(rng, 6, 8);
    const int j = 1 + static_cast<int>(rng() % 5);
    const auto before = forward_sequence<double>(p, dims, E, MaskMode::kCausal, 6);
    E.row(j) += random_input(rng, 1, 8);
    const auto after = forward_sequence<double>(p, dims, E, MaskMode::kCausal, 6);
    for (std::size_t l = 0; l < before.size(); ++l) {
      EXPECT_LE((before[l].topRows(j) - after[l].topRows(j)).cwiseAbs().maxCoeff(), 1e-6);
    }
  }
}

TEST(Transformer, BidirectionalSensitivity) {
  const StackDims dims = small_dims(2, 6);
  std::mt19937_64 rng(19);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = random_stack(dims, 8, 200 + trial);
    Matrix<double> E = random_input(rng, 6, 8);
    const auto before = forward_sequence<double>(p, dims, E, MaskMode::kNone, 6);
    E.row(5) += random_input(rng, 1, 8);
    const auto after = forward_sequence<double>(p, dims, E, MaskMode::kNone, 6);
    EXPECT_GT((before.back().row(0) - after.back().row(0)).cwiseAbs().maxCoeff(), 1e-3);
  }
}

TEST(Transformer, PaddedPositionsDoNotInfluenceValidRows) {
  const StackDims dims = small_dims(2, 5);
  const auto p = random_stack(dims, 8, 7);
  std::mt19937_64 rng(7);
  Matrix<double> E = random_input(rng, 5, 8);
  const auto before = forward_sequence<double>(p, dims, E, MaskMode::kNone, 3);
  E.bottomRows(2) = random_input(rng, 2, 8);
  const auto after = forward_sequence<double>(p, dims, E, MaskMode::kNone, 3);
  EXPECT_LE((before.back().topRows(3) - after.back().topRows(3)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Transformer, LongerThanMaxLenRejected) {
  const StackDims dims = small_dims(1, 3);
  const auto p = random_stack(dims, 8, 1);
  std::mt19937_64 rng(1);
  EXPECT_THROW(forward_sequence<double>(p, dims, random_input(rng, 4, 8), MaskMode::kCausal, 4),
               Error);
}

TEST(Transformer, ForwardIsBitDeterministic) {
  const StackDims dims = small_dims(2, 4);
  const auto p = random_stack(dims, 8, 9);
  std::mt19937_64 rng(9);
  const Matrix<double> E = random_input(rng, 4, 8);
  const auto a = forward_sequence<double>(p, dims, E, MaskMode::kCausal, 4);
  const auto b = forward_sequence<double>(p, dims, E, MaskMode::kCausal, 4);
  for (std::size_t l = 0; l < a.size(); ++l) EXPECT_EQ(a[l], b[l]);
}

TEST(Transformer, StackGradientsMatchFiniteDifferences) {
  const StackDims dims = small_dims(2, 4);
  ParamSet<double> p = random_stack(dims, 8, 13, 0.5);
  std::mt19937_64 rng(13);
  p.emplace("input", random_input(rng, 8, 8));
  const Matrix<double> weights = random_input(rng, 64, 1);
  for (auto mode : {MaskMode::kCausal, MaskMode::kNone}) {
    const auto r = fusionrec::testing::gradient_check(p, [&](ParamBinder<double>& bind) {
      auto& t = bind.tape();
      const int32_t lengths[] = {4, 3};
      const StackOutput out = stack_forward<double>(bind, dims, bind("input"), 2, lengths, mode);
      return ad::matmul(t, ad::reshape(t, out.last(), 1, 64), t.constant(weights));
    });
    EXPECT_LE(r.max_relative_error, 1e-4)
        << r.worst_tensor << "[" << r.worst_index << "] " << r.worst_analytic << " vs "
        << r.worst_numeric;
    EXPECT_EQ(r.bound.size(), p.size());
  }
}

#pragma once

#include <random>
#include <string>
#include <vector>

#include "fusionrec/model.hpp"
#include "fusionrec/targeted.hpp"
#include "fusionrec/universal.hpp"

namespace fusionrec::testing {

// 2 layers, d_model 8, n 6, K 2 experts in f64. Weights are widened from the
// 0.02 init so the checked gradients are well away from zero.
struct GradFixture {
  ItemCatalog catalog;
  ModelDims dims;
  ParamSet<double> params;
  Batch universal_batch;
  TargetBatch target_batch;
  int32_t n_contrast = 3;
};

inline GradFixture make_grad_fixture(uint64_t seed = 7) {
  GradFixture f;
  const std::vector<std::vector<int32_t>> tokens = {
      {0, 1, 2}, {3}, {4, 5}, {}, {6, 7, 8, 9}, {1, 10}, {11, 2}, {5, 6, 7}, {8}, {9, 0}};
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    f.catalog.add("g" + std::to_string(i), tokens[i]);
  }
  f.catalog.set_vocab_size(12);
  f.dims.fusion.d_id = 4;
  f.dims.fusion.d_sem = 4;
  f.dims.fusion.experts = 2;
  f.dims.fusion.active_experts = 2;
  f.dims.stack.layers = 2;
  f.dims.stack.heads = 2;
  f.dims.stack.d_ff = 16;
  f.dims.stack.max_len = 6;

  Model<float> model = init_model(f.catalog, f.dims, Phase::kTargeted, seed);
  f.params = cast_params<double>(model.params);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.1);
  for (auto& [name, m] : f.params) {
    const bool gain = name.find("gain") != std::string::npos;
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      m.data()[i] = gain ? 1.0 + normal(rng) : m.data()[i] * 10.0 + normal(rng);
    }
  }
  f.params.at(names::kIdTable).row(kPaddingItem).setZero();

  const int32_t n = f.dims.stack.max_len;
  Batch& b = f.universal_batch;
  b.rows = 3;
  b.max_len = n;
  b.negatives_per_row = 3;
  const std::vector<std::vector<int32_t>> seqs = {{1, 2, 3, 4, 5, 6}, {7, 8, 4, 9}, {10, 2}};
  b.items.assign(static_cast<std::size_t>(b.rows) * n, kPaddingItem);
  for (int32_t r = 0; r < b.rows; ++r) {
    b.users.push_back("u" + std::to_string(r));
    b.lengths.push_back(static_cast<int32_t>(seqs[r].size()));
    for (std::size_t t = 0; t < seqs[r].size(); ++t) b.items[r * n + t] = seqs[r][t];
  }
  b.negatives = {7, 8, 9, 1, 2, 3, 5, 6, 8};

  TargetBatch& tb = f.target_batch;
  tb.rows = 4;
  tb.max_len = n;
  tb.items.assign(static_cast<std::size_t>(tb.rows) * n, kPaddingItem);
  const std::vector<std::vector<int32_t>> inputs = {{1, 2, 3}, {4, 5, 6, 7, 8, 9}, {10}, {2, 9}};
  for (int32_t r = 0; r < tb.rows; ++r) {
    tb.users.push_back("t" + std::to_string(r));
    tb.lengths.push_back(static_cast<int32_t>(inputs[r].size()));
    for (std::size_t t = 0; t < inputs[r].size(); ++t) tb.items[r * n + t] = inputs[r][t];
  }
  // Rows 0 and 2 share a target so the same-item skip is exercised.
  tb.targets = {4, 10, 4, 6};
  return f;
}

inline ad::Var fixture_nip_loss(const GradFixture& f, ParamBinder<double>& bind) {
  return universal_batch_loss<double>(bind, f.dims, f.catalog, f.universal_batch);
}

inline ad::Var fixture_bpr_loss(const GradFixture& f, ParamBinder<double>& bind) {
  return targeted_batch_loss<double>(bind, f.dims, f.catalog, f.target_batch, f.n_contrast);
}

}  // namespace fusionrec::testing

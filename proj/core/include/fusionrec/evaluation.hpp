#pragma once

#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "fusionrec/data.hpp"
#include "fusionrec/model.hpp"
#include "fusionrec/targeted.hpp"
#include "fusionrec/universal.hpp"
#include "json.hpp"

namespace fusionrec {

inline const std::vector<int32_t> kDefaultCutoffs = {10, 30, 50};

// 1 iff `truth` is among the first k entries of `ranked`.
int recall_at_k(std::span<const std::string> ranked, const std::string& truth, int32_t k);
// 1 / log2(rank + 1) for a 1-based rank <= k, else 0 (single relevant item).
double ndcg_at_k(std::span<const std::string> ranked, const std::string& truth, int32_t k);

// Rank-based forms; rank is 1-based, 0 means absent.
int recall_from_rank(int64_t rank, int32_t k);
double ndcg_from_rank(int64_t rank, int32_t k);

struct MetricSet {
  int64_t rows = 0;
  std::map<int32_t, double> recall;
  std::map<int32_t, double> ndcg;
};

struct EvalReport {
  std::string label;
  // "all", plus "hot"/"cold" when a popularity partition is supplied
  std::map<std::string, MetricSet> slices;

  double recall(int32_t k, const std::string& slice = "all") const {
    return slices.at(slice).recall.at(k);
  }
  double ndcg(int32_t k, const std::string& slice = "all") const {
    return slices.at(slice).ndcg.at(k);
  }
};

nlohmann::json to_json(const EvalReport& report);
EvalReport eval_report_from_json(const nlohmann::json& doc);

// Candidate order for one user: every catalog item except `exclude`
// (the truth item is never excluded), by descending score with ties broken
// by ascending item id. `scores` has one entry per item index 1..|I| at
// position index - 1.
std::vector<int32_t> rank_items(const ItemCatalog& catalog, std::span<const float> scores,
                                const std::set<int32_t>& exclude, int32_t truth = kPaddingItem);

// 1-based position `truth` would take in rank_items, without sorting.
int64_t truth_rank(const ItemCatalog& catalog, std::span<const float> scores,
                   const std::set<int32_t>& exclude, int32_t truth);

// User vectors for the given mode: causal last-position output (universal)
// or the head output (targeted). Processes rows in chunks.
Matrix<float> user_embeddings(const Model<float>& model, Phase mode,
                              const std::vector<std::vector<int32_t>>& sequences);

// Scores the full catalog for every test row by dot product, excludes the
// row's prefix items and reports R@K/N@K over the requested slices. Rows
// whose user or items are unknown to the model are skipped.
EvalReport evaluate(const Model<float>& model, Phase mode, std::span<const TestRow> rows,
                    const std::vector<int32_t>& cutoffs = kDefaultCutoffs,
                    const PopularityPartition* partition = nullptr,
                    const std::string& label = "");

// Element-wise mean of reports with identical slices and cutoffs.
EvalReport mean_report(const std::vector<EvalReport>& reports, const std::string& label);

struct MeanStat {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation
  double stderr_ = 0.0;
};
MeanStat summarize(std::span<const double> values);
// sqrt(se_a^2 + se_b^2)
double pooled_standard_error(std::span<const double> a, std::span<const double> b);

struct AblationSetup {
  ItemCatalog catalog;
  SequenceCorpus train;
  std::vector<TestRow> test;
  const TensorContainer* token_init = nullptr;
  ModelDims dims;
  UniversalConfig config;
  std::vector<uint64_t> seeds = {1, 2, 3};
  std::vector<int32_t> cutoffs = kDefaultCutoffs;
  double hot_fraction = kDefaultHotFraction;
  std::vector<FusionVariant> variants = {FusionVariant::kFull, FusionVariant::kPool,
                                         FusionVariant::kLlmOnly, FusionVariant::kIdOnly};
};

struct VariantResult {
  std::string label;
  std::vector<EvalReport> per_seed;
  EvalReport mean;

  std::vector<double> metric(int32_t k, const std::string& slice = "all") const;
};

// Trains one universal model per (variant, seed) with identical budgets and
// evaluates each on the test rows with hot/cold slices from `train`.
std::vector<VariantResult> ablation_suite(const AblationSetup& setup);

struct FrameworkSetup {
  ItemCatalog catalog;
  SequenceCorpus universal_train;
  SequenceCorpus target_train;
  std::vector<TestRow> target_test;
  const TensorContainer* token_init = nullptr;
  ModelDims dims;
  UniversalConfig universal;
  TargetedConfig targeted;
  std::vector<uint64_t> seeds = {1, 2, 3};
  std::vector<int32_t> cutoffs = kDefaultCutoffs;
};

// Variants "UT+TT" (warm-started targeted), "UT" (universal model applied
// to target prefixes) and "TT" (targeted from scratch), in that order.
std::vector<VariantResult> framework_suite(const FrameworkSetup& setup);

}  // namespace fusionrec

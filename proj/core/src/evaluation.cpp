#include "fusionrec/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fusionrec/error.hpp"

namespace fusionrec {

namespace {

void check_cutoff(int32_t k) {
  require(k >= 1, ErrorKind::kInvalidArgument, "cutoff K must be >= 1, got " + std::to_string(k));
}

constexpr int32_t kEvalChunk = 256;

}  // namespace

int recall_from_rank(int64_t rank, int32_t k) {
  check_cutoff(k);
  return rank >= 1 && rank <= k ? 1 : 0;
}

double ndcg_from_rank(int64_t rank, int32_t k) {
  check_cutoff(k);
  if (rank < 1 || rank > k) return 0.0;
  return 1.0 / std::log2(static_cast<double>(rank) + 1.0);
}

namespace {
int64_t rank_of(std::span<const std::string> ranked, const std::string& truth) {
  const auto it = std::find(ranked.begin(), ranked.end(), truth);
  return it == ranked.end() ? 0 : (it - ranked.begin()) + 1;
}
}  // namespace

int recall_at_k(std::span<const std::string> ranked, const std::string& truth, int32_t k) {
  return recall_from_rank(rank_of(ranked, truth), k);
}

double ndcg_at_k(std::span<const std::string> ranked, const std::string& truth, int32_t k) {
  return ndcg_from_rank(rank_of(ranked, truth), k);
}

nlohmann::json to_json(const EvalReport& report) {
  nlohmann::json doc;
  doc["label"] = report.label;
  nlohmann::json slices = nlohmann::json::object();
  for (const auto& [name, set] : report.slices) {
    nlohmann::json s;
    s["rows"] = set.rows;
    for (const auto& [k, v] : set.recall) s["R@" + std::to_string(k)] = v;
    for (const auto& [k, v] : set.ndcg) s["N@" + std::to_string(k)] = v;
    slices[name] = s;
  }
  doc["slices"] = slices;
  return doc;
}

EvalReport eval_report_from_json(const nlohmann::json& doc) {
  EvalReport report;
  report.label = doc.value("label", std::string());
  for (const auto& [name, s] : doc.at("slices").items()) {
    MetricSet set;
    set.rows = s.value("rows", int64_t{0});
    for (const auto& [key, v] : s.items()) {
      if (key.rfind("R@", 0) == 0) set.recall[std::stoi(key.substr(2))] = v.get<double>();
      if (key.rfind("N@", 0) == 0) set.ndcg[std::stoi(key.substr(2))] = v.get<double>();
    }
    report.slices[name] = std::move(set);
  }
  return report;
}

std::vector<int32_t> rank_items(const ItemCatalog& catalog, std::span<const float> scores,
                                const std::set<int32_t>& exclude, int32_t truth) {
  require(scores.size() == catalog.size(), ErrorKind::kShapeMismatch,
          "score vector length differs from catalog size");
  std::vector<int32_t> order;
  order.reserve(catalog.size());
  for (int32_t i = 1; i <= static_cast<int32_t>(catalog.size()); ++i) {
    if (i != truth && exclude.count(i)) continue;
    order.push_back(i);
  }
  std::sort(order.begin(), order.end(), [&](int32_t a, int32_t b) {
    const float sa = scores[a - 1], sb = scores[b - 1];
    if (sa != sb) return sa > sb;
    return catalog.id(a) < catalog.id(b);
  });
  return order;
}

int64_t truth_rank(const ItemCatalog& catalog, std::span<const float> scores,
                   const std::set<int32_t>& exclude, int32_t truth) {
  require(scores.size() == catalog.size(), ErrorKind::kShapeMismatch,
          "score vector length differs from catalog size");
  const float st = scores[truth - 1];
  const std::string& tid = catalog.id(truth);
  int64_t ahead = 0;
  for (int32_t i = 1; i <= static_cast<int32_t>(catalog.size()); ++i) {
    if (i == truth || exclude.count(i)) continue;
    const float s = scores[i - 1];
    if (s > st || (s == st && catalog.id(i) < tid)) ++ahead;
  }
  return ahead + 1;
}

Matrix<float> user_embeddings(const Model<float>& model, Phase mode,
                              const std::vector<std::vector<int32_t>>& sequences) {
  Matrix<float> out(static_cast<Eigen::Index>(sequences.size()), model.dims.d_model());
  for (std::size_t start = 0; start < sequences.size(); start += kEvalChunk) {
    const std::size_t end = std::min(sequences.size(), start + kEvalChunk);
    std::vector<std::vector<int32_t>> chunk(sequences.begin() + static_cast<std::ptrdiff_t>(start),
                                            sequences.begin() + static_cast<std::ptrdiff_t>(end));
    const Matrix<float> part = mode == Phase::kUniversal
                                   ? universal_user_embeddings<float>(model, chunk)
                                   : targeted_user_embeddings<float>(model, chunk);
    out.middleRows(static_cast<Eigen::Index>(start), part.rows()) = part;
  }
  return out;
}

EvalReport evaluate(const Model<float>& model, Phase mode, std::span<const TestRow> rows,
                    const std::vector<int32_t>& cutoffs, const PopularityPartition* partition,
                    const std::string& label) {
  for (int32_t k : cutoffs) check_cutoff(k);
  const ItemCatalog& catalog = model.catalog;

  std::vector<std::vector<int32_t>> sequences;
  std::vector<int32_t> truths;
  std::vector<std::string> truth_ids;
  for (const auto& row : rows) {
    const auto truth = catalog.find(row.target);
    if (!truth || row.prefix.empty()) continue;
    std::vector<int32_t> seq;
    bool known = true;
    for (const auto& id : row.prefix) {
      const auto idx = catalog.find(id);
      if (!idx) {
        known = false;
        break;
      }
      seq.push_back(*idx);
    }
    if (!known) continue;
    sequences.push_back(std::move(seq));
    truths.push_back(*truth);
    truth_ids.push_back(row.target);
  }

  EvalReport report;
  report.label = label;
  auto init_slice = [&](const std::string& name) {
    MetricSet& set = report.slices[name];
    for (int32_t k : cutoffs) {
      set.recall[k] = 0.0;
      set.ndcg[k] = 0.0;
    }
  };
  init_slice("all");
  if (partition) {
    init_slice("hot");
    init_slice("cold");
  }
  if (sequences.empty()) return report;

  const Matrix<float> items = item_embeddings<float>(model);
  const Matrix<float> users = user_embeddings(model, mode, sequences);
  const Matrix<float> scores = users * items.transpose();

  for (std::size_t r = 0; r < sequences.size(); ++r) {
    const std::set<int32_t> exclude(sequences[r].begin(), sequences[r].end());
    const std::span<const float> row_scores(scores.row(static_cast<Eigen::Index>(r)).data(),
                                            catalog.size());
    const int64_t rank = truth_rank(catalog, row_scores, exclude, truths[r]);
    std::vector<MetricSet*> targets{&report.slices["all"]};
    if (partition) {
      if (partition->hot.count(truth_ids[r])) targets.push_back(&report.slices["hot"]);
      else targets.push_back(&report.slices["cold"]);
    }
    for (MetricSet* set : targets) {
      ++set->rows;
      for (int32_t k : cutoffs) {
        set->recall[k] += recall_from_rank(rank, k);
        set->ndcg[k] += ndcg_from_rank(rank, k);
      }
    }
  }
  for (auto& [name, set] : report.slices) {
    if (set.rows == 0) continue;
    for (auto& [k, v] : set.recall) v /= static_cast<double>(set.rows);
    for (auto& [k, v] : set.ndcg) v /= static_cast<double>(set.rows);
  }
  return report;
}

EvalReport mean_report(const std::vector<EvalReport>& reports, const std::string& label) {
  require(!reports.empty(), ErrorKind::kInvalidArgument, "no reports to average");
  EvalReport out = reports.front();
  out.label = label;
  for (auto& [name, set] : out.slices) {
    for (auto& [k, v] : set.recall) {
      v = 0.0;
      for (const auto& r : reports) v += r.slices.at(name).recall.at(k);
      v /= static_cast<double>(reports.size());
    }
    for (auto& [k, v] : set.ndcg) {
      v = 0.0;
      for (const auto& r : reports) v += r.slices.at(name).ndcg.at(k);
      v /= static_cast<double>(reports.size());
    }
  }
  return out;
}

MeanStat summarize(std::span<const double> values) {
  MeanStat s;
  if (values.empty()) return s;
  const double n = static_cast<double>(values.size());
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(ss / (n - 1.0));
    s.stderr_ = s.stddev / std::sqrt(n);
  }
  return s;
}

double pooled_standard_error(std::span<const double> a, std::span<const double> b) {
  const double sa = summarize(a).stderr_, sb = summarize(b).stderr_;
  return std::sqrt(sa * sa + sb * sb);
}

std::vector<double> VariantResult::metric(int32_t k, const std::string& slice) const {
  std::vector<double> out;
  for (const auto& r : per_seed) out.push_back(r.recall(k, slice));
  return out;
}

std::vector<VariantResult> ablation_suite(const AblationSetup& setup) {
  const PopularityPartition partition = popularity_partition(setup.train, setup.hot_fraction);
  std::vector<VariantResult> results;
  for (FusionVariant variant : setup.variants) {
    VariantResult result;
    result.label = to_string(variant);
    ModelDims dims = setup.dims;
    dims.fusion.variant = variant;
    for (uint64_t seed : setup.seeds) {
      UniversalConfig config = setup.config;
      config.seed = seed;
      const UniversalResult trained =
          train_universal(setup.train, setup.catalog, dims, config, setup.token_init);
      result.per_seed.push_back(evaluate(trained.final.model, Phase::kUniversal, setup.test,
                                         setup.cutoffs, &partition, result.label));
    }
    result.mean = mean_report(result.per_seed, result.label);
    results.push_back(std::move(result));
  }
  return results;
}

std::vector<VariantResult> framework_suite(const FrameworkSetup& setup) {
  VariantResult combined{"UT+TT", {}, {}};
  VariantResult universal_only{"UT", {}, {}};
  VariantResult targeted_only{"TT", {}, {}};
  for (uint64_t seed : setup.seeds) {
    UniversalConfig uconfig = setup.universal;
    uconfig.seed = seed;
    const UniversalResult universal =
        train_universal(setup.universal_train, setup.catalog, setup.dims, uconfig, setup.token_init);
    universal_only.per_seed.push_back(evaluate(universal.final.model, Phase::kUniversal,
                                               setup.target_test, setup.cutoffs, nullptr, "UT"));

    TargetedConfig tconfig = setup.targeted;
    tconfig.seed = seed;
    FixedCheckpointProvider provider(std::make_shared<const Checkpoint>(universal.final));
    const TargetedResult warm =
        train_targeted(setup.target_train, setup.catalog, setup.dims, &provider, tconfig);
    combined.per_seed.push_back(evaluate(warm.final.model, Phase::kTargeted, setup.target_test,
                                         setup.cutoffs, nullptr, "UT+TT"));

    const TargetedResult cold =
        train_targeted(setup.target_train, setup.catalog, setup.dims, nullptr, tconfig);
    targeted_only.per_seed.push_back(evaluate(cold.final.model, Phase::kTargeted,
                                              setup.target_test, setup.cutoffs, nullptr, "TT"));
  }
  std::vector<VariantResult> out{std::move(combined), std::move(universal_only),
                                 std::move(targeted_only)};
  for (auto& r : out) r.mean = mean_report(r.per_seed, r.label);
  return out;
}

}  // namespace fusionrec

#include "fusionrec/recall.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "fusionrec/error.hpp"
#include "fusionrec/evaluation.hpp"
#include "fusionrec/tensor_store.hpp"

namespace fusionrec {

using nlohmann::json;

std::string to_string(EmbeddingKind kind) { return kind == EmbeddingKind::kUser ? "user" : "item"; }

EmbeddingKind parse_embedding_kind(const std::string& name) {
  if (name == "user") return EmbeddingKind::kUser;
  if (name == "item") return EmbeddingKind::kItem;
  fail(ErrorKind::kInvalidArgument, "unknown embedding kind: " + name);
}

void EmbeddingStore::add(const std::string& id, std::span<const float> vector) {
  require(static_cast<int64_t>(vector.size()) == dim_, ErrorKind::kShapeMismatch,
          "vector for '" + id + "' has dimension " + std::to_string(vector.size()) +
              ", store expects " + std::to_string(dim_));
  require(!contains(id), ErrorKind::kDuplicateName, "duplicate embedding id: " + id);
  rows_.emplace(id, ids_.size());
  ids_.push_back(id);
  data_.insert(data_.end(), vector.begin(), vector.end());
}

std::optional<std::span<const float>> EmbeddingStore::find(const std::string& id) const {
  const auto it = rows_.find(id);
  if (it == rows_.end()) return std::nullopt;
  return row(it->second);
}

std::span<const float> EmbeddingStore::row(std::size_t r) const {
  return std::span<const float>(data_).subspan(r * static_cast<std::size_t>(dim_),
                                                static_cast<std::size_t>(dim_));
}

std::filesystem::path ids_sidecar(const std::filesystem::path& path) {
  return std::filesystem::path(path.string() + ".ids.json");
}

void save_store(const EmbeddingStore& store, const std::filesystem::path& path) {
  TensorContainer container;
  container.add(TensorEntry::from_values<float>(
      "embeddings", {static_cast<int64_t>(store.size()), store.dim()}, store.data()));
  container.meta = store.meta;
  container.meta["kind"] = to_string(store.kind());
  container.meta["count"] = store.size();
  write_container(container, path);
  write_file_atomic(ids_sidecar(path), json(store.ids()).dump());
}

EmbeddingStore load_store(const std::filesystem::path& path) {
  const TensorContainer container = read_container(path);
  const TensorEntry& entry = container.at("embeddings");
  require(entry.shape.size() == 2, ErrorKind::kShapeMismatch, "embeddings tensor must be 2-D");
  std::ifstream in(ids_sidecar(path));
  require(in.good(), ErrorKind::kIo, "cannot open " + ids_sidecar(path).string());
  json ids;
  try {
    in >> ids;
  } catch (const json::exception& e) {
    fail(ErrorKind::kParse, ids_sidecar(path).string() + ": " + e.what());
  }
  const auto names = ids.get<std::vector<std::string>>();
  require(static_cast<int64_t>(names.size()) == entry.shape[0], ErrorKind::kShapeMismatch,
          "id sidecar lists " + std::to_string(names.size()) + " ids for " +
              std::to_string(entry.shape[0]) + " rows");
  EmbeddingStore store(parse_embedding_kind(container.meta.value("kind", std::string("item"))),
                       entry.shape[1]);
  const auto values = entry.values<float>();
  const auto dim = static_cast<std::size_t>(entry.shape[1]);
  for (std::size_t r = 0; r < names.size(); ++r) {
    store.add(names[r], std::span<const float>(values).subspan(r * dim, dim));
  }
  store.meta = container.meta;
  store.meta.erase("kind");
  store.meta.erase("count");
  return store;
}

EmbeddingStore export_item_embeddings(const Model<float>& model, const std::string& timestamp,
                                      const std::string& source_checkpoint,
                                      const EmbeddingStore* existing) {
  const int64_t dim = model.dims.d_model();
  EmbeddingStore store(EmbeddingKind::kItem, dim);
  if (existing) {
    require(existing->kind() == EmbeddingKind::kItem, ErrorKind::kInvalidArgument,
            "existing store does not hold item embeddings");
    require(existing->dim() == dim, ErrorKind::kShapeMismatch,
            "existing store dimension " + std::to_string(existing->dim()) +
                " differs from model d_model " + std::to_string(dim));
    for (std::size_t r = 0; r < existing->size(); ++r) store.add(existing->ids()[r], existing->row(r));
  }
  const Matrix<float> table = item_embeddings<float>(model);
  for (int32_t i = 1; i <= static_cast<int32_t>(model.catalog.size()); ++i) {
    const std::string& id = model.catalog.id(i);
    if (store.contains(id)) continue;
    store.add(id, std::span<const float>(table.row(i - 1).data(), static_cast<std::size_t>(dim)));
  }
  store.meta = {{"source_checkpoint", source_checkpoint}, {"timestamp", timestamp}};
  return store;
}

EmbeddingStore export_user_embeddings(const Model<float>& model, const SequenceCorpus& corpus,
                                      const std::string& timestamp,
                                      const std::string& source_checkpoint) {
  std::vector<std::string> users;
  std::vector<std::vector<int32_t>> sequences;
  for (const auto& [user, seq] : corpus.sequences) {
    std::vector<int32_t> items;
    for (const auto& e : seq) {
      if (const auto idx = model.catalog.find(e.item)) items.push_back(*idx);
    }
    if (items.empty()) continue;
    users.push_back(user);
    sequences.push_back(std::move(items));
  }
  const Matrix<float> vectors = user_embeddings(model, model.phase, sequences);
  const int64_t dim = model.dims.d_model();
  EmbeddingStore store(EmbeddingKind::kUser, dim);
  for (std::size_t r = 0; r < users.size(); ++r) {
    store.add(users[r], std::span<const float>(vectors.row(static_cast<Eigen::Index>(r)).data(),
                                               static_cast<std::size_t>(dim)));
  }
  store.meta = {{"source_checkpoint", source_checkpoint},
                {"timestamp", timestamp},
                {"mode", to_string(model.phase)}};
  return store;
}

SimilarityIndex SimilarityIndex::build(const EmbeddingStore& items) {
  require(items.size() > 0, ErrorKind::kInvalidArgument, "cannot index an empty store");
  SimilarityIndex index;
  index.dim_ = items.dim();
  index.ids_ = items.ids();
  index.rows_.resize(items.size() * static_cast<std::size_t>(items.dim()));
  for (std::size_t r = 0; r < items.size(); ++r) {
    const auto v = items.row(r);
    double norm = 0.0;
    for (float x : v) norm += static_cast<double>(x) * x;
    norm = std::sqrt(norm);
    require(norm > 0.0 && std::isfinite(norm), ErrorKind::kInvalidArgument,
            "item '" + items.ids()[r] + "' has a zero or non-finite vector");
    for (std::size_t d = 0; d < v.size(); ++d) index.rows_[r * v.size() + d] = v[d] / norm;
  }
  index.meta_ = items.meta;
  return index;
}

std::vector<ScoredItem> SimilarityIndex::query(std::span<const float> vector, int64_t k,
                                               const std::unordered_set<std::string>* exclude) const {
  require(static_cast<int64_t>(vector.size()) == dim_, ErrorKind::kShapeMismatch,
          "query dimension differs from index dimension");
  if (k <= 0) return {};
  double norm = 0.0;
  for (float x : vector) norm += static_cast<double>(x) * x;
  norm = std::sqrt(norm);
  std::vector<double> q(vector.size(), 0.0);
  if (norm > 0.0) {
    for (std::size_t d = 0; d < q.size(); ++d) q[d] = vector[d] / norm;
  }
  std::vector<std::pair<double, std::size_t>> scored;
  scored.reserve(ids_.size());
  const auto dim = static_cast<std::size_t>(dim_);
  for (std::size_t r = 0; r < ids_.size(); ++r) {
    if (exclude && exclude->count(ids_[r])) continue;
    double s = 0.0;
    for (std::size_t d = 0; d < dim; ++d) s += rows_[r * dim + d] * q[d];
    scored.emplace_back(s, r);
  }
  const auto take = std::min<std::size_t>(scored.size(), static_cast<std::size_t>(k));
  const auto better = [&](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return ids_[a.second] < ids_[b.second];
  };
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(take),
                    scored.end(), better);
  std::vector<ScoredItem> out;
  out.reserve(take);
  for (std::size_t i = 0; i < take; ++i) out.push_back({ids_[scored[i].second], scored[i].first});
  return out;
}

void SimilarityIndex::save(const std::filesystem::path& path) const {
  TensorContainer container;
  container.add(TensorEntry::from_values<double>(
      "normalized", {static_cast<int64_t>(ids_.size()), dim_}, rows_));
  container.meta = meta_;
  container.meta["ids"] = ids_;
  write_container(container, path);
}

SimilarityIndex SimilarityIndex::load(const std::filesystem::path& path) {
  const TensorContainer container = read_container(path);
  const TensorEntry& entry = container.at("normalized");
  require(entry.shape.size() == 2, ErrorKind::kShapeMismatch, "index tensor must be 2-D");
  SimilarityIndex index;
  index.dim_ = entry.shape[1];
  index.rows_ = entry.values<double>();
  index.ids_ = container.meta.at("ids").get<std::vector<std::string>>();
  require(static_cast<int64_t>(index.ids_.size()) == entry.shape[0], ErrorKind::kShapeMismatch,
          "index lists a different number of ids than rows");
  index.meta_ = container.meta;
  index.meta_.erase("ids");
  return index;
}

Exclusions exclusions_from_corpus(const SequenceCorpus& corpus) {
  Exclusions out;
  for (const auto& [user, seq] : corpus.sequences) {
    auto& items = out[user];
    for (const auto& e : seq) items.push_back(e.item);
  }
  return out;
}

void save_exclusions(const Exclusions& exclusions, const std::filesystem::path& path) {
  write_file_atomic(path, json(exclusions).dump());
}

Exclusions load_exclusions(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::kIo, "cannot open " + path.string());
  try {
    json doc;
    in >> doc;
    return doc.get<Exclusions>();
  } catch (const json::exception& e) {
    fail(ErrorKind::kParse, path.string() + ": " + e.what());
  }
}

RecallService::RecallService(EmbeddingStore users, EmbeddingStore items, SimilarityIndex index,
                             Exclusions exclusions)
    : users_(std::move(users)),
      items_(std::move(items)),
      index_(std::move(index)),
      exclusions_(std::move(exclusions)) {
  require(users_.dim() == items_.dim() && items_.dim() == index_.dim(),
          ErrorKind::kShapeMismatch, "user, item and index dimensions differ");
}

const std::vector<std::string>* RecallService::history(const std::string& user) const {
  const auto it = exclusions_.find(user);
  return it == exclusions_.end() ? nullptr : &it->second;
}

std::span<const float> RecallService::user_vector(const std::string& user) const {
  const auto v = users_.find(user);
  require(v.has_value(), ErrorKind::kNotFound, "unknown user: " + user);
  return *v;
}

std::span<const float> RecallService::item_vector(const std::string& item) const {
  const auto v = items_.find(item);
  require(v.has_value(), ErrorKind::kNotFound, "unknown item: " + item);
  return *v;
}

std::vector<ScoredItem> RecallService::u2i(const std::string& user, int64_t k) const {
  const auto vector = user_vector(user);
  std::unordered_set<std::string> exclude;
  if (const auto* h = history(user)) exclude.insert(h->begin(), h->end());
  return index_.query(vector, k, &exclude);
}

std::vector<ScoredItem> RecallService::u2i2i(const std::string& user, int64_t m, int64_t k,
                                             int64_t per_seed_k) const {
  const auto* h = history(user);
  require(h != nullptr && !h->empty(), ErrorKind::kNotFound,
          "user has no task history: " + user);
  if (per_seed_k <= 0) per_seed_k = k;
  const auto seeds_count = std::min<std::size_t>(h->size(), static_cast<std::size_t>(std::max<int64_t>(m, 0)));
  const std::vector<std::string> seeds(h->end() - static_cast<std::ptrdiff_t>(seeds_count), h->end());
  std::unordered_set<std::string> drop(h->begin(), h->end());
  drop.insert(seeds.begin(), seeds.end());
  std::map<std::string, double> best;
  for (const auto& seed : seeds) {
    const auto vector = items_.find(seed);
    if (!vector) continue;
    for (const auto& hit : index_.query(*vector, per_seed_k, &drop)) {
      auto [it, inserted] = best.emplace(hit.item, hit.score);
      if (!inserted) it->second = std::max(it->second, hit.score);
    }
  }
  std::vector<ScoredItem> merged;
  merged.reserve(best.size());
  for (const auto& [item, score] : best) merged.push_back({item, score});
  std::sort(merged.begin(), merged.end(), [](const ScoredItem& a, const ScoredItem& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.item < b.item;
  });
  if (k >= 0 && merged.size() > static_cast<std::size_t>(k)) merged.resize(static_cast<std::size_t>(k));
  return merged;
}

std::vector<ScoredItem> RecallService::item_neighbors(const std::string& item, int64_t k) const {
  const auto vector = item_vector(item);
  const std::unordered_set<std::string> self{item};
  return index_.query(vector, k, &self);
}

RankFeatures RecallService::rank_features(const std::string& user, const std::string& item) const {
  const auto u = user_vector(user);
  const auto v = item_vector(item);
  RankFeatures out;
  out.concat.assign(u.begin(), u.end());
  out.concat.insert(out.concat.end(), v.begin(), v.end());
  for (std::size_t d = 0; d < u.size(); ++d) out.dot += static_cast<double>(u[d]) * v[d];
  return out;
}

}  // namespace fusionrec

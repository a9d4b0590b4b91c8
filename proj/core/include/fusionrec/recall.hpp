#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "fusionrec/autodiff.hpp"
#include "fusionrec/data.hpp"
#include "fusionrec/model.hpp"
#include "json.hpp"

namespace fusionrec {

enum class EmbeddingKind { kUser, kItem };

std::string to_string(EmbeddingKind kind);
EmbeddingKind parse_embedding_kind(const std::string& name);

// ID -> vector table. Rows keep insertion order.
class EmbeddingStore {
 public:
  EmbeddingStore() = default;
  EmbeddingStore(EmbeddingKind kind, int64_t dim) : kind_(kind), dim_(dim) {}

  EmbeddingKind kind() const { return kind_; }
  int64_t dim() const { return dim_; }
  std::size_t size() const { return ids_.size(); }
  const std::vector<std::string>& ids() const { return ids_; }
  const std::vector<float>& data() const { return data_; }

  // Throws kDuplicateName for a repeated id, kShapeMismatch on dimension.
  void add(const std::string& id, std::span<const float> vector);
  bool contains(const std::string& id) const { return rows_.count(id) != 0; }
  std::optional<std::span<const float>> find(const std::string& id) const;
  std::span<const float> row(std::size_t r) const;

  // source checkpoint id, timestamp
  nlohmann::json meta = nlohmann::json::object();

 private:
  EmbeddingKind kind_ = EmbeddingKind::kItem;
  int64_t dim_ = 0;
  std::vector<std::string> ids_;
  std::vector<float> data_;
  std::unordered_map<std::string, std::size_t> rows_;
};

// Tensor container at `path` plus the ID order in `path` + ".ids.json".
std::filesystem::path ids_sidecar(const std::filesystem::path& path);
void save_store(const EmbeddingStore& store, const std::filesystem::path& path);
EmbeddingStore load_store(const std::filesystem::path& path);

// Fused vectors for every catalog item not already in `existing`; the result
// holds the existing rows unchanged followed by the new ones.
EmbeddingStore export_item_embeddings(const Model<float>& model, const std::string& timestamp,
                                      const std::string& source_checkpoint,
                                      const EmbeddingStore* existing = nullptr);

// One vector per user with at least one catalog item in `corpus`, computed
// with the model's phase (targeted requires the head).
EmbeddingStore export_user_embeddings(const Model<float>& model, const SequenceCorpus& corpus,
                                      const std::string& timestamp,
                                      const std::string& source_checkpoint);

struct ScoredItem {
  std::string item;
  double score = 0.0;

  bool operator==(const ScoredItem&) const = default;
};

// Exact cosine top-k over L2-normalised item rows.
class SimilarityIndex {
 public:
  SimilarityIndex() = default;
  // Throws kInvalidArgument naming the first zero-norm item.
  static SimilarityIndex build(const EmbeddingStore& items);

  std::size_t size() const { return ids_.size(); }
  int64_t dim() const { return dim_; }
  const std::vector<std::string>& ids() const { return ids_; }

  // Highest cosine first, ties by item id ascending; k is clamped to the
  // number of eligible items. A zero query scores every item 0.
  std::vector<ScoredItem> query(std::span<const float> vector, int64_t k,
                                const std::unordered_set<std::string>* exclude = nullptr) const;

  void save(const std::filesystem::path& path) const;
  static SimilarityIndex load(const std::filesystem::path& path);

 private:
  std::vector<std::string> ids_;
  std::vector<double> rows_;  // [size, dim], unit norm
  int64_t dim_ = 0;
  nlohmann::json meta_ = nlohmann::json::object();
};

// user -> chronological item list used both as the U2I2I seed history and
// as the exclusion set.
using Exclusions = std::map<std::string, std::vector<std::string>>;

Exclusions exclusions_from_corpus(const SequenceCorpus& corpus);
void save_exclusions(const Exclusions& exclusions, const std::filesystem::path& path);
Exclusions load_exclusions(const std::filesystem::path& path);

struct RankFeatures {
  std::vector<float> concat;
  double dot = 0.0;
};

// Read-only recall over immutable stores. Unknown IDs raise kNotFound.
class RecallService {
 public:
  RecallService(EmbeddingStore users, EmbeddingStore items, SimilarityIndex index,
                Exclusions exclusions);

  std::vector<ScoredItem> u2i(const std::string& user, int64_t k) const;
  // Neighbours of the user's last m items merged by max score; seeds and
  // excluded items are dropped. per_seed_k <= 0 uses k.
  std::vector<ScoredItem> u2i2i(const std::string& user, int64_t m, int64_t k,
                                int64_t per_seed_k = 0) const;
  // Nearest items to `item`, excluding itself.
  std::vector<ScoredItem> item_neighbors(const std::string& item, int64_t k) const;
  RankFeatures rank_features(const std::string& user, const std::string& item) const;

  std::span<const float> user_vector(const std::string& user) const;
  std::span<const float> item_vector(const std::string& item) const;

  const EmbeddingStore& users() const { return users_; }
  const EmbeddingStore& items() const { return items_; }
  const SimilarityIndex& index() const { return index_; }

 private:
  const std::vector<std::string>* history(const std::string& user) const;

  EmbeddingStore users_;
  EmbeddingStore items_;
  SimilarityIndex index_;
  Exclusions exclusions_;
};

}  // namespace fusionrec

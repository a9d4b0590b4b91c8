#pragma once

#include <cstdint>
#include <filesystem>
#include <istream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

namespace fusionrec {

// Internal item index 0 is the padding sentinel; catalog items occupy 1..size().
inline constexpr int32_t kPaddingItem = 0;

class ItemCatalog {
 public:
  // Appends an item and returns its internal index.
  int32_t add(const std::string& id, std::vector<int32_t> tokens);

  std::size_t size() const { return ids_.size(); }
  bool empty() const { return ids_.empty(); }
  int32_t vocab_size() const { return vocab_size_; }
  void set_vocab_size(int32_t vocab_size);

  bool contains(const std::string& id) const { return index_.count(id) != 0; }
  std::optional<int32_t> find(const std::string& id) const;
  // Throws kNotFound.
  int32_t index(const std::string& id) const;
  const std::string& id(int32_t index) const { return ids_.at(index - 1); }
  std::span<const int32_t> tokens(int32_t index) const { return tokens_.at(index - 1); }
  const std::vector<std::string>& ids() const { return ids_; }

  int64_t popularity(int32_t index) const { return popularity_.at(index - 1); }
  void add_popularity(int32_t index, int64_t count) { popularity_.at(index - 1) += count; }
  void reset_popularity();

  bool operator==(const ItemCatalog& other) const;

 private:
  std::vector<std::string> ids_;
  std::vector<std::vector<int32_t>> tokens_;
  std::vector<int64_t> popularity_;
  std::unordered_map<std::string, int32_t> index_;
  int32_t vocab_size_ = 0;
};

struct Interaction {
  std::string item;
  int64_t ts = 0;
  std::string scene;
  std::string action;

  bool operator==(const Interaction&) const = default;
};

struct SequenceCorpus {
  // Ordered by user id so every traversal is deterministic.
  std::map<std::string, std::vector<Interaction>> sequences;
  // Records dropped by scene/action filters.
  int64_t filtered_out = 0;

  std::size_t interaction_count() const;
  bool operator==(const SequenceCorpus&) const = default;
};

struct TestRow {
  std::string user;
  std::vector<std::string> prefix;
  std::string target;

  bool operator==(const TestRow&) const = default;
};

struct Split {
  SequenceCorpus train;
  std::vector<TestRow> test;
};

struct PopularityPartition {
  std::set<std::string> hot;
  std::set<std::string> cold;
};

// Rows of item indices, left-aligned and padded with kPaddingItem.
struct Batch {
  int32_t rows = 0;
  int32_t max_len = 0;
  int32_t negatives_per_row = 0;
  std::vector<std::string> users;
  std::vector<int32_t> items;      // [rows, max_len]
  std::vector<int32_t> lengths;    // [rows]
  std::vector<int32_t> negatives;  // [rows, negatives_per_row]

  int32_t item(int32_t row, int32_t pos) const { return items[row * max_len + pos]; }
  int32_t negative(int32_t row, int32_t j) const {
    return negatives[row * negatives_per_row + j];
  }
  bool operator==(const Batch&) const = default;
};

ItemCatalog parse_catalog(std::istream& in, int32_t min_vocab_size = 0);
ItemCatalog load_catalog(const std::filesystem::path& path, int32_t min_vocab_size = 0);

using TagFilter = std::optional<std::set<std::string>>;

// Retained records increment the catalog's popularity counters.
SequenceCorpus parse_interactions(std::istream& in, ItemCatalog& catalog,
                                  const TagFilter& scene_filter = std::nullopt,
                                  const TagFilter& action_filter = std::nullopt);
SequenceCorpus load_interactions(const std::filesystem::path& path,
                                 ItemCatalog& catalog,
                                 const TagFilter& scene_filter = std::nullopt,
                                 const TagFilter& action_filter = std::nullopt);

inline constexpr std::size_t kMinTestSequence = 3;

// Users with at least three interactions contribute their last item as a
// test target, provided some training sequence contains it.
Split split_leave_one_out(const SequenceCorpus& corpus);

struct SceneSplit {
  // Every user's events strictly before their held-out target-scene event
  // (all events for users without one).
  SequenceCorpus universal_train;
  // Target-scene events minus the held-out ones.
  SequenceCorpus target_train;
  // Prefix = the user's earlier target-scene items.
  std::vector<TestRow> target_test;
};

// Leave-one-out over each user's `scene` events; a user needs at least three
// of them to contribute a test row.
SceneSplit split_target_scene(const SequenceCorpus& corpus, const std::string& scene);

inline constexpr double kDefaultHotFraction = 0.2;

PopularityPartition popularity_partition(const SequenceCorpus& corpus,
                                         double hot_fraction = kDefaultHotFraction);

struct BatchOptions {
  int32_t max_len = 50;
  int32_t batch_size = 128;
  int32_t negatives = 64;
};

// Deterministic epoch-cycling batch stream over users with >= 2 interactions.
// Sequences longer than max_len keep their most recent max_len items.
class BatchStream {
 public:
  BatchStream(const SequenceCorpus& corpus, const ItemCatalog& catalog,
              BatchOptions options, uint64_t seed);

  Batch next();
  int64_t batches_per_epoch() const;
  int64_t epoch() const { return epoch_; }
  std::size_t user_count() const { return rows_.size(); }

 private:
  void shuffle();

  struct Row {
    std::string user;
    std::vector<int32_t> items;
  };

  BatchOptions options_;
  int32_t catalog_size_ = 0;
  std::vector<Row> rows_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  int64_t epoch_ = 0;
  std::mt19937_64 order_rng_;
  std::mt19937_64 negative_rng_;
};

// Draws `count` distinct-from-`exclude` items uniformly (with replacement
// among the allowed items).
void sample_negatives(std::mt19937_64& rng, int32_t catalog_size,
                      std::span<const int32_t> exclude, int32_t count,
                      std::vector<int32_t>& out);

// Ingest artifact. Without a target scene, split is the leave-one-out split
// and target_train equals split.train. With one, split.train holds every
// event before each user's held-out target-scene event, split.test the
// target-scene test rows and target_train the remaining target-scene events.
struct Dataset {
  ItemCatalog catalog;
  Split split;
  SequenceCorpus target_train;
  std::string target_scene;
  int64_t filtered_out = 0;
  nlohmann::json meta = nlohmann::json::object();
};

Dataset make_dataset(ItemCatalog catalog, const SequenceCorpus& corpus,
                     const std::string& target_scene = "");

void save_dataset(const Dataset& dataset, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

// Item indices of a user's sequence (most recent `max_len` when > 0).
std::vector<int32_t> to_indices(const ItemCatalog& catalog,
                                const std::vector<Interaction>& sequence,
                                int32_t max_len = 0);
std::vector<int32_t> to_indices(const ItemCatalog& catalog,
                                const std::vector<std::string>& items,
                                int32_t max_len = 0);

}  // namespace fusionrec

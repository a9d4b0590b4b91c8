#include "fusionrec/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include "fusionrec/error.hpp"
#include "fusionrec/random.hpp"
#include "fusionrec/tensor_store.hpp"
#include "json.hpp"

namespace fusionrec {

using nlohmann::json;

int32_t ItemCatalog::add(const std::string& id, std::vector<int32_t> tokens) {
  if (index_.count(id) != 0) {
    fail(ErrorKind::kDuplicateName, "duplicate item id '" + id + "'");
  }
  for (int32_t token : tokens) {
    require(token >= 0, ErrorKind::kInvalidArgument,
            "item '" + id + "' has negative token id " + std::to_string(token));
    vocab_size_ = std::max(vocab_size_, token + 1);
  }
  ids_.push_back(id);
  tokens_.push_back(std::move(tokens));
  popularity_.push_back(0);
  const auto index = static_cast<int32_t>(ids_.size());
  index_.emplace(id, index);
  return index;
}

void ItemCatalog::set_vocab_size(int32_t vocab_size) {
  for (const auto& tokens : tokens_) {
    for (int32_t token : tokens) {
      require(token < vocab_size, ErrorKind::kInvalidArgument,
              "vocab size " + std::to_string(vocab_size) + " does not cover token " +
                  std::to_string(token));
    }
  }
  vocab_size_ = vocab_size;
}

std::optional<int32_t> ItemCatalog::find(const std::string& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

int32_t ItemCatalog::index(const std::string& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) fail(ErrorKind::kNotFound, "unknown item '" + id + "'");
  return it->second;
}

void ItemCatalog::reset_popularity() {
  std::fill(popularity_.begin(), popularity_.end(), 0);
}

bool ItemCatalog::operator==(const ItemCatalog& other) const {
  return ids_ == other.ids_ && tokens_ == other.tokens_ &&
         popularity_ == other.popularity_ && vocab_size_ == other.vocab_size_;
}

std::size_t SequenceCorpus::interaction_count() const {
  std::size_t total = 0;
  for (const auto& [user, seq] : sequences) total += seq.size();
  return total;
}

namespace {

std::string line_tag(std::size_t line_no) {
  return "line " + std::to_string(line_no);
}

bool blank(const std::string& line) {
  return std::all_of(line.begin(), line.end(),
                     [](unsigned char c) { return std::isspace(c); });
}

std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot open " + path.string());
  return in;
}

}  // namespace

ItemCatalog parse_catalog(std::istream& in, int32_t min_vocab_size) {
  ItemCatalog catalog;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (blank(line)) continue;
    json record;
    try {
      record = json::parse(line);
    } catch (const json::exception& e) {
      fail(ErrorKind::kParse, line_tag(line_no) + ": malformed JSON: " + e.what());
    }
    if (!record.is_object() || !record.contains("item") || !record["item"].is_string() ||
        !record.contains("tokens") || !record["tokens"].is_array()) {
      fail(ErrorKind::kParse, line_tag(line_no) + ": expected {\"item\": str, \"tokens\": [int]}");
    }
    std::vector<int32_t> tokens;
    for (const auto& token : record["tokens"]) {
      if (!token.is_number_integer() || token.get<int64_t>() < 0 ||
          token.get<int64_t>() > INT32_MAX - 1) {
        fail(ErrorKind::kParse,
             line_tag(line_no) + ": token ids must be non-negative integers, got " +
                 token.dump());
      }
      tokens.push_back(token.get<int32_t>());
    }
    const auto id = record["item"].get<std::string>();
    if (catalog.contains(id)) {
      fail(ErrorKind::kDuplicateName, line_tag(line_no) + ": duplicate item id '" + id + "'");
    }
    catalog.add(id, std::move(tokens));
  }
  if (catalog.vocab_size() < min_vocab_size) catalog.set_vocab_size(min_vocab_size);
  return catalog;
}

ItemCatalog load_catalog(const std::filesystem::path& path, int32_t min_vocab_size) {
  auto in = open_input(path);
  return parse_catalog(in, min_vocab_size);
}

SequenceCorpus parse_interactions(std::istream& in, ItemCatalog& catalog,
                                  const TagFilter& scene_filter,
                                  const TagFilter& action_filter) {
  SequenceCorpus corpus;
  std::vector<std::string> unknown;
  std::unordered_set<std::string> unknown_seen;
  std::vector<int32_t> retained;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (blank(line)) continue;
    json record;
    try {
      record = json::parse(line);
    } catch (const json::exception& e) {
      fail(ErrorKind::kParse, line_tag(line_no) + ": malformed JSON: " + e.what());
    }
    Interaction event;
    std::string user;
    try {
      user = record.at("user").get<std::string>();
      event.item = record.at("item").get<std::string>();
      event.ts = record.at("ts").get<int64_t>();
      event.scene = record.at("scene").get<std::string>();
      event.action = record.at("action").get<std::string>();
    } catch (const json::exception& e) {
      fail(ErrorKind::kParse, line_tag(line_no) +
                                  ": expected fields user, item, ts, scene, action: " +
                                  e.what());
    }
    const auto index = catalog.find(event.item);
    if (!index) {
      if (unknown_seen.insert(event.item).second) unknown.push_back(event.item);
      continue;
    }
    if ((scene_filter && scene_filter->count(event.scene) == 0) ||
        (action_filter && action_filter->count(event.action) == 0)) {
      ++corpus.filtered_out;
      continue;
    }
    retained.push_back(*index);
    corpus.sequences[user].push_back(std::move(event));
  }
  if (!unknown.empty()) {
    std::ostringstream msg;
    msg << unknown.size() << " unknown item id(s):";
    for (std::size_t i = 0; i < std::min<std::size_t>(10, unknown.size()); ++i) {
      msg << " '" << unknown[i] << "'";
    }
    fail(ErrorKind::kNotFound, msg.str());
  }
  for (int32_t index : retained) catalog.add_popularity(index, 1);
  for (auto& [user, seq] : corpus.sequences) {
    std::stable_sort(seq.begin(), seq.end(),
                     [](const Interaction& a, const Interaction& b) { return a.ts < b.ts; });
  }
  return corpus;
}

SequenceCorpus load_interactions(const std::filesystem::path& path, ItemCatalog& catalog,
                                 const TagFilter& scene_filter,
                                 const TagFilter& action_filter) {
  auto in = open_input(path);
  return parse_interactions(in, catalog, scene_filter, action_filter);
}

Split split_leave_one_out(const SequenceCorpus& corpus) {
  Split split;
  split.train.filtered_out = corpus.filtered_out;
  std::vector<std::pair<std::string, const Interaction*>> held_out;
  for (const auto& [user, seq] : corpus.sequences) {
    if (seq.size() >= kMinTestSequence) {
      split.train.sequences[user].assign(seq.begin(), seq.end() - 1);
      held_out.emplace_back(user, &seq.back());
    } else {
      split.train.sequences[user] = seq;
    }
  }
  std::unordered_set<std::string> train_items;
  for (const auto& [user, seq] : split.train.sequences) {
    for (const auto& event : seq) train_items.insert(event.item);
  }
  for (const auto& [user, event] : held_out) {
    if (train_items.count(event->item) == 0) continue;
    TestRow row;
    row.user = user;
    for (const auto& e : split.train.sequences.at(user)) row.prefix.push_back(e.item);
    row.target = event->item;
    split.test.push_back(std::move(row));
  }
  return split;
}

SceneSplit split_target_scene(const SequenceCorpus& corpus, const std::string& scene) {
  SceneSplit split;
  std::vector<std::pair<std::string, const Interaction*>> held_out;
  for (const auto& [user, seq] : corpus.sequences) {
    std::vector<std::size_t> positions;
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (seq[i].scene == scene) positions.push_back(i);
    }
    std::size_t cut = seq.size();
    if (positions.size() >= kMinTestSequence) {
      cut = positions.back();
      held_out.emplace_back(user, &seq[cut]);
    }
    if (cut > 0) split.universal_train.sequences[user].assign(seq.begin(), seq.begin() + cut);
    std::vector<Interaction> target;
    for (std::size_t p : positions) {
      if (p < cut) target.push_back(seq[p]);
    }
    if (!target.empty()) split.target_train.sequences[user] = std::move(target);
  }
  std::unordered_set<std::string> train_items;
  for (const auto& [user, seq] : split.universal_train.sequences) {
    for (const auto& event : seq) train_items.insert(event.item);
  }
  for (const auto& [user, event] : held_out) {
    if (train_items.count(event->item) == 0) continue;
    TestRow row;
    row.user = user;
    for (const auto& e : split.target_train.sequences.at(user)) row.prefix.push_back(e.item);
    row.target = event->item;
    split.target_test.push_back(std::move(row));
  }
  return split;
}

PopularityPartition popularity_partition(const SequenceCorpus& corpus, double hot_fraction) {
  require(hot_fraction > 0.0 && hot_fraction < 1.0, ErrorKind::kInvalidArgument,
          "hot_fraction must lie in (0, 1)");
  std::map<std::string, int64_t> counts;
  for (const auto& [user, seq] : corpus.sequences) {
    for (const auto& event : seq) ++counts[event.item];
  }
  std::vector<std::pair<std::string, int64_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  const auto hot_count =
      static_cast<std::size_t>(std::ceil(hot_fraction * static_cast<double>(ranked.size())));
  PopularityPartition partition;
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    (i < hot_count ? partition.hot : partition.cold).insert(ranked[i].first);
  }
  return partition;
}

void sample_negatives(std::mt19937_64& rng, int32_t catalog_size,
                      std::span<const int32_t> exclude, int32_t count,
                      std::vector<int32_t>& out) {
  for (int32_t j = 0; j < count; ++j) {
    int32_t candidate;
    do {
      candidate = 1 + static_cast<int32_t>(uniform_index(rng, catalog_size));
    } while (std::find(exclude.begin(), exclude.end(), candidate) != exclude.end());
    out.push_back(candidate);
  }
}

BatchStream::BatchStream(const SequenceCorpus& corpus, const ItemCatalog& catalog,
                         BatchOptions options, uint64_t seed)
    : options_(options),
      catalog_size_(static_cast<int32_t>(catalog.size())),
      order_rng_(make_stream(seed, "batch-order")),
      negative_rng_(make_stream(seed, "negatives")) {
  require(options_.max_len >= 1 && options_.batch_size >= 1 && options_.negatives >= 1,
          ErrorKind::kInvalidArgument, "batch options must be positive");
  std::size_t longest = 0;
  for (const auto& [user, seq] : corpus.sequences) {
    if (seq.size() < 2) continue;
    Row row{user, to_indices(catalog, seq, options_.max_len)};
    longest = std::max(longest, row.items.size());
    rows_.push_back(std::move(row));
  }
  require(!rows_.empty(), ErrorKind::kInvalidArgument,
          "corpus has no sequence with at least two interactions");
  if (static_cast<int64_t>(options_.negatives) >=
      static_cast<int64_t>(catalog_size_) - static_cast<int64_t>(longest)) {
    fail(ErrorKind::kInvalidArgument,
         "negatives per row (" + std::to_string(options_.negatives) +
             ") must be below catalog size minus longest sequence (" +
             std::to_string(catalog_size_) + " - " + std::to_string(longest) + ")");
  }
  order_.resize(rows_.size());
  shuffle();
}

void BatchStream::shuffle() {
  for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
  for (std::size_t i = order_.size(); i > 1; --i) {
    std::swap(order_[i - 1], order_[uniform_index(order_rng_, i)]);
  }
  cursor_ = 0;
}

int64_t BatchStream::batches_per_epoch() const {
  return static_cast<int64_t>((rows_.size() + options_.batch_size - 1) / options_.batch_size);
}

Batch BatchStream::next() {
  if (cursor_ >= order_.size()) {
    ++epoch_;
    shuffle();
  }
  const std::size_t end =
      std::min(order_.size(), cursor_ + static_cast<std::size_t>(options_.batch_size));
  Batch batch;
  batch.rows = static_cast<int32_t>(end - cursor_);
  batch.max_len = options_.max_len;
  batch.negatives_per_row = options_.negatives;
  batch.items.assign(static_cast<std::size_t>(batch.rows) * batch.max_len, kPaddingItem);
  batch.negatives.reserve(static_cast<std::size_t>(batch.rows) * batch.negatives_per_row);
  for (int32_t r = 0; cursor_ < end; ++cursor_, ++r) {
    const Row& row = rows_[order_[cursor_]];
    batch.users.push_back(row.user);
    batch.lengths.push_back(static_cast<int32_t>(row.items.size()));
    std::copy(row.items.begin(), row.items.end(),
              batch.items.begin() + static_cast<std::ptrdiff_t>(r) * batch.max_len);
    sample_negatives(negative_rng_, catalog_size_, row.items, options_.negatives,
                     batch.negatives);
  }
  return batch;
}

std::vector<int32_t> to_indices(const ItemCatalog& catalog,
                                const std::vector<Interaction>& sequence, int32_t max_len) {
  const std::size_t keep = max_len > 0 ? std::min<std::size_t>(sequence.size(), max_len)
                                       : sequence.size();
  std::vector<int32_t> out;
  out.reserve(keep);
  for (std::size_t i = sequence.size() - keep; i < sequence.size(); ++i) {
    out.push_back(catalog.index(sequence[i].item));
  }
  return out;
}

std::vector<int32_t> to_indices(const ItemCatalog& catalog,
                                const std::vector<std::string>& items, int32_t max_len) {
  const std::size_t keep =
      max_len > 0 ? std::min<std::size_t>(items.size(), max_len) : items.size();
  std::vector<int32_t> out;
  out.reserve(keep);
  for (std::size_t i = items.size() - keep; i < items.size(); ++i) {
    out.push_back(catalog.index(items[i]));
  }
  return out;
}

namespace {

json corpus_to_json(const SequenceCorpus& corpus) {
  json out = json::object();
  for (const auto& [user, seq] : corpus.sequences) {
    json events = json::array();
    for (const auto& e : seq) events.push_back({e.item, e.ts, e.scene, e.action});
    out[user] = std::move(events);
  }
  return out;
}

SequenceCorpus corpus_from_json(const json& in) {
  SequenceCorpus corpus;
  for (const auto& [user, events] : in.items()) {
    auto& seq = corpus.sequences[user];
    for (const auto& e : events) {
      seq.push_back({e.at(0).get<std::string>(), e.at(1).get<int64_t>(),
                     e.at(2).get<std::string>(), e.at(3).get<std::string>()});
    }
  }
  return corpus;
}

}  // namespace

Dataset make_dataset(ItemCatalog catalog, const SequenceCorpus& corpus,
                     const std::string& target_scene) {
  Dataset dataset;
  dataset.catalog = std::move(catalog);
  dataset.filtered_out = corpus.filtered_out;
  dataset.target_scene = target_scene;
  if (target_scene.empty()) {
    dataset.split = split_leave_one_out(corpus);
    dataset.target_train = dataset.split.train;
  } else {
    SceneSplit scenes = split_target_scene(corpus, target_scene);
    dataset.split.train = std::move(scenes.universal_train);
    dataset.split.train.filtered_out = corpus.filtered_out;
    dataset.split.test = std::move(scenes.target_test);
    dataset.target_train = std::move(scenes.target_train);
  }
  dataset.target_train.filtered_out = 0;
  return dataset;
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& path) {
  json items = json::array();
  json popularity = json::object();
  const auto& catalog = dataset.catalog;
  for (int32_t i = 1; i <= static_cast<int32_t>(catalog.size()); ++i) {
    const auto tokens = catalog.tokens(i);
    items.push_back({{"item", catalog.id(i)},
                     {"tokens", std::vector<int32_t>(tokens.begin(), tokens.end())}});
    popularity[catalog.id(i)] = catalog.popularity(i);
  }
  json test = json::array();
  for (const auto& row : dataset.split.test) {
    test.push_back({{"user", row.user}, {"prefix", row.prefix}, {"target", row.target}});
  }
  const json doc = {{"catalog", items},
                    {"vocab_size", catalog.vocab_size()},
                    {"popularity", popularity},
                    {"train", corpus_to_json(dataset.split.train)},
                    {"test", test},
                    {"target_scene", dataset.target_scene},
                    {"target_train", corpus_to_json(dataset.target_train)},
                    {"filtered_out", dataset.filtered_out},
                    {"meta", dataset.meta}};
  const std::string text = doc.dump() + "\n";
  write_file_atomic(path, std::as_bytes(std::span(text.data(), text.size())));
}

Dataset load_dataset(const std::filesystem::path& path) {
  auto in = open_input(path);
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorKind::kParse, path.string() + ": " + e.what());
  }
  Dataset dataset;
  try {
    for (const auto& item : doc.at("catalog")) {
      const auto id = item.at("item").get<std::string>();
      const auto index = dataset.catalog.add(id, item.at("tokens").get<std::vector<int32_t>>());
      dataset.catalog.add_popularity(index, doc.at("popularity").value(id, int64_t{0}));
    }
    dataset.catalog.set_vocab_size(
        std::max(dataset.catalog.vocab_size(), doc.at("vocab_size").get<int32_t>()));
    dataset.split.train = corpus_from_json(doc.at("train"));
    for (const auto& row : doc.at("test")) {
      dataset.split.test.push_back({row.at("user").get<std::string>(),
                                    row.at("prefix").get<std::vector<std::string>>(),
                                    row.at("target").get<std::string>()});
    }
    dataset.filtered_out = doc.value("filtered_out", int64_t{0});
    dataset.target_scene = doc.value("target_scene", std::string());
    dataset.target_train = doc.contains("target_train") ? corpus_from_json(doc.at("target_train"))
                                                        : dataset.split.train;
    dataset.meta = doc.value("meta", json::object());
    dataset.split.train.filtered_out = dataset.filtered_out;
  } catch (const json::exception& e) {
    fail(ErrorKind::kParse, path.string() + ": malformed dataset: " + e.what());
  }
  return dataset;
}

}  // namespace fusionrec

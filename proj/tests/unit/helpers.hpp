#pragma once

#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "fusionrec/data.hpp"
#include "fusionrec/model.hpp"

namespace fusionrec::testing {

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("fusionrec_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

// Items "a", "b", ... with `tokens_per_item` tokens cycling through `vocab`.
inline ItemCatalog make_catalog(int32_t items, int32_t vocab = 8, int32_t tokens_per_item = 2) {
  ItemCatalog catalog;
  for (int32_t i = 0; i < items; ++i) {
    std::vector<int32_t> tokens;
    for (int32_t t = 0; t < tokens_per_item; ++t) tokens.push_back((i + t * 3) % vocab);
    catalog.add("item" + std::to_string(100 + i), tokens);
  }
  catalog.set_vocab_size(vocab);
  return catalog;
}

inline SequenceCorpus make_corpus(const std::vector<std::vector<std::string>>& sequences,
                                  const std::string& scene = "feed") {
  SequenceCorpus corpus;
  for (std::size_t u = 0; u < sequences.size(); ++u) {
    auto& seq = corpus.sequences["user" + std::to_string(100 + u)];
    int64_t ts = 0;
    for (const auto& item : sequences[u]) seq.push_back({item, ts++, scene, "click"});
  }
  return corpus;
}

inline SequenceCorpus random_corpus(const ItemCatalog& catalog, int32_t users, int32_t min_len,
                                    int32_t max_len, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int32_t> len(min_len, max_len);
  std::uniform_int_distribution<int32_t> item(1, static_cast<int32_t>(catalog.size()));
  std::vector<std::vector<std::string>> seqs(users);
  for (auto& s : seqs) {
    const int32_t n = len(rng);
    for (int32_t t = 0; t < n; ++t) s.push_back(catalog.id(item(rng)));
  }
  return make_corpus(seqs);
}

inline ModelDims tiny_dims(int32_t d_id = 4, int32_t d_sem = 4, int32_t layers = 2,
                           int32_t max_len = 6) {
  ModelDims dims;
  dims.fusion.d_id = d_id;
  dims.fusion.d_sem = d_sem;
  dims.fusion.experts = 2;
  dims.fusion.active_experts = 2;
  dims.stack.layers = layers;
  dims.stack.heads = 2;
  dims.stack.d_ff = 0;
  dims.stack.max_len = max_len;
  return dims;
}

}  // namespace fusionrec::testing

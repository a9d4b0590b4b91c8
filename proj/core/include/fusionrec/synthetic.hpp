#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "fusionrec/data.hpp"
#include "fusionrec/tensor_store.hpp"
#include "json.hpp"

namespace fusionrec {

// Topic-structured corpus. Items belong to topics round-robin and carry a
// few tokens from their topic's vocabulary plus shared noise tokens. Users
// follow a topic Markov chain biased toward two favourite topics, with
// item-level successor links layered on top. The token embedding table puts
// topic tokens near a per-topic centroid offset by a common marker
// direction; noise tokens are large random vectors.
struct SyntheticConfig {
  uint64_t seed = 0;
  int32_t users = 2000;
  int32_t items = 500;
  int32_t topics = 10;
  int32_t tokens_per_topic = 12;
  int32_t noise_tokens = 60;
  int32_t item_topic_tokens = 3;
  int32_t item_noise_tokens = 5;
  int32_t min_len = 8;
  int32_t max_len = 20;
  double topic_stay = 0.6;
  double favourite_jump = 0.7;  // chance a topic switch lands on a favourite
  double successor_prob = 0.3;
  double popularity_exponent = 1.0;
  int32_t d_sem = 16;
  double topic_scale = 1.0;
  double marker_scale = 1.0;
  double token_jitter = 0.2;
  double noise_scale = 2.0;
  // Noise tokens sit at -noise_marker along the marker direction plus a
  // random component orthogonal to it.
  double noise_marker = 0.0;
  // Second scene: with probability target_event_prob an event is emitted in
  // `target_scene`, drawn only from the first target_item_fraction of each
  // topic's items and ordered by reversed popularity.
  double target_event_prob = 0.0;
  double target_item_fraction = 0.3;
  std::string source_scene = "feed";
  std::string target_scene = "box";
  std::string action = "click";
};

nlohmann::json to_json(const SyntheticConfig& config);
SyntheticConfig synthetic_config_from_json(const nlohmann::json& doc);

struct SyntheticData {
  ItemCatalog catalog;  // popularity counts the generated events
  SequenceCorpus corpus;
  TensorContainer token_init;  // "token_embeddings" [V, d_sem], f32
  std::vector<int32_t> item_topic;  // per item index - 1
};

SyntheticData generate_synthetic(const SyntheticConfig& config);

// catalog.jsonl, interactions.jsonl and token_init.ptns under `dir`.
void write_synthetic(const SyntheticData& data, const std::filesystem::path& dir);

}  // namespace fusionrec

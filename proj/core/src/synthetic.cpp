#include "fusionrec/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "fusionrec/error.hpp"
#include "fusionrec/random.hpp"

namespace fusionrec {

using nlohmann::json;

json to_json(const SyntheticConfig& c) {
  return {{"seed", c.seed},
          {"users", c.users},
          {"items", c.items},
          {"topics", c.topics},
          {"tokens_per_topic", c.tokens_per_topic},
          {"noise_tokens", c.noise_tokens},
          {"item_topic_tokens", c.item_topic_tokens},
          {"item_noise_tokens", c.item_noise_tokens},
          {"min_len", c.min_len},
          {"max_len", c.max_len},
          {"topic_stay", c.topic_stay},
          {"favourite_jump", c.favourite_jump},
          {"successor_prob", c.successor_prob},
          {"popularity_exponent", c.popularity_exponent},
          {"d_sem", c.d_sem},
          {"topic_scale", c.topic_scale},
          {"marker_scale", c.marker_scale},
          {"token_jitter", c.token_jitter},
          {"noise_scale", c.noise_scale},
          {"noise_marker", c.noise_marker},
          {"target_event_prob", c.target_event_prob},
          {"target_item_fraction", c.target_item_fraction},
          {"source_scene", c.source_scene},
          {"target_scene", c.target_scene},
          {"action", c.action}};
}

SyntheticConfig synthetic_config_from_json(const json& doc) {
  SyntheticConfig c;
  const json defaults = to_json(c);
  for (const auto& [key, value] : doc.items()) {
    require(defaults.contains(key), ErrorKind::kConfig, "unknown synthetic key: " + key);
  }
  c.seed = doc.value("seed", c.seed);
  c.users = doc.value("users", c.users);
  c.items = doc.value("items", c.items);
  c.topics = doc.value("topics", c.topics);
  c.tokens_per_topic = doc.value("tokens_per_topic", c.tokens_per_topic);
  c.noise_tokens = doc.value("noise_tokens", c.noise_tokens);
  c.item_topic_tokens = doc.value("item_topic_tokens", c.item_topic_tokens);
  c.item_noise_tokens = doc.value("item_noise_tokens", c.item_noise_tokens);
  c.min_len = doc.value("min_len", c.min_len);
  c.max_len = doc.value("max_len", c.max_len);
  c.topic_stay = doc.value("topic_stay", c.topic_stay);
  c.favourite_jump = doc.value("favourite_jump", c.favourite_jump);
  c.successor_prob = doc.value("successor_prob", c.successor_prob);
  c.popularity_exponent = doc.value("popularity_exponent", c.popularity_exponent);
  c.d_sem = doc.value("d_sem", c.d_sem);
  c.topic_scale = doc.value("topic_scale", c.topic_scale);
  c.marker_scale = doc.value("marker_scale", c.marker_scale);
  c.token_jitter = doc.value("token_jitter", c.token_jitter);
  c.noise_scale = doc.value("noise_scale", c.noise_scale);
  c.noise_marker = doc.value("noise_marker", c.noise_marker);
  c.target_event_prob = doc.value("target_event_prob", c.target_event_prob);
  c.target_item_fraction = doc.value("target_item_fraction", c.target_item_fraction);
  c.source_scene = doc.value("source_scene", c.source_scene);
  c.target_scene = doc.value("target_scene", c.target_scene);
  c.action = doc.value("action", c.action);
  return c;
}

namespace {

std::size_t draw_weighted(std::mt19937_64& rng, const std::vector<double>& cumulative) {
  const double u = uniform_real(rng) * cumulative.back();
  const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
  return std::min<std::size_t>(static_cast<std::size_t>(it - cumulative.begin()),
                               cumulative.size() - 1);
}

std::vector<double> cumulative_of(const std::vector<double>& weights) {
  std::vector<double> c(weights.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) c[i] = acc += weights[i];
  return c;
}

// k distinct values from [0, n).
std::vector<int32_t> draw_distinct(std::mt19937_64& rng, int32_t n, int32_t k) {
  std::vector<int32_t> pool(n);
  for (int32_t i = 0; i < n; ++i) pool[i] = i;
  for (int32_t i = 0; i < k; ++i) {
    const auto j = i + static_cast<int32_t>(uniform_index(rng, static_cast<uint64_t>(n - i)));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(k);
  return pool;
}

std::vector<double> random_direction(std::mt19937_64& rng, int32_t d, double scale) {
  NormalSampler normal(0.0, 1.0);
  std::vector<double> v(d);
  double norm = 0.0;
  for (auto& x : v) {
    x = normal(rng);
    norm += x * x;
  }
  norm = std::sqrt(norm);
  for (auto& x : v) x *= scale / norm;
  return v;
}

std::string padded(const std::string& prefix, int64_t value, int width) {
  std::ostringstream out;
  out << prefix;
  out.width(width);
  out.fill('0');
  out << value;
  return out.str();
}

}  // namespace

SyntheticData generate_synthetic(const SyntheticConfig& c) {
  require(c.users > 0 && c.items > 0 && c.topics > 0, ErrorKind::kConfig,
          "users, items and topics must be positive");
  require(c.items >= c.topics, ErrorKind::kConfig, "need at least one item per topic");
  require(c.item_topic_tokens <= c.tokens_per_topic && c.item_noise_tokens <= c.noise_tokens,
          ErrorKind::kConfig, "items draw more tokens than their pools hold");
  require(c.min_len >= 1 && c.max_len >= c.min_len, ErrorKind::kConfig,
          "sequence lengths must satisfy 1 <= min_len <= max_len");
  require(c.d_sem > 0, ErrorKind::kConfig, "d_sem must be positive");

  SyntheticData data;
  auto item_rng = make_stream(c.seed, "synthetic-items");
  auto token_rng = make_stream(c.seed, "synthetic-tokens");
  auto seq_rng = make_stream(c.seed, "synthetic-sequences");

  const int32_t topic_vocab = c.topics * c.tokens_per_topic;
  const int32_t vocab = topic_vocab + c.noise_tokens;
  const int width = static_cast<int>(std::to_string(std::max(c.items, c.users)).size());

  // Items: topic = i mod T, within-topic rank = i / T.
  std::vector<std::vector<int32_t>> by_topic(c.topics);
  for (int32_t i = 0; i < c.items; ++i) {
    const int32_t topic = i % c.topics;
    std::vector<int32_t> tokens;
    for (int32_t t : draw_distinct(item_rng, c.tokens_per_topic, c.item_topic_tokens)) {
      tokens.push_back(topic * c.tokens_per_topic + t);
    }
    for (int32_t t : draw_distinct(item_rng, c.noise_tokens, c.item_noise_tokens)) {
      tokens.push_back(topic_vocab + t);
    }
    for (std::size_t a = tokens.size(); a > 1; --a) {
      std::swap(tokens[a - 1], tokens[uniform_index(item_rng, a)]);
    }
    data.catalog.add(padded("i", i, width), std::move(tokens));
    data.item_topic.push_back(topic);
    by_topic[topic].push_back(i);
  }
  data.catalog.set_vocab_size(vocab);

  std::vector<std::vector<double>> source_cdf(c.topics), target_cdf(c.topics);
  std::vector<std::vector<int32_t>> target_items(c.topics);
  for (int32_t t = 0; t < c.topics; ++t) {
    const auto& members = by_topic[t];
    std::vector<double> w(members.size());
    for (std::size_t r = 0; r < members.size(); ++r) {
      w[r] = 1.0 / std::pow(static_cast<double>(r + 1), c.popularity_exponent);
    }
    source_cdf[t] = cumulative_of(w);
    const auto n_target = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::ceil(c.target_item_fraction * members.size())));
    target_items[t].assign(members.begin(), members.begin() + static_cast<std::ptrdiff_t>(
                                                                  std::min(n_target, members.size())));
    std::vector<double> tw(target_items[t].size());
    for (std::size_t r = 0; r < tw.size(); ++r) {
      tw[r] = 1.0 / std::pow(static_cast<double>(tw.size() - r), c.popularity_exponent);
    }
    target_cdf[t] = cumulative_of(tw);
  }
  std::vector<int32_t> successor(c.items);
  for (auto& s : successor) s = static_cast<int32_t>(uniform_index(item_rng, c.items));

  for (int32_t u = 0; u < c.users; ++u) {
    const std::string user = padded("u", u, width);
    const auto favourites = draw_distinct(seq_rng, c.topics, std::min(2, c.topics));
    const auto length =
        c.min_len + static_cast<int32_t>(uniform_index(seq_rng, c.max_len - c.min_len + 1));
    int32_t topic = favourites[uniform_index(seq_rng, favourites.size())];
    int32_t previous = -1;
    auto& seq = data.corpus.sequences[user];
    for (int32_t j = 0; j < length; ++j) {
      if (j > 0 && uniform_real(seq_rng) >= c.topic_stay) {
        topic = uniform_real(seq_rng) < c.favourite_jump
                    ? favourites[uniform_index(seq_rng, favourites.size())]
                    : static_cast<int32_t>(uniform_index(seq_rng, c.topics));
      }
      const bool target = c.target_event_prob > 0.0 && uniform_real(seq_rng) < c.target_event_prob;
      int32_t item;
      if (target) {
        item = target_items[topic][draw_weighted(seq_rng, target_cdf[topic])];
      } else if (previous >= 0 && uniform_real(seq_rng) < c.successor_prob) {
        item = successor[previous];
        topic = data.item_topic[item];
      } else {
        item = by_topic[topic][draw_weighted(seq_rng, source_cdf[topic])];
      }
      seq.push_back({data.catalog.id(item + 1), 1'000'000 + 60 * static_cast<int64_t>(j),
                     target ? c.target_scene : c.source_scene, c.action});
      data.catalog.add_popularity(item + 1, 1);
      if (!target) previous = item;
    }
  }

  // Token embeddings.
  std::vector<float> table(static_cast<std::size_t>(vocab) * c.d_sem);
  const auto marker_unit = random_direction(token_rng, c.d_sem, 1.0);
  std::vector<double> marker(marker_unit);
  for (auto& x : marker) x *= c.marker_scale;
  NormalSampler jitter(0.0, c.token_jitter / std::sqrt(static_cast<double>(c.d_sem)));
  for (int32_t t = 0; t < c.topics; ++t) {
    const auto centroid = random_direction(token_rng, c.d_sem, c.topic_scale);
    for (int32_t j = 0; j < c.tokens_per_topic; ++j) {
      float* row = &table[static_cast<std::size_t>(t * c.tokens_per_topic + j) * c.d_sem];
      for (int32_t d = 0; d < c.d_sem; ++d) {
        row[d] = static_cast<float>(centroid[d] + marker[d] + jitter(token_rng));
      }
    }
  }
  for (int32_t j = 0; j < c.noise_tokens; ++j) {
    auto v = random_direction(token_rng, c.d_sem, 1.0);
    double along = 0.0, norm = 0.0;
    for (int32_t d = 0; d < c.d_sem; ++d) along += v[d] * marker_unit[d];
    for (int32_t d = 0; d < c.d_sem; ++d) {
      v[d] -= along * marker_unit[d];
      norm += v[d] * v[d];
    }
    norm = std::sqrt(norm);
    float* row = &table[static_cast<std::size_t>(topic_vocab + j) * c.d_sem];
    for (int32_t d = 0; d < c.d_sem; ++d) {
      row[d] = static_cast<float>(c.noise_scale * v[d] / norm - c.noise_marker * marker_unit[d]);
    }
  }
  data.token_init.add(TensorEntry::from_values<float>("token_embeddings", {vocab, c.d_sem}, table));
  data.token_init.meta = {{"generator", "synthetic"}, {"config", to_json(c)}};
  return data;
}

void write_synthetic(const SyntheticData& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ostringstream catalog;
  for (int32_t i = 1; i <= static_cast<int32_t>(data.catalog.size()); ++i) {
    const auto tokens = data.catalog.tokens(i);
    catalog << json{{"item", data.catalog.id(i)},
                    {"tokens", std::vector<int32_t>(tokens.begin(), tokens.end())}}
                   .dump()
            << '\n';
  }
  write_file_atomic(dir / "catalog.jsonl", catalog.str());
  std::ostringstream events;
  for (const auto& [user, seq] : data.corpus.sequences) {
    for (const auto& e : seq) {
      events << json{{"user", user}, {"item", e.item}, {"ts", e.ts}, {"scene", e.scene},
                     {"action", e.action}}
                    .dump()
             << '\n';
    }
  }
  write_file_atomic(dir / "interactions.jsonl", events.str());
  write_container(data.token_init, dir / "token_init.ptns");
}

}  // namespace fusionrec

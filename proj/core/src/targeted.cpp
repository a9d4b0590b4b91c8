#include "fusionrec/targeted.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>

#include "fusionrec/error.hpp"
#include "fusionrec/random.hpp"

namespace fusionrec {

using nlohmann::json;

json to_json(const TargetedConfig& config) {
  const auto& s = config.schedule;
  return {{"batch_size", config.batch_size},
          {"max_contrast", config.max_contrast},
          {"lr", config.lr},
          {"seed", config.seed},
          {"checkpoint_every", config.checkpoint_every},
          {"log_every", config.log_every},
          {"steps", s.total_steps},
          {"warmup_period", s.warmup_period},
          {"phase_a_steps", s.alternate_phase_a_steps},
          {"plateau_trigger", s.plateau_trigger},
          {"plateau_window", s.plateau_window},
          {"plateau_tolerance", s.plateau_tolerance}};
}

TargetedConfig targeted_config_from_json(const json& doc) {
  TargetedConfig config;
  auto& s = config.schedule;
  config.batch_size = doc.value("batch_size", config.batch_size);
  config.max_contrast = doc.value("max_contrast", config.max_contrast);
  config.lr = doc.value("lr", config.lr);
  config.seed = doc.value("seed", config.seed);
  config.checkpoint_every = doc.value("checkpoint_every", config.checkpoint_every);
  config.log_every = doc.value("log_every", config.log_every);
  s.total_steps = doc.value("steps", s.total_steps);
  s.warmup_period = doc.value("warmup_period", s.warmup_period);
  s.alternate_phase_a_steps = doc.value("phase_a_steps", s.alternate_phase_a_steps);
  s.plateau_trigger = doc.value("plateau_trigger", s.plateau_trigger);
  s.plateau_window = doc.value("plateau_window", s.plateau_window);
  s.plateau_tolerance = doc.value("plateau_tolerance", s.plateau_tolerance);
  return config;
}

std::shared_ptr<const Checkpoint> DirectoryCheckpointProvider::latest() {
  const auto path = latest_checkpoint(dir_, Phase::kUniversal);
  if (!path) fail(ErrorKind::kNotFound, "no universal checkpoint in " + dir_.string());
  if (!cached_ || *path != loaded_path_ ||
      read_manifest(*path).at("meta").value("id", std::string()) != cached_->id()) {
    cached_ = std::make_shared<const Checkpoint>(load_checkpoint(*path));
    loaded_path_ = *path;
  }
  return cached_;
}

void copy_shared(const Model<float>& source, Model<float>& model) {
  for (auto& [name, target] : model.params) {
    if (names::is_head(name)) continue;
    auto it = source.params.find(name);
    if (it == source.params.end()) {
      fail(ErrorKind::kShapeMismatch, "source checkpoint lacks tensor '" + name + "'");
    }
    const Matrix<float>& from = it->second;
    if (from.cols() != target.cols()) {
      fail(ErrorKind::kShapeMismatch,
           "dimension mismatch in tensor '" + name + "': source has " +
               std::to_string(from.cols()) + " columns, target " + std::to_string(target.cols()));
    }
    if (name == names::kIdTable) {
      target.row(kPaddingItem) = from.row(kPaddingItem);
      for (int32_t i = 1; i <= static_cast<int32_t>(model.catalog.size()); ++i) {
        if (auto src = source.catalog.find(model.catalog.id(i))) target.row(i) = from.row(*src);
      }
    } else if (name == names::kTokenTable) {
      const auto rows = std::min(from.rows(), target.rows());
      target.topRows(rows) = from.topRows(rows);
    } else {
      if (from.rows() != target.rows()) {
        fail(ErrorKind::kShapeMismatch,
             "dimension mismatch in tensor '" + name + "': source has " +
                 std::to_string(from.rows()) + " rows, target " + std::to_string(target.rows()));
      }
      target = from;
    }
  }
}

Checkpoint warm_start(const Checkpoint& universal, const ItemCatalog& catalog,
                      const ModelDims& dims, uint64_t seed) {
  const ModelDims& source = universal.model.dims;
  if (source.fusion.d_id != dims.fusion.d_id || source.fusion.d_sem != dims.fusion.d_sem ||
      source.fusion.experts != dims.fusion.experts || source.stack.layers != dims.stack.layers ||
      source.stack.max_len != dims.stack.max_len ||
      source.stack.ff_width(source.d_model()) != dims.stack.ff_width(dims.d_model())) {
    fail(ErrorKind::kShapeMismatch, "universal checkpoint dims " + to_json(source).dump() +
                                        " differ from targeted dims " + to_json(dims).dump());
  }
  Checkpoint out;
  out.model = init_model(catalog, dims, Phase::kTargeted, seed);
  copy_shared(universal.model, out.model);
  out.meta["parent"] = universal.id();
  out.meta["seed"] = seed;
  out.meta["step"] = 0;
  return out;
}

namespace {

class TargetSampler {
 public:
  TargetSampler(const SequenceCorpus& corpus, const ItemCatalog& catalog, int32_t max_len,
                uint64_t seed)
      : max_len_(max_len),
        order_rng_(make_stream(seed, "batch-order")),
        window_rng_(make_stream(seed, "windows")) {
    for (const auto& [user, seq] : corpus.sequences) {
      if (seq.size() < 2) continue;
      users_.push_back(user);
      sequences_.push_back(to_indices(catalog, seq));
    }
    require(users_.size() >= 2, ErrorKind::kInvalidArgument,
            "targeted training needs at least two users with two or more interactions");
  }

  std::size_t user_count() const { return users_.size(); }

  TargetBatch next(int32_t batch_size) {
    const auto rows = static_cast<int32_t>(std::min<std::size_t>(batch_size, users_.size()));
    // partial Fisher-Yates: distinct users per batch
    std::vector<std::size_t> pool(users_.size());
    std::iota(pool.begin(), pool.end(), 0);
    TargetBatch batch;
    batch.rows = rows;
    batch.max_len = max_len_;
    batch.items.assign(static_cast<std::size_t>(rows) * max_len_, kPaddingItem);
    for (int32_t r = 0; r < rows; ++r) {
      const std::size_t pick = r + uniform_index(order_rng_, pool.size() - r);
      std::swap(pool[r], pool[pick]);
      const auto& seq = sequences_[pool[r]];
      const auto end = static_cast<int64_t>(1 + uniform_index(window_rng_, seq.size() - 1));
      const int64_t begin = std::max<int64_t>(0, end - max_len_);
      std::copy(seq.begin() + begin, seq.begin() + end,
                batch.items.begin() + static_cast<std::ptrdiff_t>(r) * max_len_);
      batch.users.push_back(users_[pool[r]]);
      batch.lengths.push_back(static_cast<int32_t>(end - begin));
      batch.targets.push_back(seq[end]);
    }
    return batch;
  }

 private:
  int32_t max_len_;
  std::vector<std::string> users_;
  std::vector<std::vector<int32_t>> sequences_;
  std::mt19937_64 order_rng_;
  std::mt19937_64 window_rng_;
};

}  // namespace

TargetedResult train_targeted(const SequenceCorpus& train, const ItemCatalog& catalog,
                              const ModelDims& dims, UniversalCheckpointProvider* provider,
                              const TargetedConfig& config, const CheckpointSink& sink,
                              const TargetedObserver& observer, const json& extra_meta) {
  const ScheduleConfig& schedule = config.schedule;
  require(schedule.warmup_period >= 0, ErrorKind::kConfig, "warmup_period must be >= 0");
  TargetedResult result;
  Checkpoint& state = result.final;
  if (provider != nullptr) {
    state = warm_start(*provider->latest(), catalog, dims, config.seed);
  } else {
    state.model = init_model(catalog, dims, Phase::kTargeted, config.seed);
    state.meta["parent"] = nullptr;
    state.meta["seed"] = config.seed;
  }
  for (const auto& [key, value] : extra_meta.items()) state.meta[key] = value;
  state.meta["step"] = 0;

  TargetSampler sampler(train, catalog, dims.stack.max_len, config.seed);
  const auto rows = static_cast<int32_t>(std::min<std::size_t>(config.batch_size,
                                                               sampler.user_count()));
  const int32_t n_contrast = std::min(rows - 1, config.max_contrast);
  require(n_contrast >= 1, ErrorKind::kConfig, "targeted.max_contrast must be >= 1");

  const std::set<std::string> frozen_tokens = {names::kTokenTable};
  bool phase_a = schedule.plateau_trigger || schedule.alternate_phase_a_steps > 0;
  double window_sum = 0.0;
  double previous_window = -1.0;

  for (int64_t step = 0; step < schedule.total_steps; ++step) {
    if (provider != nullptr && schedule.warmup_period > 0 && step > 0 &&
        step % schedule.warmup_period == 0) {
      const auto source = provider->latest();
      copy_shared(source->model, state.model);
      for (const auto& [name, value] : state.model.params) {
        if (!names::is_head(name)) state.optimizer.reset(name);
      }
      state.meta["parent"] = source->id();
      ++result.refreshes;
      if (observer.on_refresh) observer.on_refresh(step, state.model, *source);
    }
    if (phase_a && !schedule.plateau_trigger && step >= schedule.alternate_phase_a_steps) {
      phase_a = false;
    }
    if (phase_a && schedule.plateau_trigger && schedule.alternate_phase_a_steps > 0 &&
        step >= schedule.alternate_phase_a_steps) {
      phase_a = false;
    }
    if (!phase_a && result.phase_a_end == 0) result.phase_a_end = step;

    const TargetBatch batch = sampler.next(config.batch_size);
    ad::Tape<float> tape;
    ParamBinder<float> bind(tape, state.model.params);
    const ad::Var loss =
        targeted_batch_loss<float>(bind, dims, state.model.catalog, batch, n_contrast);
    const double value = tape.value(loss)(0, 0);
    if (!std::isfinite(value)) {
      fail(ErrorKind::kDiverged, "targeted training diverged at step " + std::to_string(step));
    }
    tape.backward(loss);
    try {
      adam_step(state.model.params, bind.gradients(), state.optimizer, config.lr, {},
                phase_a ? &frozen_tokens : nullptr);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::kNonFinite) throw;
      fail(ErrorKind::kDiverged,
           "targeted training diverged at step " + std::to_string(step) + ": " + e.what());
    }
    result.losses.push_back(value);
    state.meta["step"] = step + 1;
    if (observer.on_step) observer.on_step(step + 1, state.model, value);
    if (config.log_every > 0 && (step + 1) % config.log_every == 0) {
      std::clog << "[targeted] step " << step + 1 << "/" << schedule.total_steps << " loss "
                << value << (phase_a ? " (phase A)" : "") << "\n";
    }

    if (phase_a && schedule.plateau_trigger) {
      window_sum += value;
      if ((step + 1) % schedule.plateau_window == 0) {
        const double mean = window_sum / static_cast<double>(schedule.plateau_window);
        if (previous_window > 0.0 &&
            (previous_window - mean) / previous_window < schedule.plateau_tolerance) {
          phase_a = false;
        }
        previous_window = mean;
        window_sum = 0.0;
      }
    }
    const bool last = step + 1 == schedule.total_steps;
    if (sink && (last || (config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0))) {
      sink(state);
    }
  }
  if (phase_a) result.phase_a_end = schedule.total_steps;
  if (schedule.total_steps == 0 && sink) sink(state);
  return result;
}

std::vector<std::optional<double>> coverage_ratio(
    const std::set<std::string>& universal_vocab,
    const std::vector<std::vector<std::string>>& exposures_per_day) {
  std::vector<std::optional<double>> out;
  for (const auto& day : exposures_per_day) {
    if (day.empty()) {
      out.push_back(std::nullopt);
      continue;
    }
    std::size_t covered = 0;
    for (const auto& item : day) covered += universal_vocab.count(item);
    out.push_back(static_cast<double>(covered) / static_cast<double>(day.size()));
  }
  return out;
}

std::vector<ArrivalDay> load_arrivals(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot open " + path.string());
  std::vector<ArrivalDay> days;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json doc = json::parse(line);
      days.push_back({doc.at("day").get<int64_t>(),
                      doc.value("new_items", std::vector<std::string>{}),
                      doc.value("exposed", std::vector<std::string>{})});
    } catch (const json::exception& e) {
      fail(ErrorKind::kParse, "line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  std::stable_sort(days.begin(), days.end(),
                   [](const ArrivalDay& a, const ArrivalDay& b) { return a.day < b.day; });
  return days;
}

void save_arrivals(const std::vector<ArrivalDay>& days, const std::filesystem::path& path) {
  std::string text;
  for (const auto& day : days) {
    text += json{{"day", day.day}, {"new_items", day.new_items}, {"exposed", day.exposed}}.dump();
    text += "\n";
  }
  write_file_atomic(path, std::as_bytes(std::span(text.data(), text.size())));
}

std::vector<ArrivalDay> synthetic_arrivals(int64_t days, int64_t initial_items,
                                           double new_fraction, int64_t peak_exposures,
                                           double decay) {
  require(days >= 0 && initial_items >= 1 && new_fraction >= 0.0, ErrorKind::kInvalidArgument,
          "synthetic_arrivals: invalid parameters");
  std::vector<ArrivalDay> out;
  std::vector<std::pair<std::string, int64_t>> catalog;  // (item, arrival day)
  int64_t next_id = 0;
  auto publish = [&](ArrivalDay& day, int64_t count) {
    for (int64_t i = 0; i < count; ++i) {
      std::string id = "n" + std::to_string(next_id++);
      day.new_items.push_back(id);
      catalog.emplace_back(std::move(id), day.day);
    }
  };
  ArrivalDay initial;
  initial.day = 0;
  publish(initial, initial_items);
  out.push_back(std::move(initial));
  for (int64_t d = 1; d <= days; ++d) {
    ArrivalDay day;
    day.day = d;
    publish(day, static_cast<int64_t>(
                     std::ceil(new_fraction * static_cast<double>(catalog.size()))));
    for (const auto& [item, born] : catalog) {
      const double expected =
          static_cast<double>(peak_exposures) * std::pow(decay, static_cast<double>(d - born));
      const auto count = std::max<int64_t>(1, std::llround(expected));
      day.exposed.insert(day.exposed.end(), static_cast<std::size_t>(count), item);
    }
    out.push_back(std::move(day));
  }
  return out;
}

std::vector<std::optional<double>> simulate_warmup(const std::vector<ArrivalDay>& days,
                                                   int64_t refresh_every) {
  std::vector<std::optional<double>> out;
  std::set<std::string> vocab;
  std::vector<std::string> published;  // items published on earlier days
  int64_t last_pull = 0;
  for (const auto& day : days) {
    if (day.day >= 1) {
      const bool pull =
          last_pull == 0 || (refresh_every > 0 && day.day - last_pull >= refresh_every);
      if (pull) {
        vocab.insert(published.begin(), published.end());
        last_pull = day.day;
      }
      out.push_back(coverage_ratio(vocab, {day.exposed}).front());
    }
    published.insert(published.end(), day.new_items.begin(), day.new_items.end());
  }
  return out;
}

}  // namespace fusionrec

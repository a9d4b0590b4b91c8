#include "fusionrec/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "fusionrec/error.hpp"
#include "fusionrec/random.hpp"
#include "fusionrec/recall.hpp"

namespace fusionrec {

using nlohmann::json;
namespace fs = std::filesystem;

PipelineConfig desk_preset() {
  PipelineConfig c;
  c.dims.fusion.d_id = 64;
  c.dims.fusion.d_sem = 64;
  c.dims.stack.layers = 2;
  c.dims.stack.heads = 2;
  c.dims.stack.d_ff = 256;
  c.dims.stack.max_len = 50;
  c.universal.batch_size = 128;
  return c;
}

PipelineConfig large_preset() {
  PipelineConfig c;
  c.dims.fusion.d_id = 128;
  c.dims.fusion.d_sem = 128;
  c.dims.stack.layers = 6;
  c.dims.stack.heads = 2;
  c.dims.stack.d_ff = 512;
  c.dims.stack.max_len = 50;
  c.universal.batch_size = 128;
  c.universal.epochs = 20;
  return c;
}

namespace {

json universal_section(const UniversalConfig& u) {
  json doc = to_json(u);
  doc.erase("seed");
  return doc;
}

json targeted_section(const TargetedConfig& t) {
  json doc = to_json(t);
  doc.erase("seed");
  return doc;
}

json synthetic_section(const SyntheticConfig& s) {
  json doc = to_json(s);
  doc.erase("seed");
  return doc;
}

void check_keys(const json& doc, const json& allowed, const std::string& section,
                std::vector<std::string>& violations) {
  if (!doc.is_object()) {
    violations.push_back(section + " must be an object");
    return;
  }
  for (const auto& [key, value] : doc.items()) {
    if (!allowed.contains(key)) {
      violations.push_back("unknown key " + (section.empty() ? key : section + "." + key));
    }
  }
}

// Applies `parse` to the section, recording type errors instead of throwing.
template <class F>
void parse_section(const std::string& section, std::vector<std::string>& violations, F&& parse) {
  try {
    parse();
  } catch (const json::exception& e) {
    violations.push_back(section + ": " + e.what());
  } catch (const Error& e) {
    violations.push_back(section + ": " + e.what());
  }
}

}  // namespace

json to_json(const PipelineConfig& c) {
  json doc;
  doc["seed"] = c.seed;
  doc["work_dir"] = c.work_dir;
  doc["data"] = {{"interactions", c.interactions},
                 {"catalog", c.catalog},
                 {"token_init", c.token_init},
                 {"dataset", c.dataset},
                 {"scenes", c.scenes},
                 {"actions", c.actions},
                 {"target_scene", c.target_scene},
                 {"min_vocab", c.min_vocab}};
  if (c.synthetic) doc["synthetic"] = synthetic_section(*c.synthetic);
  doc["model"] = to_json(c.dims);
  doc["universal"] = universal_section(c.universal);
  doc["targeted"] = targeted_section(c.targeted);
  doc["eval"] = {{"k", c.eval_k}};
  doc["export"] = {{"timestamp", c.timestamp}};
  return doc;
}

ConfigCheck validate_config(const json& doc) {
  ConfigCheck check;
  auto& v = check.violations;
  if (!doc.is_object()) {
    v.push_back("config must be a JSON object");
    return check;
  }
  PipelineConfig c;
  const std::string preset = doc.value("preset", std::string("desk"));
  if (preset == "desk") {
    c = desk_preset();
  } else if (preset == "large") {
    c = large_preset();
  } else {
    v.push_back("unknown preset '" + preset + "' (expected desk or large)");
  }
  json top = to_json(c);
  top["preset"] = preset;
  top["synthetic"] = json::object();
  check_keys(doc, top, "", v);

  parse_section("seed", v, [&] { c.seed = doc.value("seed", c.seed); });
  parse_section("work_dir", v, [&] { c.work_dir = doc.value("work_dir", c.work_dir); });
  if (doc.contains("data")) {
    const json& d = doc.at("data");
    check_keys(d, top.at("data"), "data", v);
    if (d.is_object()) {
      parse_section("data", v, [&] {
        c.interactions = d.value("interactions", c.interactions);
        c.catalog = d.value("catalog", c.catalog);
        c.token_init = d.value("token_init", c.token_init);
        c.dataset = d.value("dataset", c.dataset);
        c.scenes = d.value("scenes", c.scenes);
        c.actions = d.value("actions", c.actions);
        c.target_scene = d.value("target_scene", c.target_scene);
        c.min_vocab = d.value("min_vocab", c.min_vocab);
      });
    }
  }
  if (doc.contains("synthetic")) {
    const json& s = doc.at("synthetic");
    check_keys(s, synthetic_section(SyntheticConfig{}), "synthetic", v);
    if (s.is_object()) {
      parse_section("synthetic", v, [&] { c.synthetic = synthetic_config_from_json(s); });
    }
  }
  if (doc.contains("model")) {
    const json& m = doc.at("model");
    check_keys(m, to_json(c.dims), "model", v);
    if (m.is_object()) {
      parse_section("model", v, [&] {
        json merged = to_json(c.dims);
        merged.update(m);
        c.dims = model_dims_from_json(merged);
      });
    }
  }
  if (doc.contains("universal")) {
    const json& u = doc.at("universal");
    check_keys(u, universal_section(c.universal), "universal", v);
    if (u.is_object()) {
      parse_section("universal", v, [&] {
        json merged = universal_section(c.universal);
        merged.update(u);
        c.universal = universal_config_from_json(merged);
      });
    }
  }
  if (doc.contains("targeted")) {
    const json& t = doc.at("targeted");
    check_keys(t, targeted_section(c.targeted), "targeted", v);
    if (t.is_object()) {
      parse_section("targeted", v, [&] {
        json merged = targeted_section(c.targeted);
        merged.update(t);
        c.targeted = targeted_config_from_json(merged);
      });
    }
  }
  if (doc.contains("eval")) {
    check_keys(doc.at("eval"), top.at("eval"), "eval", v);
    parse_section("eval", v, [&] { c.eval_k = doc.at("eval").value("k", c.eval_k); });
  }
  if (doc.contains("export")) {
    check_keys(doc.at("export"), top.at("export"), "export", v);
    parse_section("export", v, [&] { c.timestamp = doc.at("export").value("timestamp", c.timestamp); });
  }

  c.universal.seed = c.seed;
  c.targeted.seed = c.seed;
  if (c.synthetic) c.synthetic->seed = c.seed;

  for (const auto& e : validate_dims(c.dims)) v.push_back(e);
  if (c.universal.batch_size < 1) v.push_back("universal.batch_size must be >= 1");
  if (c.universal.negatives < 1) v.push_back("universal.negatives must be >= 1");
  if (!(c.universal.lr > 0.0)) v.push_back("universal.lr must be > 0");
  if (c.universal.epochs < 1) v.push_back("universal.epochs must be >= 1");
  if (c.universal.max_steps < 0) v.push_back("universal.max_steps must be >= 0");
  if (c.targeted.batch_size < 2) v.push_back("targeted.batch_size must be >= 2");
  if (c.targeted.max_contrast < 1) v.push_back("targeted.max_contrast must be >= 1");
  if (!(c.targeted.lr > 0.0)) v.push_back("targeted.lr must be > 0");
  const auto& s = c.targeted.schedule;
  if (s.total_steps < 1) v.push_back("targeted.steps must be >= 1");
  if (s.warmup_period < 0) v.push_back("targeted.warmup_period must be >= 0");
  if (s.alternate_phase_a_steps < 0) v.push_back("targeted.phase_a_steps must be >= 0");
  if (s.plateau_window < 1) v.push_back("targeted.plateau_window must be >= 1");
  if (c.targeted.checkpoint_every < 0) v.push_back("targeted.checkpoint_every must be >= 0");
  if (c.eval_k.empty()) v.push_back("eval.k must list at least one cutoff");
  for (int32_t k : c.eval_k) {
    if (k < 1) v.push_back("eval.k entries must be >= 1 (got " + std::to_string(k) + ")");
  }
  if (c.min_vocab < 0) v.push_back("data.min_vocab must be >= 0");
  if (c.work_dir.empty()) v.push_back("work_dir must not be empty");
  if (!c.synthetic && (c.interactions.empty() || c.catalog.empty()) && c.dataset.empty()) {
    v.push_back("data.interactions and data.catalog (or data.dataset, or a synthetic section) "
                "are required");
  }
  if (c.synthetic && c.synthetic->d_sem != c.dims.fusion.d_sem && c.token_init.empty()) {
    v.push_back("synthetic.d_sem (" + std::to_string(c.synthetic->d_sem) +
                ") must equal model.d_sem (" + std::to_string(c.dims.fusion.d_sem) + ")");
  }
  if (v.empty()) check.config = c;
  return check;
}

ConfigCheck validate_config_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) return {std::nullopt, {"cannot open config " + path.string()}};
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    return {std::nullopt, {path.string() + ": " + e.what()}};
  }
  return validate_config(doc);
}

PipelineConfig load_config(const fs::path& path) {
  ConfigCheck check = validate_config_file(path);
  if (!check.config) {
    std::string msg = "invalid config " + path.string() + ":";
    for (const auto& violation : check.violations) msg += "\n  - " + violation;
    fail(ErrorKind::kConfig, msg);
  }
  return *check.config;
}

std::string config_hash(const PipelineConfig& config) {
  json doc = to_json(config);
  doc.erase("work_dir");
  const std::string text = doc.dump();
  return hex64(fnv1a64(text));
}

std::string to_string(Stage stage) {
  switch (stage) {
    case Stage::kGenSynthetic: return "gen-synthetic";
    case Stage::kIngest: return "ingest";
    case Stage::kTrainUniversal: return "train-universal";
    case Stage::kTrainTargeted: return "train-targeted";
    case Stage::kEval: return "eval";
    case Stage::kExport: return "export";
    case Stage::kIndex: return "index";
  }
  return "?";
}

const std::vector<Stage>& all_stages() {
  static const std::vector<Stage> stages = {Stage::kGenSynthetic,   Stage::kIngest,
                                            Stage::kTrainUniversal, Stage::kTrainTargeted,
                                            Stage::kEval,           Stage::kExport,
                                            Stage::kIndex};
  return stages;
}

Stage parse_stage(const std::string& name) {
  for (Stage s : all_stages()) {
    if (to_string(s) == name) return s;
  }
  fail(ErrorKind::kInvalidArgument, "unknown stage: " + name);
}

PipelinePaths pipeline_paths(const PipelineConfig& c) {
  const fs::path work = c.work_dir;
  PipelinePaths p;
  p.data_dir = work / "data";
  const bool generated = c.synthetic.has_value();
  p.interactions = !c.interactions.empty() ? fs::path(c.interactions)
                   : generated             ? p.data_dir / "interactions.jsonl"
                                           : fs::path();
  p.catalog = !c.catalog.empty() ? fs::path(c.catalog)
              : generated        ? p.data_dir / "catalog.jsonl"
                                 : fs::path();
  p.token_init = !c.token_init.empty() ? fs::path(c.token_init)
                 : generated           ? p.data_dir / "token_init.ptns"
                                       : fs::path();
  p.dataset = !c.dataset.empty() ? fs::path(c.dataset) : work / "dataset.json";
  p.universal_dir = work / "universal";
  p.targeted_dir = work / "targeted";
  p.eval_universal = work / "eval_universal.json";
  p.eval_targeted = work / "eval_targeted.json";
  p.users = work / "users.ptns";
  p.items = work / "items.ptns";
  p.exclusions = work / "exclusions.json";
  p.index = work / "index.ptns";
  return p;
}

json provenance(const PipelineConfig& config) {
  return {{"config_hash", config_hash(config)}, {"seed", config.seed}};
}

Dataset ingest(const fs::path& interactions, const fs::path& catalog_path, const TagFilter& scenes,
               const TagFilter& actions, const std::string& target_scene, int32_t min_vocab) {
  ItemCatalog catalog = load_catalog(catalog_path, min_vocab);
  const SequenceCorpus corpus = load_interactions(interactions, catalog, scenes, actions);
  return make_dataset(std::move(catalog), corpus, target_scene);
}

std::string checkpoint_filename(Phase phase, int64_t step) {
  std::ostringstream name;
  name << (phase == Phase::kUniversal ? "ut-" : "tt-") << std::setw(8) << std::setfill('0')
       << step << ".ptns";
  return name.str();
}

namespace {

std::optional<TensorContainer> load_token_init(const PipelinePaths& paths) {
  if (paths.token_init.empty()) return std::nullopt;
  return read_container(paths.token_init);
}

void note(std::ostream* log, const std::string& msg) {
  if (log) *log << msg << "\n";
}

}  // namespace

Checkpoint run_universal_training(const Dataset& dataset, const PipelineConfig& config,
                                  const fs::path& dir, std::ostream* log) {
  fs::create_directories(dir);
  const PipelinePaths paths = pipeline_paths(config);
  const auto token_init = load_token_init(paths);
  auto sink = [&](Checkpoint& checkpoint) {
    const fs::path path = dir / checkpoint_filename(Phase::kUniversal, checkpoint.step());
    save_checkpoint(checkpoint, path);
    note(log, "wrote " + path.string());
  };
  json meta = provenance(config);
  UniversalResult result =
      train_universal(dataset.split.train, dataset.catalog, config.dims, config.universal,
                      token_init ? &*token_init : nullptr, sink, meta);
  return std::move(result.final);
}

Checkpoint run_targeted_training(const Dataset& dataset, const PipelineConfig& config,
                                 const fs::path& universal_dir, const fs::path& dir,
                                 std::ostream* log) {
  fs::create_directories(dir);
  DirectoryCheckpointProvider provider(universal_dir);
  auto sink = [&](Checkpoint& checkpoint) {
    const fs::path path = dir / checkpoint_filename(Phase::kTargeted, checkpoint.step());
    save_checkpoint(checkpoint, path);
    note(log, "wrote " + path.string());
  };
  TargetedResult result = train_targeted(dataset.target_train, dataset.catalog, config.dims,
                                         &provider, config.targeted, sink, {},
                                         provenance(config));
  return std::move(result.final);
}

void run_pipeline(const PipelineConfig& config, std::span<const Stage> stages, std::ostream* log) {
  const std::set<Stage> wanted(stages.begin(), stages.end());
  const PipelinePaths paths = pipeline_paths(config);
  fs::create_directories(config.work_dir);
  write_file_atomic(fs::path(config.work_dir) / "config.json", to_json(config).dump(2) + "\n");

  for (Stage stage : all_stages()) {
    if (!wanted.count(stage)) continue;
    note(log, "== " + to_string(stage));
    switch (stage) {
      case Stage::kGenSynthetic: {
        require(config.synthetic.has_value(), ErrorKind::kConfig,
                "gen-synthetic needs a synthetic section");
        write_synthetic(generate_synthetic(*config.synthetic), paths.data_dir);
        break;
      }
      case Stage::kIngest: {
        require(!paths.interactions.empty() && fs::exists(paths.interactions), ErrorKind::kNotFound,
                "interactions file not found: " + paths.interactions.string());
        require(!paths.catalog.empty() && fs::exists(paths.catalog), ErrorKind::kNotFound,
                "catalog file not found: " + paths.catalog.string());
        TagFilter scenes, actions;
        if (!config.scenes.empty()) scenes = std::set<std::string>(config.scenes.begin(), config.scenes.end());
        if (!config.actions.empty()) actions = std::set<std::string>(config.actions.begin(), config.actions.end());
        Dataset dataset = ingest(paths.interactions, paths.catalog, scenes, actions,
                                 config.target_scene, config.min_vocab);
        dataset.meta = provenance(config);
        save_dataset(dataset, paths.dataset);
        break;
      }
      case Stage::kTrainUniversal: {
        fs::remove_all(paths.universal_dir);
        run_universal_training(load_dataset(paths.dataset), config, paths.universal_dir, log);
        break;
      }
      case Stage::kTrainTargeted: {
        fs::remove_all(paths.targeted_dir);
        run_targeted_training(load_dataset(paths.dataset), config, paths.universal_dir,
                              paths.targeted_dir, log);
        break;
      }
      case Stage::kEval: {
        const Dataset dataset = load_dataset(paths.dataset);
        const PopularityPartition partition = popularity_partition(dataset.split.train);
        const std::pair<Phase, fs::path> targets[] = {
            {Phase::kUniversal, paths.eval_universal}, {Phase::kTargeted, paths.eval_targeted}};
        for (const auto& [phase, out] : targets) {
          const auto dir = phase == Phase::kUniversal ? paths.universal_dir : paths.targeted_dir;
          const auto ckpt = latest_checkpoint(dir, phase);
          if (!ckpt) continue;
          const Checkpoint checkpoint = load_checkpoint(*ckpt);
          const EvalReport report = evaluate(checkpoint.model, phase, dataset.split.test,
                                             config.eval_k, &partition, to_string(phase));
          json doc = to_json(report);
          doc["checkpoint"] = checkpoint.id();
          doc["provenance"] = provenance(config);
          write_file_atomic(out, doc.dump(2) + "\n");
          note(log, "wrote " + out.string());
        }
        break;
      }
      case Stage::kExport: {
        const Dataset dataset = load_dataset(paths.dataset);
        auto ckpt = latest_checkpoint(paths.targeted_dir, Phase::kTargeted);
        if (!ckpt) ckpt = latest_checkpoint(paths.universal_dir, Phase::kUniversal);
        require(ckpt.has_value(), ErrorKind::kNotFound, "no checkpoint to export");
        const Checkpoint checkpoint = load_checkpoint(*ckpt);
        EmbeddingStore users = export_user_embeddings(checkpoint.model, dataset.target_train,
                                                      config.timestamp, checkpoint.id());
        EmbeddingStore items =
            export_item_embeddings(checkpoint.model, config.timestamp, checkpoint.id());
        users.meta["provenance"] = provenance(config);
        items.meta["provenance"] = provenance(config);
        save_store(users, paths.users);
        save_store(items, paths.items);
        save_exclusions(exclusions_from_corpus(dataset.target_train), paths.exclusions);
        break;
      }
      case Stage::kIndex: {
        SimilarityIndex::build(load_store(paths.items)).save(paths.index);
        break;
      }
    }
  }
}

}  // namespace fusionrec

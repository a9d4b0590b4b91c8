#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "fusionrec/data.hpp"
#include "fusionrec/evaluation.hpp"
#include "fusionrec/model.hpp"
#include "fusionrec/synthetic.hpp"
#include "fusionrec/targeted.hpp"
#include "fusionrec/universal.hpp"
#include "json.hpp"

namespace fusionrec {

// JSON layout:
// {
//   "preset": "desk" | "large",            optional base values
//   "seed": 0,                             feeds every component stream
//   "work_dir": "run",
//   "data": {"interactions", "catalog", "token_init", "dataset",
//            "scenes": [..], "actions": [..], "target_scene", "min_vocab"},
//   "synthetic": {...},                    optional; generates the data files
//   "model": {"d_id", "d_sem", "experts", "active_experts", "variant",
//             "layers", "heads", "d_ff", "max_len"},
//   "universal": {"batch_size", "negatives", "lr", "epochs", "max_steps", "log_every"},
//   "targeted": {"batch_size", "max_contrast", "lr", "steps", "warmup_period",
//                "phase_a_steps", "plateau_trigger", "plateau_window",
//                "plateau_tolerance", "checkpoint_every", "log_every"},
//   "eval": {"k": [10, 30, 50]},
//   "export": {"timestamp": "..."}
// }
struct PipelineConfig {
  uint64_t seed = 0;
  std::string work_dir = "run";
  std::string interactions;
  std::string catalog;
  std::string token_init;
  std::string dataset;
  std::vector<std::string> scenes;
  std::vector<std::string> actions;
  std::string target_scene;
  int32_t min_vocab = 0;
  std::optional<SyntheticConfig> synthetic;
  ModelDims dims;
  UniversalConfig universal;
  TargetedConfig targeted;
  std::vector<int32_t> eval_k = kDefaultCutoffs;
  std::string timestamp = "1970-01-01T00:00:00Z";
};

PipelineConfig desk_preset();
PipelineConfig large_preset();

// Fully normalised form (every default written out, paths resolved).
nlohmann::json to_json(const PipelineConfig& config);

struct ConfigCheck {
  std::optional<PipelineConfig> config;  // set only when violations is empty
  std::vector<std::string> violations;
};

ConfigCheck validate_config(const nlohmann::json& doc);
ConfigCheck validate_config_file(const std::filesystem::path& path);
// Throws kConfig listing every violation.
PipelineConfig load_config(const std::filesystem::path& path);

// Hex FNV-1a of the normalised JSON minus work_dir.
std::string config_hash(const PipelineConfig& config);

enum class Stage { kGenSynthetic, kIngest, kTrainUniversal, kTrainTargeted, kEval, kExport, kIndex };

std::string to_string(Stage stage);
Stage parse_stage(const std::string& name);
const std::vector<Stage>& all_stages();

struct PipelinePaths {
  std::filesystem::path data_dir;  // synthetic output
  std::filesystem::path interactions;
  std::filesystem::path catalog;
  std::filesystem::path token_init;  // empty when none
  std::filesystem::path dataset;
  std::filesystem::path universal_dir;
  std::filesystem::path targeted_dir;
  std::filesystem::path eval_universal;
  std::filesystem::path eval_targeted;
  std::filesystem::path users;
  std::filesystem::path items;
  std::filesystem::path exclusions;
  std::filesystem::path index;
};

PipelinePaths pipeline_paths(const PipelineConfig& config);

// Provenance stamped into every artifact: config hash and seed.
nlohmann::json provenance(const PipelineConfig& config);

Dataset ingest(const std::filesystem::path& interactions, const std::filesystem::path& catalog,
               const TagFilter& scenes, const TagFilter& actions,
               const std::string& target_scene = "", int32_t min_vocab = 0);

// Writes one checkpoint per sink call into `dir` as ut-<step>.ptns.
Checkpoint run_universal_training(const Dataset& dataset, const PipelineConfig& config,
                                  const std::filesystem::path& dir, std::ostream* log = nullptr);
// Pulls warm-starts and refreshes from the newest checkpoint in
// `universal_dir`; writes tt-<step>.ptns into `dir`.
Checkpoint run_targeted_training(const Dataset& dataset, const PipelineConfig& config,
                                 const std::filesystem::path& universal_dir,
                                 const std::filesystem::path& dir, std::ostream* log = nullptr);

std::string checkpoint_filename(Phase phase, int64_t step);

// Runs the requested stages in pipeline order. A failing stage throws and
// leaves earlier artifacts in place.
void run_pipeline(const PipelineConfig& config, std::span<const Stage> stages,
                  std::ostream* log = nullptr);

}  // namespace fusionrec

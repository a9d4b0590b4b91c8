#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fusionrec/error.hpp"
#include "fusionrec/evaluation.hpp"
#include "fusionrec/pipeline.hpp"
#include "fusionrec/recall.hpp"
#include "fusionrec/server.hpp"
#include "fusionrec/synthetic.hpp"
#include "fusionrec/targeted.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace fusionrec;

namespace {

TagFilter to_filter(const std::vector<std::string>& values) {
  if (values.empty()) return std::nullopt;
  return std::set<std::string>(values.begin(), values.end());
}

void emit(const std::string& text, const std::string& out) {
  if (out.empty() || out == "-") {
    std::cout << text;
  } else {
    write_file_atomic(out, text);
  }
}

std::atomic<bool> g_stop{false};

void on_signal(int) { g_stop = true; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fusionrec: fused ID + text sequential recommender"};
  app.require_subcommand(1);

  // ingest
  auto* ingest_cmd = app.add_subcommand("ingest", "Load interactions and catalog into a dataset");
  std::string ingest_interactions, ingest_catalog, ingest_out, ingest_target;
  std::vector<std::string> ingest_scenes, ingest_actions;
  int32_t ingest_min_vocab = 0;
  ingest_cmd->add_option("--interactions", ingest_interactions, "Interactions JSONL")->required();
  ingest_cmd->add_option("--catalog", ingest_catalog, "Catalog JSONL")->required();
  ingest_cmd->add_option("--scene", ingest_scenes, "Scenes to keep")->delimiter(',');
  ingest_cmd->add_option("--action", ingest_actions, "Actions to keep")->delimiter(',');
  ingest_cmd->add_option("--target-scene", ingest_target, "Hold out this scene's last events");
  ingest_cmd->add_option("--min-vocab", ingest_min_vocab, "Minimum token vocabulary size");
  ingest_cmd->add_option("--out", ingest_out, "Dataset JSON")->required();

  // train-universal
  auto* tu_cmd = app.add_subcommand("train-universal", "Universal (next-item) training");
  std::string tu_config, tu_dataset, tu_out;
  tu_cmd->add_option("--config", tu_config, "Pipeline config JSON")->required();
  tu_cmd->add_option("--dataset", tu_dataset, "Dataset JSON (default from config)");
  tu_cmd->add_option("--out-dir", tu_out, "Checkpoint directory (default <work_dir>/universal)");

  // train-targeted
  auto* tt_cmd = app.add_subcommand("train-targeted", "Targeted (BPR) training");
  std::string tt_config, tt_dataset, tt_out, tt_universal;
  tt_cmd->add_option("--config", tt_config, "Pipeline config JSON")->required();
  tt_cmd->add_option("--universal-ckpt-dir", tt_universal, "Universal checkpoint directory")
      ->required();
  tt_cmd->add_option("--dataset", tt_dataset, "Dataset JSON (default from config)");
  tt_cmd->add_option("--out-dir", tt_out, "Checkpoint directory (default <work_dir>/targeted)");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Full-catalog R@K / N@K evaluation");
  std::string eval_ckpt, eval_mode = "universal", eval_split, eval_slice = "all", eval_out;
  std::vector<int32_t> eval_k = kDefaultCutoffs;
  eval_cmd->add_option("--ckpt", eval_ckpt, "Checkpoint")->required();
  eval_cmd->add_option("--mode", eval_mode, "universal|targeted")
      ->check(CLI::IsMember({"universal", "targeted"}));
  eval_cmd->add_option("--split", eval_split, "Dataset JSON holding the test rows")->required();
  eval_cmd->add_option("--k", eval_k, "Cutoffs")->delimiter(',');
  eval_cmd->add_option("--slice", eval_slice, "all|hot|cold")
      ->check(CLI::IsMember({"all", "hot", "cold"}));
  eval_cmd->add_option("--out", eval_out, "Report path (default stdout)");

  // export
  auto* export_cmd = app.add_subcommand("export", "Export user or item embeddings");
  std::string export_ckpt, export_kind, export_out, export_dataset, export_exclusions;
  std::string export_timestamp = "1970-01-01T00:00:00Z";
  bool export_append = false;
  export_cmd->add_option("--ckpt", export_ckpt, "Checkpoint")->required();
  export_cmd->add_option("--kind", export_kind, "user|item")
      ->required()
      ->check(CLI::IsMember({"user", "item"}));
  export_cmd->add_option("--out", export_out, "Store path")->required();
  export_cmd->add_flag("--append", export_append, "Append new items to an existing item store");
  export_cmd->add_option("--dataset", export_dataset, "Dataset JSON (user export)");
  export_cmd->add_option("--exclusions-out", export_exclusions,
                         "Also write per-user history/exclusions JSON (user export)");
  export_cmd->add_option("--timestamp", export_timestamp, "Build timestamp recorded in the store");

  // index
  auto* index_cmd = app.add_subcommand("index", "Build the cosine similarity index");
  std::string index_items, index_out;
  index_cmd->add_option("--items", index_items, "Item store")->required();
  index_cmd->add_option("--out", index_out, "Index path")->required();

  // serve
  auto* serve_cmd = app.add_subcommand("serve", "Serve recall over line-delimited JSON/TCP");
  std::string serve_addr = "127.0.0.1:7070", serve_users, serve_items, serve_index,
              serve_exclusions;
  serve_cmd->add_option("--addr", serve_addr, "HOST:PORT");
  serve_cmd->add_option("--users", serve_users, "User store")->required();
  serve_cmd->add_option("--items", serve_items, "Item store")->required();
  serve_cmd->add_option("--index", serve_index, "Index")->required();
  serve_cmd->add_option("--exclusions", serve_exclusions, "Exclusions JSON");

  // simulate-warmup
  auto* warm_cmd = app.add_subcommand("simulate-warmup", "Coverage ratio under periodic refresh");
  std::string warm_arrivals, warm_out;
  int64_t warm_refresh = 1, warm_days = 20, warm_initial = 500;
  double warm_fraction = 0.1;
  bool warm_generate = false;
  warm_cmd->add_option("--arrivals", warm_arrivals, "Arrivals JSONL")->required();
  warm_cmd->add_option("--refresh-every", warm_refresh, "Refresh period in days (0: never)");
  warm_cmd->add_flag("--generate", warm_generate, "Write a synthetic arrivals file first");
  warm_cmd->add_option("--days", warm_days, "Days to generate");
  warm_cmd->add_option("--initial-items", warm_initial, "Initial catalog size to generate");
  warm_cmd->add_option("--new-fraction", warm_fraction, "Daily arrival fraction to generate");
  warm_cmd->add_option("--out", warm_out, "CSV path (default stdout)");

  // gen-synthetic
  auto* gen_cmd = app.add_subcommand("gen-synthetic", "Write the synthetic evaluation dataset");
  std::string gen_out, gen_config;
  uint64_t gen_seed = 0;
  gen_cmd->add_option("--seed", gen_seed, "Seed");
  gen_cmd->add_option("--config", gen_config, "Synthetic parameters JSON");
  gen_cmd->add_option("--out", gen_out, "Output directory")->required();

  // pipeline
  auto* pipe_cmd = app.add_subcommand("pipeline", "Run pipeline stages from a config");
  std::string pipe_config;
  std::vector<std::string> pipe_stages;
  pipe_cmd->add_option("--config", pipe_config, "Pipeline config JSON")->required();
  pipe_cmd->add_option("--stages", pipe_stages, "Stages (default: all)")->delimiter(',');

  // validate-config
  auto* validate_cmd = app.add_subcommand("validate-config", "Check and normalise a config");
  std::string validate_path;
  validate_cmd->add_option("--config", validate_path, "Pipeline config JSON")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*ingest_cmd) {
      Dataset dataset = ingest(ingest_interactions, ingest_catalog, to_filter(ingest_scenes),
                               to_filter(ingest_actions), ingest_target, ingest_min_vocab);
      save_dataset(dataset, ingest_out);
      std::cerr << "users " << dataset.split.train.sequences.size() << ", test rows "
                << dataset.split.test.size() << ", filtered " << dataset.filtered_out << "\n";
    } else if (*tu_cmd) {
      const PipelineConfig config = load_config(tu_config);
      const auto paths = pipeline_paths(config);
      const Dataset dataset = load_dataset(tu_dataset.empty() ? paths.dataset : fs::path(tu_dataset));
      run_universal_training(dataset, config, tu_out.empty() ? paths.universal_dir : fs::path(tu_out),
                             &std::cerr);
    } else if (*tt_cmd) {
      const PipelineConfig config = load_config(tt_config);
      const auto paths = pipeline_paths(config);
      const Dataset dataset = load_dataset(tt_dataset.empty() ? paths.dataset : fs::path(tt_dataset));
      run_targeted_training(dataset, config, tt_universal,
                            tt_out.empty() ? paths.targeted_dir : fs::path(tt_out), &std::cerr);
    } else if (*eval_cmd) {
      const Checkpoint checkpoint = load_checkpoint(eval_ckpt);
      const Dataset dataset = load_dataset(eval_split);
      const PopularityPartition partition = popularity_partition(dataset.split.train);
      EvalReport report = evaluate(checkpoint.model, parse_phase(eval_mode), dataset.split.test,
                                   eval_k, eval_slice == "all" ? nullptr : &partition, eval_mode);
      for (auto it = report.slices.begin(); it != report.slices.end();) {
        it = it->first == eval_slice ? std::next(it) : report.slices.erase(it);
      }
      json doc = to_json(report);
      doc["checkpoint"] = checkpoint.id();
      emit(doc.dump(2) + "\n", eval_out);
    } else if (*export_cmd) {
      const Checkpoint checkpoint = load_checkpoint(export_ckpt);
      if (parse_embedding_kind(export_kind) == EmbeddingKind::kItem) {
        std::optional<EmbeddingStore> existing;
        if (export_append && fs::exists(export_out)) existing = load_store(export_out);
        const EmbeddingStore store = export_item_embeddings(
            checkpoint.model, export_timestamp, checkpoint.id(), existing ? &*existing : nullptr);
        save_store(store, export_out);
        std::cerr << "items " << store.size() << "\n";
      } else {
        require(!export_dataset.empty(), ErrorKind::kInvalidArgument,
                "user export needs --dataset");
        require(!export_append, ErrorKind::kInvalidArgument, "--append applies to item export");
        const Dataset dataset = load_dataset(export_dataset);
        const EmbeddingStore store = export_user_embeddings(checkpoint.model, dataset.target_train,
                                                            export_timestamp, checkpoint.id());
        save_store(store, export_out);
        if (!export_exclusions.empty()) {
          save_exclusions(exclusions_from_corpus(dataset.target_train), export_exclusions);
        }
        std::cerr << "users " << store.size() << "\n";
      }
    } else if (*index_cmd) {
      const SimilarityIndex index = SimilarityIndex::build(load_store(index_items));
      index.save(index_out);
      std::cerr << "indexed " << index.size() << " items\n";
    } else if (*serve_cmd) {
      Exclusions exclusions;
      if (!serve_exclusions.empty()) exclusions = load_exclusions(serve_exclusions);
      auto service = std::make_shared<const RecallService>(
          load_store(serve_users), load_store(serve_items), SimilarityIndex::load(serve_index),
          std::move(exclusions));
      RecallServer server(service);
      const auto [host, port] = parse_address(serve_addr);
      server.listen(host, port);
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::cerr << "listening on " << host << ":" << server.port() << "\n";
      server.start();
      while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
      server.stop();
    } else if (*warm_cmd) {
      if (warm_generate) {
        save_arrivals(synthetic_arrivals(warm_days, warm_initial, warm_fraction), warm_arrivals);
      }
      const auto series = simulate_warmup(load_arrivals(warm_arrivals), warm_refresh);
      std::ostringstream csv;
      csv << "day,ratio\n";
      for (std::size_t d = 0; d < series.size(); ++d) {
        csv << d + 1 << ",";
        if (series[d]) csv << *series[d];
        csv << "\n";
      }
      emit(csv.str(), warm_out);
    } else if (*gen_cmd) {
      SyntheticConfig config;
      if (!gen_config.empty()) {
        std::ifstream in(gen_config);
        require(in.good(), ErrorKind::kIo, "cannot open " + gen_config);
        config = synthetic_config_from_json(json::parse(in));
      }
      config.seed = gen_seed;
      const SyntheticData data = generate_synthetic(config);
      write_synthetic(data, gen_out);
      std::cerr << "wrote " << data.catalog.size() << " items, " << data.corpus.sequences.size()
                << " users to " << gen_out << "\n";
    } else if (*pipe_cmd) {
      const PipelineConfig config = load_config(pipe_config);
      std::vector<Stage> stages;
      for (const auto& name : pipe_stages) stages.push_back(parse_stage(name));
      if (stages.empty()) {
        stages = all_stages();
        if (!config.synthetic) stages.erase(stages.begin());
      }
      run_pipeline(config, stages, &std::cerr);
    } else if (*validate_cmd) {
      const ConfigCheck check = validate_config_file(validate_path);
      if (!check.config) {
        for (const auto& v : check.violations) std::cerr << "violation: " << v << "\n";
        return 2;
      }
      std::cout << to_json(*check.config).dump(2) << "\n";
    }
  } catch (const Error& e) {
    std::cerr << "error (" << to_string(e.kind()) << "): " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

#include "fusionrec/universal.hpp"

#include <cmath>
#include <iostream>

#include "fusionrec/error.hpp"

namespace fusionrec {

using nlohmann::json;

json to_json(const UniversalConfig& config) {
  return {{"batch_size", config.batch_size}, {"negatives", config.negatives},
          {"lr", config.lr},                 {"epochs", config.epochs},
          {"max_steps", config.max_steps},   {"seed", config.seed},
          {"log_every", config.log_every}};
}

UniversalConfig universal_config_from_json(const json& doc) {
  UniversalConfig config;
  config.batch_size = doc.value("batch_size", config.batch_size);
  config.negatives = doc.value("negatives", config.negatives);
  config.lr = doc.value("lr", config.lr);
  config.epochs = doc.value("epochs", config.epochs);
  config.max_steps = doc.value("max_steps", config.max_steps);
  config.seed = doc.value("seed", config.seed);
  config.log_every = doc.value("log_every", config.log_every);
  return config;
}

UniversalResult train_universal(const SequenceCorpus& train, const ItemCatalog& catalog,
                                const ModelDims& dims, const UniversalConfig& config,
                                const TensorContainer* token_init, const CheckpointSink& sink,
                                const json& extra_meta) {
  require(config.negatives >= 1, ErrorKind::kConfig, "universal.negatives must be >= 1");
  UniversalResult result;
  Checkpoint& state = result.final;
  state.model = init_model(catalog, dims, Phase::kUniversal, config.seed, token_init);
  state.meta = extra_meta.is_object() ? extra_meta : json::object();
  state.meta["seed"] = config.seed;
  state.meta["step"] = 0;
  state.meta["epoch"] = 0;

  BatchStream stream(train, catalog, {dims.stack.max_len, config.batch_size, config.negatives},
                     config.seed);
  const int64_t per_epoch = stream.batches_per_epoch();
  const int64_t total = config.max_steps > 0
                            ? config.max_steps
                            : static_cast<int64_t>(config.epochs) * per_epoch;
  for (int64_t step = 0; step < total; ++step) {
    const Batch batch = stream.next();
    ad::Tape<float> tape;
    ParamBinder<float> bind(tape, state.model.params);
    const ad::Var loss = universal_batch_loss<float>(bind, dims, state.model.catalog, batch);
    const double value = tape.value(loss)(0, 0);
    if (!std::isfinite(value)) {
      fail(ErrorKind::kDiverged, "universal training diverged at step " + std::to_string(step));
    }
    tape.backward(loss);
    try {
      adam_step(state.model.params, bind.gradients(), state.optimizer, config.lr);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::kNonFinite) throw;
      fail(ErrorKind::kDiverged,
           "universal training diverged at step " + std::to_string(step) + ": " + e.what());
    }
    for (const auto& [name, value_m] : state.model.params) {
      if (!value_m.allFinite()) {
        fail(ErrorKind::kDiverged, "universal training diverged at step " +
                                       std::to_string(step) + ": tensor '" + name +
                                       "' is non-finite");
      }
    }
    result.losses.push_back(value);
    if (config.log_every > 0 && (step + 1) % config.log_every == 0) {
      std::clog << "[universal] step " << step + 1 << "/" << total << " loss " << value << "\n";
    }
    state.meta["step"] = step + 1;
    state.meta["epoch"] = (step + 1) / per_epoch;
    const bool epoch_end = (step + 1) % per_epoch == 0;
    if (sink && (epoch_end || step + 1 == total)) sink(state);
  }
  if (total == 0 && sink) sink(state);
  return result;
}

}  // namespace fusionrec

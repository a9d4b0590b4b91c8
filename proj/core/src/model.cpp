#include "fusionrec/model.hpp"

#include <algorithm>

#include "fusionrec/error.hpp"
#include "fusionrec/random.hpp"

namespace fusionrec {

using nlohmann::json;

std::string to_string(FusionVariant variant) {
  switch (variant) {
    case FusionVariant::kFull: return "full";
    case FusionVariant::kPool: return "pool";
    case FusionVariant::kLlmOnly: return "llm_only";
    case FusionVariant::kIdOnly: return "id_only";
  }
  return "full";
}

FusionVariant parse_fusion_variant(const std::string& name) {
  std::string lower = name;
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  if (lower == "full") return FusionVariant::kFull;
  if (lower == "pool") return FusionVariant::kPool;
  if (lower == "llm_only") return FusionVariant::kLlmOnly;
  if (lower == "id_only") return FusionVariant::kIdOnly;
  fail(ErrorKind::kConfig, "unknown fusion variant '" + name + "'");
}

std::string to_string(Phase phase) {
  return phase == Phase::kUniversal ? "universal" : "targeted";
}

Phase parse_phase(const std::string& name) {
  if (name == "universal") return Phase::kUniversal;
  if (name == "targeted") return Phase::kTargeted;
  fail(ErrorKind::kConfig, "unknown phase '" + name + "'");
}

bool names::is_head(const std::string& name) { return name.rfind("head.", 0) == 0; }

json to_json(const ModelDims& dims) {
  return {{"d_id", dims.fusion.d_id},
          {"d_sem", dims.fusion.d_sem},
          {"experts", dims.fusion.experts},
          {"active_experts", dims.fusion.active_experts},
          {"variant", to_string(dims.fusion.variant)},
          {"layers", dims.stack.layers},
          {"heads", dims.stack.heads},
          {"d_ff", dims.stack.ff_width(dims.d_model())},
          {"max_len", dims.stack.max_len}};
}

ModelDims model_dims_from_json(const json& doc) {
  ModelDims dims;
  dims.fusion.d_id = doc.value("d_id", dims.fusion.d_id);
  dims.fusion.d_sem = doc.value("d_sem", dims.fusion.d_sem);
  dims.fusion.experts = doc.value("experts", dims.fusion.experts);
  dims.fusion.active_experts = doc.value("active_experts", dims.fusion.active_experts);
  dims.fusion.variant = parse_fusion_variant(doc.value("variant", std::string("full")));
  dims.stack.layers = doc.value("layers", dims.stack.layers);
  dims.stack.heads = doc.value("heads", dims.stack.heads);
  dims.stack.d_ff = doc.value("d_ff", dims.stack.d_ff);
  dims.stack.max_len = doc.value("max_len", dims.stack.max_len);
  return dims;
}

std::vector<std::string> validate_dims(const ModelDims& dims) {
  std::vector<std::string> errors;
  if (dims.fusion.d_id < 1) errors.push_back("model.d_id must be >= 1");
  if (dims.fusion.d_sem < 1) errors.push_back("model.d_sem must be >= 1");
  if (dims.fusion.experts < 1) errors.push_back("model.experts must be >= 1");
  if (dims.fusion.active_experts < 1 || dims.fusion.active_experts > dims.fusion.experts) {
    errors.push_back("model.active_experts must satisfy 1 <= k <= K (k=" +
                     std::to_string(dims.fusion.active_experts) +
                     ", K=" + std::to_string(dims.fusion.experts) + ")");
  }
  if (dims.stack.layers < 0) errors.push_back("model.layers must be >= 0");
  if (dims.stack.heads < 1) {
    errors.push_back("model.heads must be >= 1");
  } else if (dims.d_model() % dims.stack.heads != 0) {
    errors.push_back("d_model (" + std::to_string(dims.d_model()) +
                     ") must be divisible by model.heads (" + std::to_string(dims.stack.heads) +
                     ")");
  }
  if (dims.stack.d_ff < 0) errors.push_back("model.d_ff must be >= 0");
  if (dims.stack.max_len < 1) errors.push_back("model.max_len must be >= 1");
  return errors;
}

namespace {

Matrix<float> normal_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols,
                            double stddev = kInitStddev) {
  NormalSampler normal(0.0, stddev);
  Matrix<float> out(rows, cols);
  for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] = static_cast<float>(normal(rng));
  return out;
}

}  // namespace

ParamSet<float> init_fusion(const ItemCatalog& catalog, const FusionDims& dims, uint64_t seed,
                            const TensorContainer* token_init) {
  auto rng = make_stream(seed, "init");
  const auto items = static_cast<Eigen::Index>(catalog.size()) + 1;
  const auto vocab = std::max<Eigen::Index>(catalog.vocab_size(), 1);
  ParamSet<float> params;
  Matrix<float> id_table = normal_matrix(rng, items, dims.d_id);
  id_table.row(kPaddingItem).setZero();
  params.emplace(names::kIdTable, std::move(id_table));

  Matrix<float> tokens = normal_matrix(rng, vocab, dims.d_sem);
  if (token_init != nullptr) {
    const TensorEntry& entry = token_init->at(kTokenEmbeddingsTensor);
    if (entry.shape != std::vector<int64_t>{catalog.vocab_size(), dims.d_sem}) {
      std::string got;
      for (auto d : entry.shape) got += (got.empty() ? "" : ",") + std::to_string(d);
      fail(ErrorKind::kShapeMismatch, "token_embeddings has shape [" + got + "], expected [" +
                                          std::to_string(catalog.vocab_size()) + "," +
                                          std::to_string(dims.d_sem) + "]");
    }
    const auto values = entry.values<float>();
    tokens = Eigen::Map<const Matrix<float>>(values.data(), catalog.vocab_size(), dims.d_sem);
  }
  params.emplace(names::kTokenTable, std::move(tokens));
  params.emplace(names::kExpertQuery, normal_matrix(rng, dims.experts, dims.d_sem));
  params.emplace(names::kExpertValue,
                 normal_matrix(rng, static_cast<Eigen::Index>(dims.experts) * dims.d_sem,
                               dims.d_sem));
  params.emplace(names::kGate, normal_matrix(rng, dims.d_sem, dims.experts));
  return params;
}

void init_stack(ParamSet<float>& params, const StackDims& dims, int32_t d_model, uint64_t seed) {
  auto rng = make_stream(seed, "init-stack");
  const int32_t d_ff = dims.ff_width(d_model);
  params[names::kPositions] = normal_matrix(rng, dims.max_len, d_model);
  for (int32_t l = 0; l < dims.layers; ++l) {
    auto ones = [&] { return Matrix<float>::Ones(1, d_model); };
    auto zeros = [](Eigen::Index cols) { return Matrix<float>::Zero(1, cols); };
    params[names::layer(l, "ln1.gain")] = ones();
    params[names::layer(l, "ln1.bias")] = zeros(d_model);
    params[names::layer(l, "ln2.gain")] = ones();
    params[names::layer(l, "ln2.bias")] = zeros(d_model);
    for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"}) {
      params[names::layer(l, w)] = normal_matrix(rng, d_model, d_model);
    }
    for (const char* b : {"attn.bq", "attn.bk", "attn.bv", "attn.bo"}) {
      params[names::layer(l, b)] = zeros(d_model);
    }
    params[names::layer(l, "ffn.w1")] = normal_matrix(rng, d_model, d_ff);
    params[names::layer(l, "ffn.b1")] = zeros(d_ff);
    params[names::layer(l, "ffn.w2")] = normal_matrix(rng, d_ff, d_model);
    params[names::layer(l, "ffn.b2")] = zeros(d_model);
  }
}

void init_head(ParamSet<float>& params, const StackDims& dims, int32_t d_model, uint64_t seed) {
  auto rng = make_stream(seed, "head-init");
  params[names::kHeadW1] =
      normal_matrix(rng, static_cast<Eigen::Index>(dims.max_len) * d_model, d_model);
  params[names::kHeadB1] = Matrix<float>::Zero(1, d_model);
  params[names::kHeadW2] = normal_matrix(rng, d_model, d_model);
  params[names::kHeadB2] = Matrix<float>::Zero(1, d_model);
}

Model<float> init_model(const ItemCatalog& catalog, const ModelDims& dims, Phase phase,
                        uint64_t seed, const TensorContainer* token_init) {
  const auto errors = validate_dims(dims);
  if (!errors.empty()) fail(ErrorKind::kConfig, errors.front());
  Model<float> model;
  model.phase = phase;
  model.dims = dims;
  model.catalog = catalog;
  model.catalog.reset_popularity();
  model.params = init_fusion(catalog, dims.fusion, seed, token_init);
  init_stack(model.params, dims.stack, dims.d_model(), seed);
  if (phase == Phase::kTargeted) init_head(model.params, dims.stack, dims.d_model(), seed);
  return model;
}

namespace {

const std::string kMomentPrefix1 = "adam.m/";
const std::string kMomentPrefix2 = "adam.v/";

TensorEntry to_entry(const std::string& name, const Matrix<float>& m) {
  return TensorEntry::from_values<float>(name, {m.rows(), m.cols()},
                                         std::span<const float>(m.data(), m.size()));
}

Matrix<float> from_entry(const TensorEntry& entry) {
  require(entry.shape.size() == 2, ErrorKind::kShapeMismatch,
          "tensor '" + entry.name + "' is not a matrix");
  const auto values = entry.values<float>();
  return Eigen::Map<const Matrix<float>>(values.data(), entry.shape[0], entry.shape[1]);
}

json catalog_to_json(const ItemCatalog& catalog) {
  json tokens = json::array();
  for (int32_t i = 1; i <= static_cast<int32_t>(catalog.size()); ++i) {
    const auto t = catalog.tokens(i);
    tokens.push_back(std::vector<int32_t>(t.begin(), t.end()));
  }
  return {{"items", catalog.ids()}, {"tokens", tokens}, {"vocab_size", catalog.vocab_size()}};
}

ItemCatalog catalog_from_json(const json& doc) {
  ItemCatalog catalog;
  const auto& items = doc.at("items");
  const auto& tokens = doc.at("tokens");
  for (std::size_t i = 0; i < items.size(); ++i) {
    catalog.add(items[i].get<std::string>(), tokens[i].get<std::vector<int32_t>>());
  }
  catalog.set_vocab_size(std::max(catalog.vocab_size(), doc.at("vocab_size").get<int32_t>()));
  return catalog;
}

}  // namespace

TensorContainer to_container(Checkpoint& checkpoint) {
  TensorContainer container;
  for (const auto& [name, value] : checkpoint.model.params) container.add(to_entry(name, value));
  for (const auto& [name, value] : checkpoint.optimizer.first_moment) {
    container.add(to_entry(kMomentPrefix1 + name, value));
  }
  for (const auto& [name, value] : checkpoint.optimizer.second_moment) {
    container.add(to_entry(kMomentPrefix2 + name, value));
  }
  json meta = checkpoint.meta;
  meta.erase("id");
  meta["phase"] = to_string(checkpoint.model.phase);
  meta["dims"] = to_json(checkpoint.model.dims);
  meta["catalog"] = catalog_to_json(checkpoint.model.catalog);
  meta["adam_steps"] = checkpoint.optimizer.steps;
  container.meta = meta;
  const auto bytes = serialize_container(container);
  const std::string id = hex64(fnv1a64(
      std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size())));
  container.meta["id"] = id;
  checkpoint.meta["id"] = id;
  return container;
}

Checkpoint checkpoint_from_container(const TensorContainer& container) {
  Checkpoint checkpoint;
  const json& meta = container.meta;
  try {
    checkpoint.model.phase = parse_phase(meta.at("phase").get<std::string>());
    checkpoint.model.dims = model_dims_from_json(meta.at("dims"));
    checkpoint.model.catalog = catalog_from_json(meta.at("catalog"));
    checkpoint.optimizer.steps = meta.value("adam_steps", std::map<std::string, int64_t>{});
  } catch (const json::exception& e) {
    fail(ErrorKind::kParse, std::string("checkpoint manifest incomplete: ") + e.what());
  }
  for (const auto& entry : container.entries) {
    if (entry.name.rfind(kMomentPrefix1, 0) == 0) {
      checkpoint.optimizer.first_moment.emplace(entry.name.substr(kMomentPrefix1.size()),
                                                from_entry(entry));
    } else if (entry.name.rfind(kMomentPrefix2, 0) == 0) {
      checkpoint.optimizer.second_moment.emplace(entry.name.substr(kMomentPrefix2.size()),
                                                 from_entry(entry));
    } else {
      checkpoint.model.params.emplace(entry.name, from_entry(entry));
    }
  }
  checkpoint.meta = meta;
  checkpoint.meta.erase("dims");
  checkpoint.meta.erase("catalog");
  checkpoint.meta.erase("adam_steps");
  return checkpoint;
}

void save_checkpoint(Checkpoint& checkpoint, const std::filesystem::path& path) {
  write_container(to_container(checkpoint), path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return checkpoint_from_container(read_container(path));
}

std::optional<std::filesystem::path> latest_checkpoint(const std::filesystem::path& dir,
                                                       Phase phase) {
  std::optional<std::filesystem::path> best;
  int64_t best_step = -1;
  if (!std::filesystem::is_directory(dir)) return best;
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".ptns") {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());
  for (const auto& path : files) {
    json manifest;
    try {
      manifest = read_manifest(path);
    } catch (const Error&) {
      continue;
    }
    const json meta = manifest.value("meta", json::object());
    if (meta.value("phase", std::string()) != to_string(phase)) continue;
    const int64_t step = meta.value("step", int64_t{0});
    if (step > best_step) {
      best_step = step;
      best = path;
    }
  }
  return best;
}

}  // namespace fusionrec

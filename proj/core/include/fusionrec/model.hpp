#pragma once

#include <cstdint>
#include <numeric>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "fusionrec/data.hpp"
#include "fusionrec/fusion.hpp"
#include "fusionrec/params.hpp"
#include "fusionrec/tensor_store.hpp"
#include "fusionrec/transformer.hpp"
#include "json.hpp"

namespace fusionrec {

enum class Phase { kUniversal, kTargeted };

std::string to_string(Phase phase);
Phase parse_phase(const std::string& name);

struct ModelDims {
  FusionDims fusion;
  StackDims stack;

  int32_t d_model() const { return fusion.d_model(); }
};

nlohmann::json to_json(const ModelDims& dims);
ModelDims model_dims_from_json(const nlohmann::json& doc);

// Violations of the structural constraints; empty when valid.
std::vector<std::string> validate_dims(const ModelDims& dims);

inline constexpr double kInitStddev = 0.02;
inline const std::string kTokenEmbeddingsTensor = "token_embeddings";

namespace names {
inline const std::string kHeadW1 = "head.w1";  // [max_len * d_model, d_model]
inline const std::string kHeadB1 = "head.b1";
inline const std::string kHeadW2 = "head.w2";  // [d_model, d_model]
inline const std::string kHeadB2 = "head.b2";

bool is_head(const std::string& name);
}  // namespace names

template <class T>
struct Model {
  Phase phase = Phase::kUniversal;
  ModelDims dims;
  ItemCatalog catalog;
  ParamSet<T> params;

  bool has_head() const { return params.count(names::kHeadW1) != 0; }
};

// Fusion tables: token rows copied from `token_init` ("token_embeddings",
// shape [V, d_sem]) when given, otherwise N(0, 0.02^2) like every other
// fusion tensor. The padding ID row is zero.
ParamSet<float> init_fusion(const ItemCatalog& catalog, const FusionDims& dims, uint64_t seed,
                            const TensorContainer* token_init = nullptr);

void init_stack(ParamSet<float>& params, const StackDims& dims, int32_t d_model, uint64_t seed);
void init_head(ParamSet<float>& params, const StackDims& dims, int32_t d_model, uint64_t seed);

Model<float> init_model(const ItemCatalog& catalog, const ModelDims& dims, Phase phase,
                        uint64_t seed, const TensorContainer* token_init = nullptr);

template <class To, class From>
Model<To> cast_model(const Model<From>& model) {
  return Model<To>{model.phase, model.dims, model.catalog, cast_params<To>(model.params)};
}

struct Checkpoint {
  Model<float> model;
  AdamState<float> optimizer;
  // phase, step, epoch, seed, parent, config_hash, id
  nlohmann::json meta = nlohmann::json::object();

  std::string id() const { return meta.value("id", std::string()); }
  int64_t step() const { return meta.value("step", int64_t{0}); }
};

// Serializes parameters, optimizer moments, dims and catalog; assigns the
// content-derived checkpoint id into meta["id"].
TensorContainer to_container(Checkpoint& checkpoint);
Checkpoint checkpoint_from_container(const TensorContainer& container);

void save_checkpoint(Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Newest (highest step) checkpoint of the given phase in `dir`.
std::optional<std::filesystem::path> latest_checkpoint(const std::filesystem::path& dir,
                                                       Phase phase);

// Unique items of a batch fused once; positions gather from the table.
template <class T>
struct FusedTable {
  ad::Var table;
  std::vector<int32_t> items;  // sorted unique item indices
  int32_t row(int32_t item) const {
    if (item == kPaddingItem) return -1;
    auto it = std::lower_bound(items.begin(), items.end(), item);
    return static_cast<int32_t>(it - items.begin());
  }
};

template <class T>
FusedTable<T> fuse_unique(ParamBinder<T>& bind, const ModelDims& dims,
                          const ItemCatalog& catalog, std::vector<int32_t> items) {
  std::sort(items.begin(), items.end());
  items.erase(std::unique(items.begin(), items.end()), items.end());
  items.erase(std::remove(items.begin(), items.end(), kPaddingItem), items.end());
  FusedTable<T> out;
  out.items = items;
  out.table = fuse_items<T>(bind, dims.fusion, catalog, std::move(items));
  return out;
}

// Stacked [rows * max_len, d_model] input embeddings for left-aligned,
// zero-padded item rows.
template <class T>
ad::Var gather_sequences(ad::Tape<T>& tape, const FusedTable<T>& fused,
                         std::span<const int32_t> items) {
  std::vector<int32_t> rows(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) rows[i] = fused.row(items[i]);
  return ad::gather_rows(tape, fused.table, std::move(rows));
}

// Runs the stack on one embedding matrix E [n, d_model] (n <= max_len) and
// returns every layer's rows [n, d_model]; element 0 is E plus positions.
template <class T>
std::vector<Matrix<T>> forward_sequence(const ParamSet<T>& params, const StackDims& dims,
                                        const Matrix<T>& embeddings, MaskMode mode,
                                        int32_t valid_len) {
  const auto n = static_cast<int32_t>(embeddings.rows());
  require(n <= dims.max_len, ErrorKind::kInvalidArgument,
          "sequence of length " + std::to_string(n) + " exceeds max_len " +
              std::to_string(dims.max_len));
  require(valid_len >= 1 && valid_len <= n, ErrorKind::kInvalidArgument,
          "valid_len must lie in [1, n]");
  ad::Tape<T> tape;
  auto bind = ParamBinder<T>::inference(tape, params);
  Matrix<T> padded = Matrix<T>::Zero(dims.max_len, embeddings.cols());
  padded.topRows(n) = embeddings;
  const int32_t lengths[] = {valid_len};
  const StackOutput out =
      stack_forward<T>(bind, dims, tape.constant(std::move(padded)), 1, lengths, mode);
  std::vector<Matrix<T>> layers;
  for (const ad::Var v : out.hidden) layers.push_back(tape.value(v).topRows(n));
  return layers;
}

// Fused embedding of every catalog item; row r is item index r + 1.
template <class T>
Matrix<T> item_embeddings(const Model<T>& model) {
  std::vector<int32_t> items(model.catalog.size());
  std::iota(items.begin(), items.end(), 1);
  if (items.empty()) return Matrix<T>(0, model.dims.d_model());
  ad::Tape<T> tape;
  auto bind = ParamBinder<T>::inference(tape, model.params);
  return tape.value(fuse_items<T>(bind, model.dims.fusion, model.catalog, std::move(items)));
}

}  // namespace fusionrec

#pragma once

// Targeted training: warm start from a universal checkpoint, bidirectional
// encoding of target-scene sequences, a concat+MLP user head and a BPR loss
// that contrasts each user against other in-batch users on the same item.

#include <functional>
#include <memory>
#include <set>
#include <vector>

#include "fusionrec/data.hpp"
#include "fusionrec/model.hpp"
#include "fusionrec/universal.hpp"

namespace fusionrec {

// Numerically stable log(1 + exp(x)).
template <class T>
T softplus(T x) {
  return x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <class T>
T sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

// Mean over contrasts of -log sigmoid(s_pos - s_contrast).
template <class T>
T bpr_loss(T positive_score, std::span<const T> contrast_scores) {
  require(!contrast_scores.empty(), ErrorKind::kInvalidArgument,
          "bpr_loss: at least one contrast score required");
  T total = 0;
  for (T s : contrast_scores) total += softplus(s - positive_score);
  return total / static_cast<T>(contrast_scores.size());
}

// users [B, d], targets [B, d] (embedding of row b's next item). Row b is
// contrasted with rows b+1..b+n_contrast (mod B); pairs whose target items
// coincide are skipped since both users interacted with that item.
template <class T>
ad::Var bpr_loss(ad::Tape<T>& tape, ad::Var users, ad::Var targets,
                 std::vector<int32_t> target_items, int32_t n_contrast) {
  const auto& U = tape.value(users);
  const auto& E = tape.value(targets);
  const auto rows = static_cast<int32_t>(U.rows());
  require(E.rows() == rows && E.cols() == U.cols(), ErrorKind::kShapeMismatch,
          "bpr_loss: users and targets differ in shape");
  require(static_cast<int32_t>(target_items.size()) == rows, ErrorKind::kShapeMismatch,
          "bpr_loss: one target item per row required");
  require(n_contrast >= 1 && n_contrast < rows, ErrorKind::kInvalidArgument,
          "bpr_loss: need 1 <= n_contrast < batch rows");
  struct Pair {
    int32_t row, other;
    T weight;  // sigmoid(s_contrast - s_pos)
  };
  std::vector<Pair> pairs;
  T total = 0;
  for (int32_t b = 0; b < rows; ++b) {
    const T positive = U.row(b).dot(E.row(b));
    for (int32_t c = 1; c <= n_contrast; ++c) {
      const int32_t other = (b + c) % rows;
      if (target_items[other] == target_items[b]) continue;
      const T gap = U.row(other).dot(E.row(b)) - positive;
      total += softplus(gap);
      pairs.push_back({b, other, sigmoid(gap)});
    }
  }
  Matrix<T> out = Matrix<T>::Zero(1, 1);
  if (!pairs.empty()) out(0, 0) = total / static_cast<T>(pairs.size());
  const T inv_count = pairs.empty() ? T(0) : T(1) / static_cast<T>(pairs.size());
  return tape.push(std::move(out), tape.any_requires_grad({users, targets}),
                   [=, pairs = std::move(pairs)](ad::Tape<T>& t, const Matrix<T>& g) {
                     const auto& U = t.value(users);
                     const auto& E = t.value(targets);
                     const bool need_u = t.requires_grad(users);
                     const bool need_e = t.requires_grad(targets);
                     for (const Pair& p : pairs) {
                       const T w = g(0, 0) * inv_count * p.weight;
                       if (need_u) {
                         t.grad_ref(users).row(p.row) -= w * E.row(p.row);
                         t.grad_ref(users).row(p.other) += w * E.row(p.row);
                       }
                       if (need_e) {
                         t.grad_ref(targets).row(p.row) += w * (U.row(p.other) - U.row(p.row));
                       }
                     }
                   });
}

// Bidirectional stack, padded rows zeroed, rows concatenated, then
// GELU MLP head: [rows, d_model].
template <class T>
ad::Var targeted_users(ParamBinder<T>& bind, const ModelDims& dims, const FusedTable<T>& fused,
                       const std::vector<int32_t>& items, const std::vector<int32_t>& lengths) {
  auto& tape = bind.tape();
  const int32_t n = dims.stack.max_len;
  const auto rows = static_cast<int32_t>(lengths.size());
  const ad::Var input = gather_sequences<T>(tape, fused, items);
  const StackOutput out = stack_forward<T>(bind, dims.stack, input, rows, lengths, MaskMode::kNone);
  std::vector<uint8_t> keep(items.size());
  for (int32_t r = 0; r < rows; ++r) {
    for (int32_t t = 0; t < n; ++t) keep[r * n + t] = t < lengths[r];
  }
  const ad::Var masked = ad::mask_rows(tape, out.last(), std::move(keep));
  const ad::Var flat = ad::reshape(tape, masked, rows, static_cast<Eigen::Index>(n) * dims.d_model());
  const ad::Var hidden =
      ad::gelu(tape, ad::linear(tape, flat, bind(names::kHeadW1), bind(names::kHeadB1)));
  return ad::linear(tape, hidden, bind(names::kHeadW2), bind(names::kHeadB2));
}

// Target-scene training rows: inputs left-aligned in [rows, max_len].
struct TargetBatch {
  int32_t rows = 0;
  int32_t max_len = 0;
  std::vector<std::string> users;
  std::vector<int32_t> items;
  std::vector<int32_t> lengths;
  std::vector<int32_t> targets;
};

template <class T>
ad::Var targeted_batch_loss(ParamBinder<T>& bind, const ModelDims& dims,
                            const ItemCatalog& catalog, const TargetBatch& batch,
                            int32_t n_contrast) {
  require(batch.max_len == dims.stack.max_len, ErrorKind::kShapeMismatch,
          "batch max_len differs from the model's");
  std::vector<int32_t> items = batch.items;
  items.insert(items.end(), batch.targets.begin(), batch.targets.end());
  const FusedTable<T> fused = fuse_unique<T>(bind, dims, catalog, std::move(items));
  auto& tape = bind.tape();
  const ad::Var users = targeted_users<T>(bind, dims, fused, batch.items, batch.lengths);
  std::vector<int32_t> target_rows(batch.targets.size());
  for (std::size_t i = 0; i < target_rows.size(); ++i) target_rows[i] = fused.row(batch.targets[i]);
  const ad::Var targets = ad::gather_rows(tape, fused.table, std::move(target_rows));
  return bpr_loss<T>(tape, users, targets, batch.targets, n_contrast);
}

// User vectors from the most recent max_len items of each sequence.
template <class T>
Matrix<T> targeted_user_embeddings(const Model<T>& model,
                                   const std::vector<std::vector<int32_t>>& sequences) {
  require(model.has_head(), ErrorKind::kInvalidArgument, "model has no targeted head");
  const auto& dims = model.dims;
  const int32_t n = dims.stack.max_len;
  const auto rows = static_cast<int32_t>(sequences.size());
  if (rows == 0) return Matrix<T>(0, dims.d_model());
  std::vector<int32_t> items(static_cast<std::size_t>(rows) * n, kPaddingItem);
  std::vector<int32_t> lengths(rows);
  for (int32_t r = 0; r < rows; ++r) {
    const auto& seq = sequences[r];
    require(!seq.empty(), ErrorKind::kInvalidArgument, "user sequence is empty");
    const std::size_t keep = std::min<std::size_t>(seq.size(), n);
    std::copy(seq.end() - static_cast<std::ptrdiff_t>(keep), seq.end(),
              items.begin() + static_cast<std::ptrdiff_t>(r) * n);
    lengths[r] = static_cast<int32_t>(keep);
  }
  ad::Tape<T> tape;
  auto bind = ParamBinder<T>::inference(tape, model.params);
  const FusedTable<T> fused = fuse_unique<T>(bind, dims, model.catalog, items);
  return tape.value(targeted_users<T>(bind, dims, fused, items, lengths));
}

template <class T>
Vector<T> user_embedding_targeted(const Model<T>& model, const std::vector<int32_t>& sequence) {
  return targeted_user_embeddings<T>(model, {sequence}).row(0);
}

// Source of the newest universal checkpoint, polled at every refresh.
class UniversalCheckpointProvider {
 public:
  virtual ~UniversalCheckpointProvider() = default;
  virtual std::shared_ptr<const Checkpoint> latest() = 0;
};

class FixedCheckpointProvider : public UniversalCheckpointProvider {
 public:
  explicit FixedCheckpointProvider(std::shared_ptr<const Checkpoint> checkpoint)
      : checkpoint_(std::move(checkpoint)) {}
  std::shared_ptr<const Checkpoint> latest() override { return checkpoint_; }
  void set(std::shared_ptr<const Checkpoint> checkpoint) { checkpoint_ = std::move(checkpoint); }

 private:
  std::shared_ptr<const Checkpoint> checkpoint_;
};

// Reads the highest-step universal checkpoint in a directory; reloads only
// when that file changes.
class DirectoryCheckpointProvider : public UniversalCheckpointProvider {
 public:
  explicit DirectoryCheckpointProvider(std::filesystem::path dir) : dir_(std::move(dir)) {}
  std::shared_ptr<const Checkpoint> latest() override;

 private:
  std::filesystem::path dir_;
  std::filesystem::path loaded_path_;
  std::shared_ptr<const Checkpoint> cached_;
};

struct ScheduleConfig {
  int64_t total_steps = 1000;
  int64_t warmup_period = 0;          // 0 disables periodic refresh
  int64_t alternate_phase_a_steps = 0;  // token table frozen for these steps
  // When set, phase A instead ends once the windowed mean loss stops
  // improving by plateau_tolerance (relative), capped at
  // alternate_phase_a_steps when that is > 0.
  bool plateau_trigger = false;
  int64_t plateau_window = 50;
  double plateau_tolerance = 1e-3;
};

struct TargetedConfig {
  int32_t batch_size = 64;
  int32_t max_contrast = 63;
  double lr = 1e-3;
  uint64_t seed = 0;
  int64_t checkpoint_every = 0;  // 0: only the final checkpoint
  int64_t log_every = 0;
  ScheduleConfig schedule;
};

nlohmann::json to_json(const TargetedConfig& config);
TargetedConfig targeted_config_from_json(const nlohmann::json& doc);

// Copies every non-head tensor from `universal` into a fresh targeted model
// for `catalog`. ID rows are matched by item id and token rows by token id;
// rows the source does not cover keep their fresh initialisation. Any other
// shape difference is an error naming the tensor. meta["parent"] records the
// source checkpoint id.
Checkpoint warm_start(const Checkpoint& universal, const ItemCatalog& catalog,
                      const ModelDims& dims, uint64_t seed);

// Overwrites the shared tensors of `model` from `source` with the warm-start
// row mapping; head tensors are untouched.
void copy_shared(const Model<float>& source, Model<float>& model);

struct TargetedObserver {
  // After a refresh from the universal checkpoint, before the step's update.
  std::function<void(int64_t step, const Model<float>&, const Checkpoint& source)> on_refresh;
  // After step `step` (1-based) is applied.
  std::function<void(int64_t step, const Model<float>&, double loss)> on_step;
};

struct TargetedResult {
  Checkpoint final;
  std::vector<double> losses;
  int64_t refreshes = 0;
  int64_t phase_a_end = 0;  // first step at which the token table trained
};

// Samples `batch_size` users per step; each row takes a random target
// position and up to max_len preceding items. With a null provider the
// shared tensors start from a fresh initialisation (no warm start).
TargetedResult train_targeted(const SequenceCorpus& train, const ItemCatalog& catalog,
                              const ModelDims& dims, UniversalCheckpointProvider* provider,
                              const TargetedConfig& config, const CheckpointSink& sink = {},
                              const TargetedObserver& observer = {},
                              const nlohmann::json& extra_meta = nlohmann::json::object());

// Fraction of each day's exposed item occurrences whose item id is in the
// universal vocabulary; days without exposures yield nullopt.
std::vector<std::optional<double>> coverage_ratio(
    const std::set<std::string>& universal_vocab,
    const std::vector<std::vector<std::string>>& exposures_per_day);

// One simulated day of item publication and exposure. Day 0 is the initial
// catalog the first universal checkpoint covers; exposures start on day 1.
struct ArrivalDay {
  int64_t day = 0;
  std::vector<std::string> new_items;
  std::vector<std::string> exposed;
};

std::vector<ArrivalDay> load_arrivals(const std::filesystem::path& path);
void save_arrivals(const std::vector<ArrivalDay>& days, const std::filesystem::path& path);

// `days` exposure days after an initial catalog of `initial_items`; each day
// adds ceil(new_fraction * catalog size) items. An item of age a (days since
// arrival) is exposed max(1, round(peak * decay^a)) times that day.
std::vector<ArrivalDay> synthetic_arrivals(int64_t days, int64_t initial_items,
                                           double new_fraction, int64_t peak_exposures = 50,
                                           double decay = 0.7);

// Coverage series for exposure days 1..D. The targeted model warm-starts at
// the beginning of day 1; with refresh_every = r > 0 it re-pulls the
// universal checkpoint at days 1 + r, 1 + 2r, ...; a checkpoint pulled at
// the start of day R covers all items published before day R.
std::vector<std::optional<double>> simulate_warmup(const std::vector<ArrivalDay>& days,
                                                   int64_t refresh_every);

}  // namespace fusionrec

#pragma once

// Universal training: causal next-item prediction over all-scene sequences
// with a sampled-softmax cross-entropy against per-row negatives.

#include <functional>
#include <vector>

#include "fusionrec/data.hpp"
#include "fusionrec/model.hpp"

namespace fusionrec {

// Mean over valid positions of -log softmax(pos | pos, negs), where position
// t of row r predicts stacked row r*n+t+1. target_rows[r*n+t] is the table
// row of that next item, or -1 when position t does not predict anything.
// negative_rows is [rows, negatives] table rows shared by a row's positions.
template <class T>
ad::Var nip_loss(ad::Tape<T>& tape, ad::Var hidden, ad::Var table,
                 std::vector<int32_t> target_rows, std::vector<int32_t> negative_rows,
                 int32_t seq_len, int32_t negatives) {
  const auto& H = tape.value(hidden);
  const auto& E = tape.value(table);
  require(static_cast<Eigen::Index>(target_rows.size()) == H.rows() && H.rows() % seq_len == 0,
          ErrorKind::kShapeMismatch, "nip_loss: one target slot per hidden row required");
  const auto rows = static_cast<int32_t>(H.rows() / seq_len);
  require(static_cast<int32_t>(negative_rows.size()) == rows * negatives && negatives >= 1,
          ErrorKind::kShapeMismatch, "nip_loss: negatives must be [rows, n_neg]");

  int64_t valid = 0;
  for (int32_t r : target_rows) valid += r >= 0;
  require(valid > 0, ErrorKind::kInvalidArgument, "nip_loss: batch has no valid positions");

  // probs[p] holds softmax over (positive, negatives) for valid position p.
  Matrix<T> probs = Matrix<T>::Zero(H.rows(), negatives + 1);
  T total = 0;
  Vector<T> logits(negatives + 1);
  for (Eigen::Index p = 0; p < H.rows(); ++p) {
    if (target_rows[p] < 0) continue;
    const auto r = static_cast<int32_t>(p / seq_len);
    logits[0] = H.row(p).dot(E.row(target_rows[p]));
    for (int32_t j = 0; j < negatives; ++j) {
      logits[j + 1] = H.row(p).dot(E.row(negative_rows[r * negatives + j]));
    }
    const T top = logits.maxCoeff();
    const T log_norm = top + std::log((logits.array() - top).exp().sum());
    total += log_norm - logits[0];
    probs.row(p) = (logits.array() - log_norm).exp();
  }
  const T inv_count = T(1) / static_cast<T>(valid);
  Matrix<T> out(1, 1);
  out(0, 0) = total * inv_count;
  return tape.push(
      std::move(out), tape.any_requires_grad({hidden, table}),
      [=, probs = std::move(probs), target_rows = std::move(target_rows),
       negative_rows = std::move(negative_rows)](ad::Tape<T>& t, const Matrix<T>& g) {
        const auto& H = t.value(hidden);
        const auto& E = t.value(table);
        const bool need_h = t.requires_grad(hidden);
        const bool need_e = t.requires_grad(table);
        const T scale = g(0, 0) * inv_count;
        for (Eigen::Index p = 0; p < H.rows(); ++p) {
          if (target_rows[p] < 0) continue;
          const auto r = static_cast<int32_t>(p / seq_len);
          for (int32_t j = 0; j <= negatives; ++j) {
            const int32_t e_row = j == 0 ? target_rows[p] : negative_rows[r * negatives + j - 1];
            const T d_logit = scale * (probs(p, j) - (j == 0 ? T(1) : T(0)));
            if (need_h) t.grad_ref(hidden).row(p) += d_logit * E.row(e_row);
            if (need_e) t.grad_ref(table).row(e_row) += d_logit * H.row(p);
          }
        }
      });
}

// Single-sequence form: pos_emb row t is the embedding of item t+1, scored
// for t < valid_len - 1 against every row of neg_emb.
template <class T>
T nip_loss(const Matrix<T>& hidden, const Matrix<T>& pos_emb, const Matrix<T>& neg_emb,
           int32_t valid_len) {
  const auto n = static_cast<int32_t>(hidden.rows());
  require(pos_emb.rows() == n && pos_emb.cols() == hidden.cols() &&
              neg_emb.cols() == hidden.cols(),
          ErrorKind::kShapeMismatch, "nip_loss: embedding shapes differ");
  ad::Tape<T> tape;
  Matrix<T> table(n + neg_emb.rows(), hidden.cols());
  table << pos_emb, neg_emb;
  std::vector<int32_t> targets(n, -1);
  for (int32_t t = 0; t + 1 < valid_len && t < n; ++t) targets[t] = t;
  std::vector<int32_t> negatives(neg_emb.rows());
  for (int32_t j = 0; j < static_cast<int32_t>(negatives.size()); ++j) negatives[j] = n + j;
  const auto loss = nip_loss<T>(tape, tape.constant(hidden), tape.constant(std::move(table)),
                                std::move(targets), std::move(negatives), n,
                                static_cast<int32_t>(neg_emb.rows()));
  return tape.value(loss)(0, 0);
}

template <class T>
ad::Var universal_batch_loss(ParamBinder<T>& bind, const ModelDims& dims,
                             const ItemCatalog& catalog, const Batch& batch) {
  require(batch.max_len == dims.stack.max_len, ErrorKind::kShapeMismatch,
          "batch max_len differs from the model's");
  std::vector<int32_t> items = batch.items;
  items.insert(items.end(), batch.negatives.begin(), batch.negatives.end());
  const FusedTable<T> fused = fuse_unique<T>(bind, dims, catalog, std::move(items));
  auto& tape = bind.tape();
  const ad::Var input = gather_sequences<T>(tape, fused, batch.items);
  const StackOutput out =
      stack_forward<T>(bind, dims.stack, input, batch.rows, batch.lengths, MaskMode::kCausal);
  std::vector<int32_t> targets(batch.items.size(), -1);
  for (int32_t r = 0; r < batch.rows; ++r) {
    for (int32_t t = 0; t + 1 < batch.lengths[r]; ++t) {
      targets[r * batch.max_len + t] = fused.row(batch.item(r, t + 1));
    }
  }
  std::vector<int32_t> negatives(batch.negatives.size());
  for (std::size_t i = 0; i < negatives.size(); ++i) negatives[i] = fused.row(batch.negatives[i]);
  return nip_loss<T>(tape, out.last(), fused.table, std::move(targets), std::move(negatives),
                     batch.max_len, batch.negatives_per_row);
}

// Final-layer causal output at the last valid position of each sequence
// (most recent max_len items kept). Sequences must be non-empty.
template <class T>
Matrix<T> universal_user_embeddings(const Model<T>& model,
                                    const std::vector<std::vector<int32_t>>& sequences) {
  const auto& dims = model.dims;
  const int32_t n = dims.stack.max_len;
  const auto rows = static_cast<int32_t>(sequences.size());
  Matrix<T> out(rows, dims.d_model());
  if (rows == 0) return out;
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
  const ad::Var input = gather_sequences<T>(tape, fused, items);
  const StackOutput result =
      stack_forward<T>(bind, dims.stack, input, rows, lengths, MaskMode::kCausal);
  const auto& last = tape.value(result.last());
  for (int32_t r = 0; r < rows; ++r) out.row(r) = last.row(r * n + lengths[r] - 1);
  return out;
}

template <class T>
Vector<T> user_embedding_universal(const Model<T>& model, const std::vector<int32_t>& sequence) {
  return universal_user_embeddings<T>(model, {sequence}).row(0);
}

struct UniversalConfig {
  int32_t batch_size = 128;
  int32_t negatives = 64;
  double lr = 1e-3;
  int32_t epochs = 1;
  int64_t max_steps = 0;  // > 0 caps the run regardless of epochs
  uint64_t seed = 0;
  int64_t log_every = 0;
};

nlohmann::json to_json(const UniversalConfig& config);
UniversalConfig universal_config_from_json(const nlohmann::json& doc);

using CheckpointSink = std::function<void(Checkpoint&)>;

struct UniversalResult {
  Checkpoint final;
  std::vector<double> losses;
};

// One checkpoint per completed epoch goes to `sink` (plus the final state
// when the run ends mid-epoch). A non-finite loss or gradient aborts with
// kDiverged; checkpoints already emitted stay valid.
UniversalResult train_universal(const SequenceCorpus& train, const ItemCatalog& catalog,
                                const ModelDims& dims, const UniversalConfig& config,
                                const TensorContainer* token_init = nullptr,
                                const CheckpointSink& sink = {},
                                const nlohmann::json& extra_meta = nlohmann::json::object());

}  // namespace fusionrec

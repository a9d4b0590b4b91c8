#pragma once

// Item representation: a trainable ID row concatenated with a semantic vector
// pooled from the item's token embeddings by a sparsely gated mixture of
// attention-pooling experts.

#include <algorithm>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "fusionrec/autodiff.hpp"
#include "fusionrec/data.hpp"
#include "fusionrec/params.hpp"

namespace fusionrec {

enum class FusionVariant {
  kFull,     // ID row ⊕ gated expert mixture
  kPool,     // ID row ⊕ mean of token embeddings
  kLlmOnly,  // ID half zeroed
  kIdOnly,   // semantic half zeroed
};

std::string to_string(FusionVariant variant);
FusionVariant parse_fusion_variant(const std::string& name);

struct FusionDims {
  int32_t d_id = 64;
  int32_t d_sem = 64;
  int32_t experts = 4;
  int32_t active_experts = 2;
  FusionVariant variant = FusionVariant::kFull;

  int32_t d_model() const { return d_id + d_sem; }
};

namespace names {
inline const std::string kIdTable = "fusion.id_table";          // [|I|+1, d_id]
inline const std::string kTokenTable = "fusion.token_table";    // [V, d_sem]
inline const std::string kExpertQuery = "fusion.expert_query";  // [K, d_sem]
inline const std::string kExpertValue = "fusion.expert_value";  // [K*d_sem, d_sem]
inline const std::string kGate = "fusion.gate";                 // [d_sem, K]
}  // namespace names

template <class T>
Matrix<T> token_matrix(const Matrix<T>& token_table, std::span<const int32_t> tokens) {
  Matrix<T> out(static_cast<Eigen::Index>(tokens.size()), token_table.cols());
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    out.row(static_cast<Eigen::Index>(t)) = token_table.row(tokens[t]);
  }
  return out;
}

template <class T>
struct GateOutput {
  Vector<T> scores;               // [K]
  Vector<T> weights;              // [K], zero outside `selected`
  std::vector<int32_t> selected;  // ascending by rank (best first)
};

// Top-k of `scores` (ties to the lower index), softmax over the survivors.
template <class T>
GateOutput<T> gate_from_scores(const Vector<T>& scores, int32_t k) {
  const auto K = static_cast<int32_t>(scores.size());
  require(k >= 1 && k <= K, ErrorKind::kInvalidArgument, "gate: need 1 <= k <= K");
  std::vector<int32_t> order(K);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int32_t a, int32_t b) { return scores[a] > scores[b]; });
  GateOutput<T> out;
  out.scores = scores;
  out.selected.assign(order.begin(), order.begin() + k);
  out.weights = Vector<T>::Zero(K);
  const T top = scores[out.selected.front()];
  T total = 0;
  for (int32_t j : out.selected) {
    out.weights[j] = std::exp(scores[j] - top);
    total += out.weights[j];
  }
  for (int32_t j : out.selected) out.weights[j] /= total;
  return out;
}

// Scores come from the mean-pooled token rows projected by the gate matrix.
template <class T>
GateOutput<T> gate(const Matrix<T>& tokens, const Matrix<T>& gate_matrix, int32_t k) {
  require(tokens.rows() >= 1, ErrorKind::kInvalidArgument, "gate: item has no tokens");
  const Vector<T> pooled = tokens.colwise().mean();
  return gate_from_scores<T>(pooled * gate_matrix, k);
}

template <class T>
Vector<T> expert_weights(const Matrix<T>& tokens, const Vector<T>& query) {
  const T inv_scale = T(1) / std::sqrt(static_cast<T>(tokens.cols()));
  Vector<T> logits = (tokens * query.transpose()).transpose() * inv_scale;
  const T top = logits.maxCoeff();
  logits = (logits.array() - top).exp();
  return logits / logits.sum();
}

// One expert: softmax(tokens · q / sqrt(d)) weighted sum of token rows, then
// the value projection.
template <class T>
Vector<T> expert_attend(const Matrix<T>& tokens, const Vector<T>& query,
                        const Matrix<T>& value_projection) {
  require(tokens.rows() >= 1, ErrorKind::kInvalidArgument, "expert_attend: no tokens");
  const Vector<T> pooled = expert_weights<T>(tokens, query) * tokens;
  return pooled * value_projection;
}

template <class T>
Matrix<T> expert_value(const ParamSet<T>& params, int32_t expert, int32_t d_sem) {
  return params.at(names::kExpertValue).block(expert * d_sem, 0, d_sem, d_sem);
}

template <class T>
Vector<T> semantic_embedding(const ParamSet<T>& params, const FusionDims& dims,
                             const Matrix<T>& tokens) {
  if (tokens.rows() == 0) return Vector<T>::Zero(dims.d_sem);
  if (dims.variant == FusionVariant::kPool) return tokens.colwise().mean();
  const auto g = gate<T>(tokens, params.at(names::kGate), dims.active_experts);
  Vector<T> out = Vector<T>::Zero(dims.d_sem);
  for (int32_t j : g.selected) {
    out += g.weights[j] * expert_attend<T>(tokens, params.at(names::kExpertQuery).row(j),
                                           expert_value(params, j, dims.d_sem));
  }
  return out;
}

// e_i = ID(i) ⊕ MoE(tokens_i), with the variant masking one half.
template <class T>
Vector<T> fuse_item(const ParamSet<T>& params, const FusionDims& dims,
                    const ItemCatalog& catalog, int32_t item) {
  require(item >= 1 && item <= static_cast<int32_t>(catalog.size()), ErrorKind::kNotFound,
          "fuse_item: unknown item index " + std::to_string(item));
  Vector<T> out = Vector<T>::Zero(dims.d_model());
  if (dims.variant != FusionVariant::kLlmOnly) {
    out.head(dims.d_id) = params.at(names::kIdTable).row(item);
  }
  if (dims.variant != FusionVariant::kIdOnly) {
    out.tail(dims.d_sem) = semantic_embedding<T>(
        params, dims, token_matrix<T>(params.at(names::kTokenTable), catalog.tokens(item)));
  }
  return out;
}

// Row t is fuse_item(items[t]); padding rows are zero.
template <class T>
Matrix<T> embed_sequence(const ParamSet<T>& params, const FusionDims& dims,
                         const ItemCatalog& catalog, std::span<const int32_t> items) {
  Matrix<T> out = Matrix<T>::Zero(static_cast<Eigen::Index>(items.size()), dims.d_model());
  for (std::size_t t = 0; t < items.size(); ++t) {
    if (items[t] == kPaddingItem) continue;
    out.row(static_cast<Eigen::Index>(t)) = fuse_item<T>(params, dims, catalog, items[t]);
  }
  return out;
}

// Differentiable fused embeddings for `items` (internal indices), one row
// each: [items.size(), d_model].
template <class T>
ad::Var fuse_items(ParamBinder<T>& bind, const FusionDims& dims, const ItemCatalog& catalog,
                   std::vector<int32_t> items) {
  using ad::Var;
  auto& tape = bind.tape();
  const bool use_id = dims.variant != FusionVariant::kLlmOnly;
  const bool use_sem = dims.variant != FusionVariant::kIdOnly;
  const bool use_experts = use_sem && dims.variant != FusionVariant::kPool;
  const Var id_table = use_id ? bind(names::kIdTable) : Var{};
  const Var token_table = use_sem ? bind(names::kTokenTable) : Var{};
  const Var query = use_experts ? bind(names::kExpertQuery) : Var{};
  const Var value = use_experts ? bind(names::kExpertValue) : Var{};
  const Var gate_var = use_experts ? bind(names::kGate) : Var{};

  struct ExpertTrace {
    int32_t expert;
    Vector<T> attn;     // [m]
    Vector<T> context;  // [d_sem], attn · tokens
    Vector<T> output;   // [d_sem], context · P_j
  };
  struct ItemTrace {
    GateOutput<T> gate;
    std::vector<ExpertTrace> experts;
  };

  const int32_t d_id = dims.d_id;
  const int32_t d_sem = dims.d_sem;
  Matrix<T> out = Matrix<T>::Zero(static_cast<Eigen::Index>(items.size()), dims.d_model());
  std::vector<ItemTrace> traces(use_experts ? items.size() : 0);
  for (std::size_t r = 0; r < items.size(); ++r) {
    const int32_t item = items[r];
    require(item >= 1 && item <= static_cast<int32_t>(catalog.size()), ErrorKind::kNotFound,
            "fuse_items: unknown item index " + std::to_string(item));
    const auto row = static_cast<Eigen::Index>(r);
    if (use_id) out.row(row).head(d_id) = tape.value(id_table).row(item);
    if (!use_sem) continue;
    const auto tokens_idx = catalog.tokens(item);
    if (tokens_idx.empty()) continue;
    const Matrix<T> X = token_matrix<T>(tape.value(token_table), tokens_idx);
    if (!use_experts) {
      out.row(row).tail(d_sem) = X.colwise().mean();
      continue;
    }
    ItemTrace& trace = traces[r];
    trace.gate = gate<T>(X, tape.value(gate_var), dims.active_experts);
    Vector<T> sem = Vector<T>::Zero(d_sem);
    for (int32_t j : trace.gate.selected) {
      ExpertTrace e;
      e.expert = j;
      e.attn = expert_weights<T>(X, tape.value(query).row(j));
      e.context = e.attn * X;
      e.output = e.context * tape.value(value).block(j * d_sem, 0, d_sem, d_sem);
      sem += trace.gate.weights[j] * e.output;
      trace.experts.push_back(std::move(e));
    }
    out.row(row).tail(d_sem) = sem;
  }

  const bool needs_grad = (use_id && tape.requires_grad(id_table)) ||
                          (use_sem && tape.requires_grad(token_table)) ||
                          (use_experts && tape.any_requires_grad({query, value, gate_var}));
  return tape.push(
      std::move(out), needs_grad,
      [=, &catalog, items = std::move(items), traces = std::move(traces)](
          ad::Tape<T>& t, const Matrix<T>& g) {
        const T inv_scale = T(1) / std::sqrt(static_cast<T>(d_sem));
        for (std::size_t r = 0; r < items.size(); ++r) {
          const int32_t item = items[r];
          const auto row = static_cast<Eigen::Index>(r);
          if (use_id && t.requires_grad(id_table)) {
            t.grad_ref(id_table).row(item) += g.row(row).head(d_id);
          }
          if (!use_sem) continue;
          const auto tokens_idx = catalog.tokens(item);
          if (tokens_idx.empty()) continue;
          const Vector<T> d_sem_out = g.row(row).tail(d_sem);
          const auto m = static_cast<Eigen::Index>(tokens_idx.size());
          Matrix<T> dX = Matrix<T>::Zero(m, d_sem);
          if (!use_experts) {
            dX.rowwise() += d_sem_out / static_cast<T>(m);
          } else {
            const Matrix<T> X = token_matrix<T>(t.value(token_table), tokens_idx);
            const ItemTrace& trace = traces[r];
            const auto K = trace.gate.weights.size();
            Vector<T> d_weight = Vector<T>::Zero(K);
            for (const ExpertTrace& e : trace.experts) {
              const int32_t j = e.expert;
              const T w = trace.gate.weights[j];
              d_weight[j] = d_sem_out.dot(e.output);
              const Vector<T> d_output = w * d_sem_out;
              const auto P = t.value(value).block(j * d_sem, 0, d_sem, d_sem);
              if (t.requires_grad(value)) {
                t.grad_ref(value).block(j * d_sem, 0, d_sem, d_sem).noalias() +=
                    e.context.transpose() * d_output;
              }
              const Vector<T> d_context = d_output * P.transpose();
              dX.noalias() += e.attn.transpose() * d_context;
              const Vector<T> d_attn = (X * d_context.transpose()).transpose();
              const T inner = d_attn.dot(e.attn);
              const Vector<T> d_logit = e.attn.cwiseProduct((d_attn.array() - inner).matrix());
              if (t.requires_grad(query)) {
                t.grad_ref(query).row(j).noalias() += (d_logit * X) * inv_scale;
              }
              dX.noalias() += d_logit.transpose() * (t.value(query).row(j) * inv_scale);
            }
            // softmax over the selected scores
            T inner = 0;
            for (int32_t j : trace.gate.selected) inner += trace.gate.weights[j] * d_weight[j];
            Vector<T> d_score = Vector<T>::Zero(K);
            for (int32_t j : trace.gate.selected) {
              d_score[j] = trace.gate.weights[j] * (d_weight[j] - inner);
            }
            const Vector<T> pooled = X.colwise().mean();
            if (t.requires_grad(gate_var)) {
              t.grad_ref(gate_var).noalias() += pooled.transpose() * d_score;
            }
            const Vector<T> d_pooled = d_score * t.value(gate_var).transpose();
            dX.rowwise() += d_pooled / static_cast<T>(m);
          }
          if (t.requires_grad(token_table)) {
            auto& d_table = t.grad_ref(token_table);
            for (Eigen::Index i = 0; i < m; ++i) d_table.row(tokens_idx[i]) += dX.row(i);
          }
        }
      });
}

}  // namespace fusionrec

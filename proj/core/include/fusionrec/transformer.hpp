#pragma once

#include <string>
#include <vector>

#include "fusionrec/autodiff.hpp"
#include "fusionrec/params.hpp"

namespace fusionrec {

using ad::MaskMode;

struct StackDims {
  int32_t layers = 2;
  int32_t heads = 2;
  int32_t d_ff = 0;  // 0 selects 4 * d_model
  int32_t max_len = 50;

  int32_t ff_width(int32_t d_model) const { return d_ff > 0 ? d_ff : 4 * d_model; }
};

namespace names {
inline const std::string kPositions = "stack.positions";  // [max_len, d_model]

inline std::string layer(int32_t l, const char* leaf) {
  return "stack.layer" + std::to_string(l) + "." + leaf;
}
}  // namespace names

// Output of every block for sequences stacked as [batch * max_len, d_model].
// hidden[0] is the input plus positional rows; hidden[l] is block l's output.
struct StackOutput {
  std::vector<ad::Var> hidden;

  ad::Var last() const { return hidden.back(); }
};

// Pre-norm blocks: x + Attn(LN(x)), then x + FFN(LN(x)) with a GELU FFN.
template <class T>
StackOutput stack_forward(ParamBinder<T>& bind, const StackDims& dims, ad::Var embeddings,
                          int32_t batch, std::span<const int32_t> lengths, MaskMode mode) {
  auto& tape = bind.tape();
  const int32_t n = dims.max_len;
  require(tape.value(embeddings).rows() == static_cast<Eigen::Index>(batch) * n,
          ErrorKind::kShapeMismatch,
          "stack_forward: sequences longer than the positional table or misshaped input");
  std::vector<int32_t> positions(static_cast<std::size_t>(batch) * n);
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int32_t>(i % n);

  StackOutput out;
  ad::Var x = ad::add(tape, embeddings, ad::gather_rows(tape, bind(names::kPositions), positions));
  out.hidden.push_back(x);
  for (int32_t l = 0; l < dims.layers; ++l) {
    const ad::Var a = ad::layer_norm(tape, x, bind(names::layer(l, "ln1.gain")),
                                     bind(names::layer(l, "ln1.bias")));
    const ad::Var q = ad::linear(tape, a, bind(names::layer(l, "attn.wq")),
                                 bind(names::layer(l, "attn.bq")));
    const ad::Var k = ad::linear(tape, a, bind(names::layer(l, "attn.wk")),
                                 bind(names::layer(l, "attn.bk")));
    const ad::Var v = ad::linear(tape, a, bind(names::layer(l, "attn.wv")),
                                 bind(names::layer(l, "attn.bv")));
    const ad::Var ctx = ad::attention(tape, q, k, v, batch, n, lengths, dims.heads, mode);
    x = ad::add(tape, x,
                ad::linear(tape, ctx, bind(names::layer(l, "attn.wo")),
                           bind(names::layer(l, "attn.bo"))));
    const ad::Var b = ad::layer_norm(tape, x, bind(names::layer(l, "ln2.gain")),
                                     bind(names::layer(l, "ln2.bias")));
    const ad::Var hidden = ad::gelu(tape, ad::linear(tape, b, bind(names::layer(l, "ffn.w1")),
                                                     bind(names::layer(l, "ffn.b1"))));
    x = ad::add(tape, x,
                ad::linear(tape, hidden, bind(names::layer(l, "ffn.w2")),
                           bind(names::layer(l, "ffn.b2"))));
    out.hidden.push_back(x);
  }
  return out;
}

}  // namespace fusionrec

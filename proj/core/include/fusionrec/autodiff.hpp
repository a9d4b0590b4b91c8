#pragma once

// Reverse-mode differentiation over row-major Eigen matrices. A Tape records
// each op's output value together with a closure that maps the output
// gradient onto its inputs; Tape::backward replays closures in reverse.
// Everything is templated on the scalar so the same graph runs in f32 for
// training and f64 for finite-difference checks.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <numbers>
#include <span>
#include <vector>

#include "fusionrec/error.hpp"

namespace fusionrec {

template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
using Vector = Eigen::Matrix<T, 1, Eigen::Dynamic>;

namespace ad {

struct Var {
  int32_t id = -1;
  bool valid() const { return id >= 0; }
};

template <class T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix<T>& out_grad)>;

  Var constant(Matrix<T> value) { return push(std::move(value), false, nullptr); }
  Var variable(Matrix<T> value) { return push(std::move(value), true, nullptr); }

  Var push(Matrix<T> value, bool requires_grad, Backward backward) {
    nodes_.push_back(Node{std::move(value), Matrix<T>(), requires_grad, false,
                          requires_grad ? std::move(backward) : nullptr});
    return Var{static_cast<int32_t>(nodes_.size() - 1)};
  }

  const Matrix<T>& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  bool any_requires_grad(std::initializer_list<Var> vars) const {
    for (Var v : vars) {
      if (requires_grad(v)) return true;
    }
    return false;
  }

  // Gradient accumulator for `v`, zero-initialised on first touch.
  Matrix<T>& grad_ref(Var v) {
    Node& node = nodes_.at(v.id);
    if (!node.has_grad) {
      node.grad = Matrix<T>::Zero(node.value.rows(), node.value.cols());
      node.has_grad = true;
    }
    return node.grad;
  }

  // Zero matrix when nothing flowed into `v`.
  Matrix<T> grad(Var v) const {
    const Node& node = nodes_.at(v.id);
    if (!node.has_grad) return Matrix<T>::Zero(node.value.rows(), node.value.cols());
    return node.grad;
  }

  // Seeds d(loss)/d(loss) with ones, i.e. differentiates the sum of `loss`.
  void backward(Var loss) {
    grad_ref(loss).setOnes();
    for (int32_t id = loss.id; id >= 0; --id) {
      Node& node = nodes_[id];
      if (!node.has_grad || !node.backward) continue;
      node.backward(*this, node.grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix<T> value;
    Matrix<T> grad;
    bool requires_grad;
    bool has_grad;
    Backward backward;
  };
  // deque keeps references stable while ops append.
  std::deque<Node> nodes_;
};

template <class T>
void accumulate(Tape<T>& tape, Var v, const Matrix<T>& g) {
  if (tape.requires_grad(v)) tape.grad_ref(v) += g;
}

template <class T>
Var matmul(Tape<T>& tape, Var a, Var b) {
  const auto& A = tape.value(a);
  const auto& B = tape.value(b);
  require(A.cols() == B.rows(), ErrorKind::kShapeMismatch, "matmul: inner dimensions differ");
  Matrix<T> out = A * B;
  return tape.push(std::move(out), tape.any_requires_grad({a, b}),
                   [a, b](Tape<T>& t, const Matrix<T>& g) {
                     if (t.requires_grad(a)) t.grad_ref(a).noalias() += g * t.value(b).transpose();
                     if (t.requires_grad(b)) t.grad_ref(b).noalias() += t.value(a).transpose() * g;
                   });
}

template <class T>
Var add(Tape<T>& tape, Var a, Var b) {
  const auto& A = tape.value(a);
  const auto& B = tape.value(b);
  require(A.rows() == B.rows() && A.cols() == B.cols(), ErrorKind::kShapeMismatch,
          "add: shapes differ");
  Matrix<T> out = A + B;
  return tape.push(std::move(out), tape.any_requires_grad({a, b}),
                   [a, b](Tape<T>& t, const Matrix<T>& g) {
                     accumulate(t, a, g);
                     accumulate(t, b, g);
                   });
}

// x [r, c] + bias [1, c] broadcast over rows.
template <class T>
Var add_row(Tape<T>& tape, Var x, Var bias) {
  const auto& X = tape.value(x);
  const auto& b = tape.value(bias);
  require(b.rows() == 1 && b.cols() == X.cols(), ErrorKind::kShapeMismatch,
          "add_row: bias must be [1, cols]");
  Matrix<T> out = X.rowwise() + b.row(0);
  return tape.push(std::move(out), tape.any_requires_grad({x, bias}),
                   [x, bias](Tape<T>& t, const Matrix<T>& g) {
                     accumulate(t, x, g);
                     if (t.requires_grad(bias)) t.grad_ref(bias) += g.colwise().sum();
                   });
}

template <class T>
Var linear(Tape<T>& tape, Var x, Var weight, Var bias) {
  return add_row(tape, matmul(tape, x, weight), bias);
}

template <class T>
Var scale(Tape<T>& tape, Var x, T factor) {
  Matrix<T> out = tape.value(x) * factor;
  return tape.push(std::move(out), tape.requires_grad(x),
                   [x, factor](Tape<T>& t, const Matrix<T>& g) { accumulate<T>(t, x, g * factor); });
}

template <class T>
T gelu_value(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
}

template <class T>
T gelu_derivative(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
  const T pdf = std::exp(T(-0.5) * x * x) * T(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
  return cdf + x * pdf;
}

// Exact (erf) GELU.
template <class T>
Var gelu(Tape<T>& tape, Var x) {
  Matrix<T> out = tape.value(x).unaryExpr([](T v) { return gelu_value(v); });
  return tape.push(std::move(out), tape.requires_grad(x),
                   [x](Tape<T>& t, const Matrix<T>& g) {
                     Matrix<T> d = t.value(x).unaryExpr([](T v) { return gelu_derivative(v); });
                     t.grad_ref(x) += g.cwiseProduct(d);
                   });
}

inline constexpr double kLayerNormEps = 1e-5;

// Row-wise layer norm with gain/bias rows [1, c].
template <class T>
Var layer_norm(Tape<T>& tape, Var x, Var gain, Var bias) {
  const auto& X = tape.value(x);
  const auto& gamma = tape.value(gain);
  const auto& beta = tape.value(bias);
  const auto cols = X.cols();
  require(gamma.cols() == cols && beta.cols() == cols, ErrorKind::kShapeMismatch,
          "layer_norm: gain/bias width mismatch");
  Matrix<T> normed(X.rows(), cols);
  Vector<T> inv_std(X.rows());
  for (Eigen::Index r = 0; r < X.rows(); ++r) {
    const T mean = X.row(r).mean();
    const T var = (X.row(r).array() - mean).square().mean();
    inv_std[r] = T(1) / std::sqrt(var + T(kLayerNormEps));
    normed.row(r) = (X.row(r).array() - mean) * inv_std[r];
  }
  Matrix<T> out = (normed.array().rowwise() * gamma.row(0).array()).rowwise() +
                  beta.row(0).array();
  return tape.push(
      std::move(out), tape.any_requires_grad({x, gain, bias}),
      [x, gain, bias, normed = std::move(normed), inv_std = std::move(inv_std)](
          Tape<T>& t, const Matrix<T>& g) {
        if (t.requires_grad(gain)) t.grad_ref(gain) += g.cwiseProduct(normed).colwise().sum();
        if (t.requires_grad(bias)) t.grad_ref(bias) += g.colwise().sum();
        if (!t.requires_grad(x)) return;
        const auto& gamma = t.value(gain);
        auto& dx = t.grad_ref(x);
        const T n = static_cast<T>(normed.cols());
        for (Eigen::Index r = 0; r < g.rows(); ++r) {
          Vector<T> dn = g.row(r).cwiseProduct(gamma.row(0));
          const T mean_dn = dn.mean();
          const T mean_dn_n = dn.cwiseProduct(normed.row(r)).sum() / n;
          dx.row(r).array() +=
              inv_std[r] * (dn.array() - mean_dn - normed.row(r).array() * mean_dn_n);
        }
      });
}

// Selects rows of `table`; index -1 yields a zero row.
template <class T>
Var gather_rows(Tape<T>& tape, Var table, std::vector<int32_t> rows) {
  const auto& W = tape.value(table);
  Matrix<T> out = Matrix<T>::Zero(static_cast<Eigen::Index>(rows.size()), W.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0) continue;
    require(rows[i] < W.rows(), ErrorKind::kInvalidArgument, "gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = W.row(rows[i]);
  }
  return tape.push(std::move(out), tape.requires_grad(table),
                   [table, rows = std::move(rows)](Tape<T>& t, const Matrix<T>& g) {
                     auto& dw = t.grad_ref(table);
                     for (std::size_t i = 0; i < rows.size(); ++i) {
                       if (rows[i] >= 0) dw.row(rows[i]) += g.row(static_cast<Eigen::Index>(i));
                     }
                   });
}

// Zeroes rows whose keep flag is 0.
template <class T>
Var mask_rows(Tape<T>& tape, Var x, std::vector<uint8_t> keep) {
  Matrix<T> out = tape.value(x);
  require(static_cast<Eigen::Index>(keep.size()) == out.rows(), ErrorKind::kShapeMismatch,
          "mask_rows: mask length mismatch");
  for (std::size_t r = 0; r < keep.size(); ++r) {
    if (!keep[r]) out.row(static_cast<Eigen::Index>(r)).setZero();
  }
  return tape.push(std::move(out), tape.requires_grad(x),
                   [x, keep = std::move(keep)](Tape<T>& t, const Matrix<T>& g) {
                     auto& dx = t.grad_ref(x);
                     for (std::size_t r = 0; r < keep.size(); ++r) {
                       if (keep[r]) dx.row(static_cast<Eigen::Index>(r)) += g.row(static_cast<Eigen::Index>(r));
                     }
                   });
}

// Row-major reinterpretation.
template <class T>
Var reshape(Tape<T>& tape, Var x, Eigen::Index rows, Eigen::Index cols) {
  const auto& X = tape.value(x);
  require(rows * cols == X.size(), ErrorKind::kShapeMismatch, "reshape: element count differs");
  Matrix<T> out = Eigen::Map<const Matrix<T>>(X.data(), rows, cols);
  return tape.push(std::move(out), tape.requires_grad(x),
                   [x](Tape<T>& t, const Matrix<T>& g) {
                     auto& dx = t.grad_ref(x);
                     dx += Eigen::Map<const Matrix<T>>(g.data(), dx.rows(), dx.cols());
                   });
}

template <class T>
Var sum(Tape<T>& tape, Var x) {
  Matrix<T> out(1, 1);
  out(0, 0) = tape.value(x).sum();
  return tape.push(std::move(out), tape.requires_grad(x),
                   [x](Tape<T>& t, const Matrix<T>& g) { t.grad_ref(x).array() += g(0, 0); });
}

enum class MaskMode { kCausal, kNone };

// Large negative logit for masked keys; exp() underflows to exactly 0.
inline constexpr double kMaskedLogit = -1e30;

// Multi-head scaled dot-product attention over `batch` sequences stacked as
// [batch * seq_len, d]. Keys at positions >= lengths[b] are masked for every
// query; kCausal additionally masks keys after the query position.
template <class T>
Var attention(Tape<T>& tape, Var q, Var k, Var v, int32_t batch, int32_t seq_len,
              std::span<const int32_t> lengths, int32_t heads, MaskMode mode) {
  const auto& Q = tape.value(q);
  const auto& K = tape.value(k);
  const auto& V = tape.value(v);
  const auto d = Q.cols();
  require(Q.rows() == static_cast<Eigen::Index>(batch) * seq_len && K.rows() == Q.rows() &&
              V.rows() == Q.rows() && K.cols() == d && V.cols() == d,
          ErrorKind::kShapeMismatch, "attention: q/k/v shapes differ");
  require(heads >= 1 && d % heads == 0, ErrorKind::kShapeMismatch,
          "attention: width not divisible by heads");
  require(static_cast<int32_t>(lengths.size()) == batch, ErrorKind::kShapeMismatch,
          "attention: one length per sequence required");
  for (int32_t len : lengths) {
    require(len >= 1 && len <= seq_len, ErrorKind::kInvalidArgument,
            "attention: sequence lengths must lie in [1, seq_len]");
  }
  const auto dh = d / heads;
  const T inv_scale = T(1) / std::sqrt(static_cast<T>(dh));

  // probs[(b * heads + h)] is [seq_len, seq_len]
  std::vector<Matrix<T>> probs(static_cast<std::size_t>(batch) * heads);
  Matrix<T> out = Matrix<T>::Zero(Q.rows(), d);
  for (int32_t b = 0; b < batch; ++b) {
    const auto base = static_cast<Eigen::Index>(b) * seq_len;
    const int32_t valid = lengths[b];
    for (int32_t h = 0; h < heads; ++h) {
      const auto qb = Q.block(base, h * dh, seq_len, dh);
      const auto kb = K.block(base, h * dh, seq_len, dh);
      Matrix<T> scores = (qb * kb.transpose()) * inv_scale;
      for (int32_t i = 0; i < seq_len; ++i) {
        for (int32_t j = 0; j < seq_len; ++j) {
          if (j >= valid || (mode == MaskMode::kCausal && j > i)) scores(i, j) = T(kMaskedLogit);
        }
        const T top = scores.row(i).maxCoeff();
        scores.row(i) = (scores.row(i).array() - top).exp();
        scores.row(i) /= scores.row(i).sum();
      }
      out.block(base, h * dh, seq_len, dh).noalias() = scores * V.block(base, h * dh, seq_len, dh);
      probs[static_cast<std::size_t>(b) * heads + h] = std::move(scores);
    }
  }
  return tape.push(
      std::move(out), tape.any_requires_grad({q, k, v}),
      [q, k, v, batch, seq_len, heads, dh, inv_scale, probs = std::move(probs)](
          Tape<T>& t, const Matrix<T>& g) {
        const auto& Q = t.value(q);
        const auto& K = t.value(k);
        const auto& V = t.value(v);
        Matrix<T> dQ = Matrix<T>::Zero(Q.rows(), Q.cols());
        Matrix<T> dK = Matrix<T>::Zero(K.rows(), K.cols());
        Matrix<T> dV = Matrix<T>::Zero(V.rows(), V.cols());
        for (int32_t b = 0; b < batch; ++b) {
          const auto base = static_cast<Eigen::Index>(b) * seq_len;
          for (int32_t h = 0; h < heads; ++h) {
            const Matrix<T>& A = probs[static_cast<std::size_t>(b) * heads + h];
            const auto gb = g.block(base, h * dh, seq_len, dh);
            dV.block(base, h * dh, seq_len, dh).noalias() += A.transpose() * gb;
            Matrix<T> dA = gb * V.block(base, h * dh, seq_len, dh).transpose();
            Vector<T> row_dot = A.cwiseProduct(dA).rowwise().sum().transpose();
            Matrix<T> dS = A.cwiseProduct(dA.colwise() - row_dot.transpose());
            dS *= inv_scale;
            dQ.block(base, h * dh, seq_len, dh).noalias() += dS * K.block(base, h * dh, seq_len, dh);
            dK.block(base, h * dh, seq_len, dh).noalias() +=
                dS.transpose() * Q.block(base, h * dh, seq_len, dh);
          }
        }
        accumulate(t, q, dQ);
        accumulate(t, k, dK);
        accumulate(t, v, dV);
      });
}

}  // namespace ad
}  // namespace fusionrec

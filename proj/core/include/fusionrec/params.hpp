#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>

#include "fusionrec/autodiff.hpp"
#include "fusionrec/error.hpp"

namespace fusionrec {

// Named dense tensors, ordered by name for deterministic traversal.
template <class T>
using ParamSet = std::map<std::string, Matrix<T>>;

template <class To, class From>
ParamSet<To> cast_params(const ParamSet<From>& params) {
  ParamSet<To> out;
  for (const auto& [name, value] : params) out.emplace(name, value.template cast<To>());
  return out;
}

// Lazily binds parameters as tape variables. Names in `frozen` enter the tape
// as constants.
template <class T>
class ParamBinder {
 public:
  ParamBinder(ad::Tape<T>& tape, const ParamSet<T>& params,
              const std::set<std::string>* frozen = nullptr, bool track_gradients = true)
      : tape_(tape), params_(params), frozen_(frozen), track_gradients_(track_gradients) {}

  // Inference binding: every parameter is a constant.
  static ParamBinder inference(ad::Tape<T>& tape, const ParamSet<T>& params) {
    return ParamBinder(tape, params, nullptr, false);
  }

  ad::Var operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    auto p = params_.find(name);
    if (p == params_.end()) fail(ErrorKind::kNotFound, "no parameter named '" + name + "'");
    const bool frozen =
        !track_gradients_ || (frozen_ != nullptr && frozen_->count(name) != 0);
    const ad::Var v = frozen ? tape_.constant(p->second) : tape_.variable(p->second);
    bound_.emplace(name, v);
    return v;
  }

  ad::Tape<T>& tape() { return tape_; }
  const ParamSet<T>& params() const { return params_; }

  // Gradients of every bound parameter after tape.backward(). Parameters
  // never bound get no entry.
  ParamSet<T> gradients() const {
    ParamSet<T> grads;
    for (const auto& [name, v] : bound_) grads.emplace(name, tape_.grad(v));
    return grads;
  }

 private:
  ad::Tape<T>& tape_;
  const ParamSet<T>& params_;
  const std::set<std::string>* frozen_;
  bool track_gradients_;
  std::map<std::string, ad::Var> bound_;
};

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Adam with a per-tensor step counter, so tensors whose updates are
// withheld (frozen) or whose moments are reset keep consistent bias
// correction.
template <class T>
struct AdamState {
  ParamSet<T> first_moment;
  ParamSet<T> second_moment;
  std::map<std::string, int64_t> steps;

  void reset(const std::string& name) {
    first_moment.erase(name);
    second_moment.erase(name);
    steps.erase(name);
  }
};

// Throws kNonFinite naming the first offending tensor; nothing is updated in
// that case.
template <class T>
void adam_step(ParamSet<T>& params, const ParamSet<T>& grads, AdamState<T>& state,
               double lr, const AdamOptions& options = {},
               const std::set<std::string>* skip = nullptr) {
  for (const auto& [name, g] : grads) {
    if (!g.allFinite()) fail(ErrorKind::kNonFinite, "non-finite gradient in tensor '" + name + "'");
    auto p = params.find(name);
    if (p == params.end()) fail(ErrorKind::kNotFound, "gradient for unknown tensor '" + name + "'");
    require(p->second.rows() == g.rows() && p->second.cols() == g.cols(),
            ErrorKind::kShapeMismatch, "gradient shape differs for '" + name + "'");
  }
  const T b1 = static_cast<T>(options.beta1);
  const T b2 = static_cast<T>(options.beta2);
  const T eps = static_cast<T>(options.epsilon);
  for (const auto& [name, g] : grads) {
    if (skip != nullptr && skip->count(name) != 0) continue;
    Matrix<T>& param = params.at(name);
    auto [m_it, m_new] = state.first_moment.try_emplace(name, Matrix<T>::Zero(g.rows(), g.cols()));
    auto [v_it, v_new] = state.second_moment.try_emplace(name, Matrix<T>::Zero(g.rows(), g.cols()));
    Matrix<T>& m = m_it->second;
    Matrix<T>& v = v_it->second;
    const int64_t t = ++state.steps[name];
    m = b1 * m + (T(1) - b1) * g;
    v = b2 * v + (T(1) - b2) * g.cwiseProduct(g);
    const T correction1 = T(1) - static_cast<T>(std::pow(options.beta1, static_cast<double>(t)));
    const T correction2 = T(1) - static_cast<T>(std::pow(options.beta2, static_cast<double>(t)));
    const T step = static_cast<T>(lr) / correction1;
    param.array() -= step * m.array() / ((v.array() / correction2).sqrt() + eps);
  }
}

}  // namespace fusionrec

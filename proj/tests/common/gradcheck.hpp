#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <set>
#include <string>

#include "fusionrec/params.hpp"

namespace fusionrec::testing {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_tensor;
  Eigen::Index worst_index = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  int64_t checked = 0;
  std::set<std::string> bound;
};

using LossBuilder = std::function<ad::Var(ParamBinder<double>&)>;

inline double evaluate_loss(const ParamSet<double>& params, const LossBuilder& loss) {
  ad::Tape<double> tape;
  auto bind = ParamBinder<double>::inference(tape, params);
  return tape.value(loss(bind))(0, 0);
}

// Relative error |a - n| / max(|a|, |n|). Entries where both magnitudes sit
// below `noise_floor` are compared absolutely against `floor_tolerance`,
// since central differences carry roughly 1e-11 of rounding noise.
inline double relative_error(double analytic, double numeric, double noise_floor,
                             double floor_tolerance) {
  const double scale = std::max(std::abs(analytic), std::abs(numeric));
  const double diff = std::abs(analytic - numeric);
  if (scale < noise_floor) return diff <= floor_tolerance ? 0.0 : diff / noise_floor;
  return diff / scale;
}

// Compares backprop gradients of every bound parameter with central
// differences of step `h`.
inline GradCheckResult gradient_check(ParamSet<double> params, const LossBuilder& loss,
                                      double h = 1e-5, double noise_floor = 1e-6,
                                      double floor_tolerance = 1e-9) {
  GradCheckResult result;
  ParamSet<double> grads;
  {
    ad::Tape<double> tape;
    ParamBinder<double> bind(tape, params);
    const ad::Var value = loss(bind);
    tape.backward(value);
    grads = bind.gradients();
  }
  for (const auto& [name, grad] : grads) {
    result.bound.insert(name);
    Matrix<double>& tensor = params.at(name);
    for (Eigen::Index i = 0; i < tensor.size(); ++i) {
      double& x = tensor.data()[i];
      const double saved = x;
      x = saved + h;
      const double up = evaluate_loss(params, loss);
      x = saved - h;
      const double down = evaluate_loss(params, loss);
      x = saved;
      const double numeric = (up - down) / (2 * h);
      const double analytic = grad.data()[i];
      const double err = relative_error(analytic, numeric, noise_floor, floor_tolerance);
      ++result.checked;
      if (err > result.max_relative_error || result.worst_index < 0) {
        result.max_relative_error = err;
        result.worst_tensor = name;
        result.worst_index = i;
        result.worst_analytic = analytic;
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace fusionrec::testing

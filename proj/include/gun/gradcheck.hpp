#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "gun/autodiff.hpp"

namespace gun::ad {

// Builds a scalar on the given tape from leaves bound to `inputs`.
using ScalarFn = std::function<Var(Tape&, std::span<const Var>)>;

// Coordinates the caller wants excluded (e.g. sample points sitting on a
// kink of a piecewise-linear function).
using SkipFn = std::function<bool(std::size_t input, std::size_t coord)>;

struct Coordinate {
  std::size_t input = 0;
  std::size_t index = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  Coordinate worst;
  std::size_t checked = 0;
  std::vector<Coordinate> skipped;
  std::vector<Coordinate> non_finite;

  bool passed(double tolerance) const {
    return non_finite.empty() && max_rel_error < tolerance;
  }
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

// Central differences (f(x+eps) - f(x-eps)) / 2eps per coordinate against the
// tape gradient.
inline GradCheckReport finite_diff_check(const ScalarFn& f,
                                         std::vector<Tensor> inputs,
                                         double epsilon = 1e-5,
                                         const SkipFn& skip = {}) {
  if (!(epsilon >= 1e-7 && epsilon <= 1e-3)) {
    throw ValidationError("finite_diff_check: epsilon must lie in [1e-7, 1e-3]");
  }
  auto evaluate = [&](const std::vector<Tensor>& xs) {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& x : xs) leaves.push_back(tape.leaf(x));
    return f(tape, leaves).value()[0];
  };

  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& x : inputs) leaves.push_back(tape.leaf(x));
    Var out = f(tape, leaves);
    auto grads = tape.backward(out);
    for (const auto& v : leaves) analytic.push_back(grads.of(v));
  }

  GradCheckReport report;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t k = 0; k < inputs[i].size(); ++k) {
      if (skip && skip(i, k)) {
        report.skipped.push_back({i, k});
        continue;
      }
      const double x0 = inputs[i][k];
      inputs[i][k] = x0 + epsilon;
      const double fp = evaluate(inputs);
      inputs[i][k] = x0 - epsilon;
      const double fm = evaluate(inputs);
      inputs[i][k] = x0;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        report.non_finite.push_back({i, k});
        continue;
      }
      const double numeric = (fp - fm) / (2.0 * epsilon);
      const double err = relative_error(analytic[i][k], numeric);
      ++report.checked;
      if (err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst = {i, k};
      }
    }
  }
  return report;
}

}  // namespace gun::ad

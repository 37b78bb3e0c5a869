#pragma once

#include <functional>
#include <string>

#include "svil/autodiff.hpp"

namespace svil::ad {

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  double tolerance = 0.0;
  bool passed = false;

  std::string summary() const;
};

// Builds a scalar loss on `graph` from the bound parameter.
using ScalarFn = std::function<Var(Graph& graph, Var theta)>;

// Compares the reverse-mode gradient of `f` at `theta` with central finite
// differences. Relative error is |a - n| / max(|a|, |n|, floor).
GradCheckReport grad_check(const ScalarFn& f, const Tensor& theta, double tol, double step = 1e-6,
                           double floor = 1e-3);

// Value and analytic gradient of `f` at `theta`.
double evaluate(const ScalarFn& f, const Tensor& theta, Tensor* grad = nullptr);

}  // namespace svil::ad

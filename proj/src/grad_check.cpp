#include "svil/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace svil::ad {

std::string GradCheckReport::summary() const {
  std::ostringstream out;
  out << (passed ? "pass" : "FAIL") << " max_rel_err=" << max_relative_error << " (tol " << tolerance
      << ") at index " << worst_index << ": analytic=" << analytic_at_worst
      << " numeric=" << numeric_at_worst;
  return out.str();
}

double evaluate(const ScalarFn& f, const Tensor& theta, Tensor* grad) {
  Graph graph;
  Var p = graph.parameter(theta);
  Var loss = f(graph, p);
  if (grad) {
    graph.backward(loss);
    *grad = graph.grad(p);
  }
  return loss.value().item();
}

GradCheckReport grad_check(const ScalarFn& f, const Tensor& theta, double tol, double step,
                           double floor) {
  GradCheckReport report;
  report.tolerance = tol;
  Tensor analytic;
  evaluate(f, theta, &analytic);
  Tensor probe = theta;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + step;
    const double up = evaluate(f, probe);
    probe[i] = orig - step;
    const double down = evaluate(f, probe);
    probe[i] = orig;
    const double numeric = (up - down) / (2.0 * step);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
    const double err = std::abs(analytic[i] - numeric) / denom;
    if (i == 0 || err > report.max_relative_error) {
      report.max_relative_error = err;
      report.worst_index = i;
      report.analytic_at_worst = analytic[i];
      report.numeric_at_worst = numeric;
    }
  }
  report.passed = report.max_relative_error < tol;
  return report;
}

}  // namespace svil::ad

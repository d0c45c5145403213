#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dirl/autograd.hpp"

namespace dirl {

struct NamedParam {
  std::string name;
  Tensor* tensor;
};

struct GradCheckEntry {
  std::string name;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
  bool passed = true;
};

struct GradCheckReport {
  bool aborted = false;
  std::string diagnostic;
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;

  bool passed() const {
    if (aborted) return false;
    for (const auto& e : entries)
      if (!e.passed) return false;
    return true;
  }
};

/// Builds a scalar on the given tape from parameters bound with Graph::param().
using ScalarFn = std::function<Var(Graph&)>;

/// Compares reverse-mode gradients with central differences for every element of every
/// parameter. Error metric: |analytic - numeric| / max(1, |numeric|).
inline GradCheckReport grad_check(const ScalarFn& f, std::span<const NamedParam> params, double h = 1e-5,
                                  double tol = 1e-4) {
  if (!(h >= 1e-6 && h <= 1e-4)) throw ConfigError("grad_check: step must lie in [1e-6, 1e-4]");
  GradCheckReport report;

  std::vector<Tensor> analytic;
  {
    Graph g(true);
    Var loss = f(g);
    const double v = loss.value()[0];
    if (!std::isfinite(v)) {
      report.aborted = true;
      report.diagnostic = "non-finite loss " + std::to_string(v) + " at the unperturbed point";
      return report;
    }
    g.backward(loss);
    for (const auto& p : params) analytic.push_back(g.grad_of(*p.tensor));
  }

  auto eval = [&f]() {
    Graph g(false);
    return f(g).value()[0];
  };

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& t = *params[pi].tensor;
    GradCheckEntry entry;
    entry.name = params[pi].name;
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double orig = t[i];
      t[i] = orig + h;
      const double up = eval();
      t[i] = orig - h;
      const double down = eval();
      t[i] = orig;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        report.aborted = true;
        report.diagnostic = "non-finite loss while perturbing " + entry.name + "[" + std::to_string(i) + "]";
        return report;
      }
      const double numeric = (up - down) / (2.0 * h);
      const double err = std::abs(analytic[pi][i] - numeric) / std::max(1.0, std::abs(numeric));
      if (err >= entry.rel_error) {
        entry.rel_error = err;
        entry.worst_index = i;
        entry.analytic = analytic[pi][i];
        entry.numeric = numeric;
      }
    }
    entry.passed = entry.rel_error <= tol;
    report.max_rel_error = std::max(report.max_rel_error, entry.rel_error);
    report.entries.push_back(entry);
  }
  return report;
}

}  // namespace dirl

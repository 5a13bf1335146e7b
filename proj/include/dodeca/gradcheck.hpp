#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <vector>

#include "dodeca/error.hpp"

namespace dodeca::tensor {

// Evaluates f at x. When grad is non-empty it must also receive df/dx.
using GradFunction = std::function<double(std::span<const double> x, std::span<double> grad)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
};

// Compares the analytic gradient of f against central differences. The
// per-coordinate error is |g_a - g_fd| / max(1e-8, |g_a| + |g_fd|). When
// `coords` is empty every coordinate is checked.
inline GradCheckResult finite_diff_check(const GradFunction& f, std::span<const double> params, double epsilon,
                                         std::span<const std::size_t> coords = {}) {
  if (!(epsilon > 0.0)) throw ContractError("finite_diff_check: epsilon must be positive");
  std::vector<double> x(params.begin(), params.end());
  std::vector<double> analytic(x.size(), 0.0);
  const double f0 = f(x, analytic);
  if (!std::isfinite(f0)) throw NumericError("finite_diff_check: f is not finite at the base point");

  std::vector<std::size_t> all;
  if (coords.empty()) {
    all.resize(x.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    coords = all;
  }

  GradCheckResult result;
  for (const std::size_t i : coords) {
    const double saved = x[i];
    auto at = [&](double offset) {
      x[i] = saved + offset;
      const double v = f(x, {});
      x[i] = saved;
      if (!std::isfinite(v)) throw NumericError("finite_diff_check: f is not finite near coordinate " + std::to_string(i));
      return v;
    };
    const double numeric = (at(epsilon) - at(-epsilon)) / (2.0 * epsilon);
    const double err = std::abs(analytic[i] - numeric) / std::max(1e-8, std::abs(analytic[i]) + std::abs(numeric));
    if (err > result.max_relative_error || result.checked == 0) {
      result.max_relative_error = std::max(err, result.max_relative_error);
      if (err >= result.max_relative_error) {
        result.worst_index = i;
        result.analytic = analytic[i];
        result.numeric = numeric;
      }
    }
    ++result.checked;
  }
  return result;
}

}  // namespace dodeca::tensor

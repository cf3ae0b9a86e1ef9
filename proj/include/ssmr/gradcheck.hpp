#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>

#include "ssmr/error.hpp"
#include "ssmr/tensor.hpp"

namespace ssmr {

struct GradCheckReport {
  // max_i |analytic_i - numeric_i| / max(||analytic||_inf, ||numeric||_inf)
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::int64_t worst_index = -1;
  bool passed = false;
};

// Compares the 32-bit reverse-mode gradient of `f` at `point` against central
// differences of the same function evaluated in 64-bit. `f` must accept both
// `const Tensor&` and `const Tensor64&` and return a scalar of the same type.
template <typename F>
GradCheckReport grad_check(F&& f, const Tensor& point, double h, double tol) {
  if (!(h > 0.0)) throw ValidationError("grad_check: step h must be positive");

  Tape tape;
  const Tensor x = tape.leaf(point);
  const Tensor loss = f(x);
  if (!std::isfinite(loss.item())) throw NumericError("grad_check: f is not finite at the point");
  const Tensor analytic = loss.tracked() ? tape.backward(loss, {x.node()}).at(x.node()) : Tensor::zeros(point.shape());

  const auto base = point.cast<double>().to_vector();
  std::vector<double> numeric(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    auto plus = base;
    auto minus = base;
    plus[i] += h;
    minus[i] -= h;
    const double fp = f(Tensor64(point.shape(), std::move(plus))).item();
    const double fm = f(Tensor64(point.shape(), std::move(minus))).item();
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("grad_check: f is not finite near coordinate " + std::to_string(i));
    }
    numeric[i] = (fp - fm) / (2.0 * h);
  }

  GradCheckReport report;
  double scale = 0.0;
  for (std::size_t i = 0; i < numeric.size(); ++i) {
    scale = std::max({scale, std::abs(numeric[i]), std::abs(static_cast<double>(analytic[i]))});
  }
  for (std::size_t i = 0; i < numeric.size(); ++i) {
    const double err = std::abs(static_cast<double>(analytic[i]) - numeric[i]);
    if (err > report.max_abs_error) {
      report.max_abs_error = err;
      report.worst_index = static_cast<std::int64_t>(i);
    }
  }
  report.max_rel_error = scale > 0.0 ? report.max_abs_error / scale : 0.0;
  report.passed = report.max_rel_error < tol;
  return report;
}

}  // namespace ssmr

#pragma once

// Central-difference gradient oracle and comparison helpers.

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "dynast/numerics/autograd.hpp"

namespace dynast {

inline constexpr double kGradCheckTolerance = 1e-4;

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max(1e-8, std::abs(a) + std::abs(b));
}

// d f / d x by central differences, one element at a time. `f` maps a tensor
// of x's shape to a scalar and must be deterministic.
template <typename F>
Tensor finite_difference_grad(F&& f, Tensor x, double step) {
  if (!(step >= 1e-6 && step <= 1e-3)) {
    throw ConfigError("finite_difference_grad: step " + std::to_string(step) + " outside [1e-6, 1e-3]");
  }
  Tensor grad(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + step;
    const double fp = f(static_cast<const Tensor&>(x));
    x[i] = orig - step;
    const double fm = f(static_cast<const Tensor&>(x));
    x[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("finite_difference_grad: non-finite evaluation at element " + std::to_string(i));
    }
    grad[i] = (fp - fm) / (2.0 * step);
  }
  return grad;
}

struct GradCheckReport {
  std::string name;
  std::size_t elements = 0;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;

  bool passed(double tol = kGradCheckTolerance) const { return max_rel_error <= tol; }
};

inline GradCheckReport compare_gradients(std::string name, const Tensor& analytic, const Tensor& numeric) {
  if (analytic.shape() != numeric.shape()) {
    throw ShapeError("compare_gradients: " + shape_str(analytic.shape()) + " vs " + shape_str(numeric.shape()));
  }
  GradCheckReport r;
  r.name = std::move(name);
  r.elements = analytic.size();
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double e = relative_error(analytic[i], numeric[i]);
    if (i == 0 || e > r.max_rel_error) {
      r.max_rel_error = e;
      r.worst_index = i;
      r.analytic_at_worst = analytic[i];
      r.numeric_at_worst = numeric[i];
    }
  }
  return r;
}

// Checks reverse-mode gradients of `loss_fn` (() -> scalar Var) with respect
// to every listed leaf. Leaf values are perturbed in place and restored.
template <typename LossFn>
std::vector<GradCheckReport> check_gradients(const std::vector<std::pair<std::string, Var>>& leaves,
                                             LossFn&& loss_fn, double step = 1e-5) {
  for (const auto& [name, v] : leaves) const_cast<Var&>(v).zero_grad();
  Var loss = loss_fn();
  backward(loss);
  std::vector<GradCheckReport> reports;
  for (const auto& [name, leaf] : leaves) {
    Tensor analytic = leaf.has_grad() ? leaf.grad() : Tensor(leaf.shape());
    Var target = leaf;
    auto f = [&](const Tensor& value) {
      Tensor saved = target.value();
      target.mutable_value() = value;
      const double out = loss_fn().item();
      target.mutable_value() = std::move(saved);
      return out;
    };
    Tensor numeric = finite_difference_grad(f, leaf.value(), step);
    reports.push_back(compare_gradients(name, analytic, numeric));
  }
  return reports;
}

}  // namespace dynast

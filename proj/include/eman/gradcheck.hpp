#pragma once

#include <functional>

#include "eman/tensor.hpp"

namespace eman {

/// Scalar-valued function of one tensor, written against the op API so it
/// can run both on a tape (analytic gradient) and on constants (probing).
using ScalarFunction = std::function<Tensor(const Tensor&)>;

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
///
/// Throws std::invalid_argument for step <= 0 and std::domain_error when the
/// function is non-finite at a perturbed point. Results are meaningless when a
/// perturbation crosses a relu kink.
double finite_difference_check(const ScalarFunction& f, const Tensor& point, double step = 1e-5);

/// Central-difference gradient of `f` at `point`.
Tensor numerical_gradient(const ScalarFunction& f, const Tensor& point, double step = 1e-5);

/// Reverse-mode gradient of `f` at `point`.
Tensor analytic_gradient(const ScalarFunction& f, const Tensor& point);

}  // namespace eman

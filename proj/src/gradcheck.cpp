#include "eman/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

#include <fmt/format.h>

#include "eman/autograd.hpp"

namespace eman {

Tensor analytic_gradient(const ScalarFunction& f, const Tensor& point) {
    Tape tape;
    const Tensor x = tape.leaf(point.detach(), "x");
    const Tensor y = f(x);
    if (!y.requires_grad()) return Tensor::zeros(point.shape());
    return tape.backward(y).at("x");
}

Tensor numerical_gradient(const ScalarFunction& f, const Tensor& point, double step) {
    if (!(step > 0.0)) throw std::invalid_argument("finite difference step must be > 0");
    std::vector<double> base = point.to_vector();
    std::vector<double> grad(base.size());
    auto eval = [&](std::size_t i, double delta) {
        std::vector<double> probe = base;
        probe[i] += delta;
        const double v = f(Tensor(point.shape(), std::move(probe))).item();
        if (!std::isfinite(v)) {
            throw std::domain_error(fmt::format("finite difference: non-finite value {} at coordinate {}", v, i));
        }
        return v;
    };
    for (std::size_t i = 0; i < base.size(); ++i) grad[i] = (eval(i, step) - eval(i, -step)) / (2.0 * step);
    return Tensor(point.shape(), std::move(grad));
}

double finite_difference_check(const ScalarFunction& f, const Tensor& point, double step) {
    const Tensor numeric = numerical_gradient(f, point, step);
    const Tensor analytic = analytic_gradient(f, point);
    double worst = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double err = std::abs(analytic[i] - numeric[i]) / std::max(1.0, std::abs(analytic[i]));
        if (std::isnan(err)) return err;
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace eman

// Copyright 2026 The Duet Authors
// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference gradient verification. Compares the analytic gradient of
// a pure scalar-valued function against central differences and reports the
// worst elementwise relative error. The check never touches the autodiff
// machinery on the numeric side, so it stays an independent oracle.

#pragma once

#include <cmath>
#include <functional>

#include "duet/tensor.hpp"

namespace duet {

inline constexpr double kGradCheckDefaultStep = 1e-3;
inline constexpr double kGradCheckErrorFloor = 1e-8;

inline double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double step = kGradCheckDefaultStep) {
    if (!(step >= 1e-5 && step <= 1e-2)) {
        throw std::invalid_argument("grad_check: step must lie in [1e-5, 1e-2]");
    }

    Tensor leaf = x.clone(/*requires_grad=*/true);
    Tensor y = f(leaf);
    if (y.size() != 1) {
        throw std::invalid_argument("grad_check: f must return a scalar");
    }
    y.backward();
    std::vector<double> analytic(x.size(), 0.0);
    if (leaf.has_grad()) {
        analytic = leaf.grad();
    }

    double worst = 0.0;
    NoGradGuard no_grad;
    for (std::size_t i = 0; i < x.size(); ++i) {
        Tensor plus = x.clone();
        plus.mutable_data()[i] += step;
        Tensor minus = x.clone();
        minus.mutable_data()[i] -= step;
        double numeric = (f(plus).value() - f(minus).value()) / (2.0 * step);
        double denom = std::max({std::fabs(analytic[i]), std::fabs(numeric),
                                 kGradCheckErrorFloor});
        worst = std::max(worst, std::fabs(analytic[i] - numeric) / denom);
    }
    return worst;
}

}  // namespace duet

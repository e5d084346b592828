// SPDX-License-Identifier: Apache-2.0

// Central finite-difference gradient oracle. The loss closure is re-evaluated
// forward-only around perturbed parameter values, so the check is independent
// of the reverse-mode path it validates.

#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "cggm/tensor.hpp"

namespace gradcheck {

using LossFn = std::function<cggm::Tensor(void)>;

struct Report {
    double max_rel_err = 0.0;
    std::size_t elements = 0;
};

// rel err = |analytic - fd| / max(1, |analytic|, |fd|): relative at O(1)
// scale, absolute below it (central differences at step 1e-5 resolve to
// roughly 1e-10, far under the 1e-4 acceptance line either way).
inline double relative_error(double analytic, double fd) {
    double denom = std::max({1.0, std::fabs(analytic), std::fabs(fd)});
    return std::fabs(analytic - fd) / denom;
}

// Checks d(loss)/d(param) for every element of every listed parameter.
// The closure must rebuild the graph from the parameters' current values.
inline Report check(std::vector<cggm::Tensor> params, const LossFn& loss_fn, double step = 1e-5) {
    for (auto& p : params) p.clear_grad();
    cggm::Tensor loss = loss_fn();
    cggm::backward(loss);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (auto& p : params)
        analytic.push_back(p.has_grad() ? p.grad() : std::vector<double>(p.numel(), 0.0));

    Report report;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& values = params[pi].mutable_values();
        for (std::size_t j = 0; j < values.size(); ++j) {
            double orig = values[j];
            values[j] = orig + step;
            double plus = loss_fn().value();
            values[j] = orig - step;
            double minus = loss_fn().value();
            values[j] = orig;
            double fd = (plus - minus) / (2.0 * step);
            report.max_rel_err = std::max(report.max_rel_err, relative_error(analytic[pi][j], fd));
            ++report.elements;
        }
    }
    for (auto& p : params) p.clear_grad();
    return report;
}

}  // namespace gradcheck

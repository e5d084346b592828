// SPDX-License-Identifier: Apache-2.0

// Independent linear-probe oracle for synthetic-data checks: closed-form
// ridge regression onto one-hot (or scalar) targets via Gaussian
// elimination. No autodiff involved.

#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "cggm/data.hpp"

namespace probe {

// Solves (A + ridge*I) W = B for W, A: n x n, B: n x k. In-place Gaussian
// elimination with partial pivoting.
inline std::vector<double> solve(std::vector<double> a, std::vector<double> b, std::size_t n,
                                 std::size_t k, double ridge) {
    for (std::size_t i = 0; i < n; ++i) a[i * n + i] += ridge;
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t pivot = col;
        for (std::size_t r = col + 1; r < n; ++r)
            if (std::fabs(a[r * n + col]) > std::fabs(a[pivot * n + col])) pivot = r;
        if (pivot != col) {
            for (std::size_t c = 0; c < n; ++c) std::swap(a[col * n + c], a[pivot * n + c]);
            for (std::size_t c = 0; c < k; ++c) std::swap(b[col * k + c], b[pivot * k + c]);
        }
        double diag = a[col * n + col];
        for (std::size_t r = 0; r < n; ++r) {
            if (r == col || a[r * n + col] == 0.0) continue;
            double f = a[r * n + col] / diag;
            for (std::size_t c = col; c < n; ++c) a[r * n + c] -= f * a[col * n + c];
            for (std::size_t c = 0; c < k; ++c) b[r * k + c] -= f * b[col * k + c];
        }
    }
    std::vector<double> w(n * k);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < k; ++c) w[r * k + c] = b[r * k + c] / a[r * n + r];
    return w;
}

struct Probe {
    std::size_t dim = 0;
    std::size_t classes = 0;
    std::vector<double> weights;  // (dim+1) x classes, bias last row
};

// Fits ridge least squares from one modality's features to one-hot class
// targets over the given row indices.
inline Probe fit_classification(const cggm::Dataset& ds, std::size_t modality,
                                std::span<const std::size_t> rows, double ridge = 1e-6) {
    std::size_t dim = ds.spec.feature_dims[modality];
    std::size_t classes = ds.spec.classes;
    std::size_t d1 = dim + 1;
    std::vector<double> xtx(d1 * d1, 0.0), xty(d1 * classes, 0.0);
    std::vector<double> x(d1);
    for (std::size_t r : rows) {
        for (std::size_t f = 0; f < dim; ++f) x[f] = ds.features[modality][r * dim + f];
        x[dim] = 1.0;
        auto cls = static_cast<std::size_t>(ds.targets[r]);
        for (std::size_t i = 0; i < d1; ++i) {
            for (std::size_t j = 0; j < d1; ++j) xtx[i * d1 + j] += x[i] * x[j];
            xty[i * classes + cls] += x[i];
        }
    }
    Probe p;
    p.dim = dim;
    p.classes = classes;
    p.weights = solve(std::move(xtx), std::move(xty), d1, classes, ridge);
    return p;
}

inline double accuracy(const Probe& p, const cggm::Dataset& ds, std::size_t modality,
                       std::span<const std::size_t> rows) {
    std::size_t dim = p.dim;
    std::size_t hits = 0;
    for (std::size_t r : rows) {
        std::size_t best = 0;
        double best_score = -1e300;
        for (std::size_t c = 0; c < p.classes; ++c) {
            double score = p.weights[dim * p.classes + c];  // bias
            for (std::size_t f = 0; f < dim; ++f)
                score += ds.features[modality][r * dim + f] * p.weights[f * p.classes + c];
            if (score > best_score) {
                best_score = score;
                best = c;
            }
        }
        if (best == static_cast<std::size_t>(ds.targets[r])) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(rows.size());
}

inline double probe_test_accuracy(const cggm::Dataset& ds, std::size_t modality) {
    Probe p = fit_classification(ds, modality, ds.train_indices);
    return accuracy(p, ds, modality, ds.test_indices);
}

}  // namespace probe

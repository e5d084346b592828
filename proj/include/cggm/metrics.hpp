// SPDX-License-Identifier: Apache-2.0

/// \file metrics.hpp
/// Per-iteration, per-modality utilization tracking. Batch metrics are
/// oriented to a uniform higher-is-better scale (MAE is negated) so the
/// step-to-step improvement delta means the same thing for every task.

#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "cggm/tensor.hpp"

namespace cggm {

enum class MetricKind : std::uint8_t { accuracy = 0, mae = 1 };

enum class Orientation { higher_better, lower_better };

inline Orientation orientation(MetricKind kind) {
    return kind == MetricKind::accuracy ? Orientation::higher_better : Orientation::lower_better;
}

/// Fraction of argmax matches; ties break toward the lowest class index.
inline double evaluate_accuracy(const Tensor& logits, std::span<const double> targets) {
    if (logits.rank() != 2) throw ShapeError("accuracy expects batch x classes predictions");
    std::size_t batch = logits.shape()[0];
    std::size_t classes = logits.shape()[1];
    if (batch == 0 || targets.size() != batch)
        throw ShapeError("accuracy: empty batch or target count mismatch");
    const auto& v = logits.values();
    std::size_t hits = 0;
    for (std::size_t i = 0; i < batch; ++i) {
        double t = targets[i];
        if (t < 0 || t >= static_cast<double>(classes) || t != std::floor(t))
            throw ShapeError("classification target " + std::to_string(t) + " out of range [0, " +
                             std::to_string(classes) + ")");
        std::size_t best = 0;
        for (std::size_t c = 1; c < classes; ++c)
            if (v[i * classes + c] > v[i * classes + best]) best = c;
        if (best == static_cast<std::size_t>(t)) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(batch);
}

inline double evaluate_mae(const Tensor& pred, std::span<const double> targets) {
    std::size_t batch = pred.shape()[0];
    if (batch == 0 || pred.numel() != batch || targets.size() != batch)
        throw ShapeError("mae expects a batch x 1 prediction column matching the targets");
    const auto& v = pred.values();
    double acc = 0.0;
    for (std::size_t i = 0; i < batch; ++i) acc += std::fabs(v[i] - targets[i]);
    return acc / static_cast<double>(batch);
}

/// Raw (unoriented) batch metric.
inline double evaluate_batch(MetricKind kind, const Tensor& predictions,
                             std::span<const double> targets) {
    return kind == MetricKind::accuracy ? evaluate_accuracy(predictions, targets)
                                        : evaluate_mae(predictions, targets);
}

inline double orient(MetricKind kind, double raw) {
    return orientation(kind) == Orientation::higher_better ? raw : -raw;
}

/// Previous/current oriented score vectors. The previous vector starts at
/// zero; with beta > 0 the current vector is an exponential moving average of
/// the oriented batch scores (off by default).
class MetricState {
public:
    MetricState(std::size_t modalities, MetricKind kind, double beta = 0.0)
        : kind_(kind), beta_(beta), previous_(modalities, 0.0), current_(modalities, 0.0) {
        if (beta < 0.0 || beta >= 1.0) throw Error("EMA coefficient must lie in [0, 1)");
    }

    std::size_t modalities() const { return previous_.size(); }
    std::size_t iteration() const { return iteration_; }
    MetricKind kind() const { return kind_; }
    const std::vector<double>& previous() const { return previous_; }
    const std::vector<double>& current() const { return current_; }

    /// Folds one batch of raw metrics in and returns the oriented
    /// improvement delta (current - previous).
    std::vector<double> update_and_delta(std::span<const double> raw) {
        if (raw.size() != previous_.size())
            throw ShapeError("metric count " + std::to_string(raw.size()) +
                             " does not match modality count " + std::to_string(previous_.size()));
        std::vector<double> delta(raw.size());
        for (std::size_t i = 0; i < raw.size(); ++i) {
            double oriented = orient(kind_, raw[i]);
            current_[i] = beta_ > 0.0 ? beta_ * current_[i] + (1.0 - beta_) * oriented : oriented;
            delta[i] = current_[i] - previous_[i];
        }
        previous_ = current_;
        ++iteration_;
        return delta;
    }

private:
    MetricKind kind_;
    double beta_;
    std::vector<double> previous_;
    std::vector<double> current_;
    std::size_t iteration_ = 0;
};

}  // namespace cggm

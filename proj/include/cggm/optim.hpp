// SPDX-License-Identifier: Apache-2.0

/// \file optim.hpp
/// Optimizers over named parameter groups with per-group learning-rate
/// overrides, an optional global gradient-norm clip, and step/cosine
/// schedules. The plain gd rule composed with gradient scaling reproduces
/// scaled descent exactly; the adaptive rules consume the scaled gradient.

#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cggm/model.hpp"
#include "cggm/tensor.hpp"

namespace cggm {

enum class OptKind : std::uint8_t { gd = 0, sgd_momentum = 1, adam = 2, adamw = 3 };

enum class ScheduleKind : std::uint8_t { none = 0, step_decay = 1, cosine = 2 };

struct ScheduleConfig {
    ScheduleKind kind = ScheduleKind::none;
    double step_factor = 0.1;        // step_decay: lr multiplier per interval
    std::size_t step_interval = 100; // step_decay: steps between decays
    std::size_t warmup_steps = 0;    // cosine: linear warm-up length
    std::size_t total_steps = 1;     // cosine: horizon

    /// Learning-rate multiplier at 0-based step t.
    double multiplier(std::size_t t) const {
        switch (kind) {
            case ScheduleKind::none:
                return 1.0;
            case ScheduleKind::step_decay:
                return std::pow(step_factor, static_cast<double>(t / step_interval));
            case ScheduleKind::cosine: {
                if (t < warmup_steps)
                    return static_cast<double>(t + 1) / static_cast<double>(warmup_steps);
                std::size_t span = total_steps > warmup_steps ? total_steps - warmup_steps : 1;
                double progress =
                    std::min(1.0, static_cast<double>(t - warmup_steps) / static_cast<double>(span));
                return 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
            }
        }
        return 1.0;
    }
};

struct OptimizerConfig {
    OptKind kind = OptKind::gd;
    double lr = 1e-3;
    std::map<std::string, double> group_lr;  // per-group overrides by name
    double momentum = 0.9;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.0;               // decoupled (adamw)
    std::optional<double> clip_norm;         // global gradient-norm threshold
    ScheduleConfig schedule;

    void validate() const {
        if (lr <= 0.0) throw ConfigError("learning rate must be positive");
        if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
            throw ConfigError("adam betas must lie in [0, 1)");
        if (clip_norm && *clip_norm <= 0.0)
            throw ConfigError("gradient clip threshold must be positive");
        for (const auto& [name, glr] : group_lr)
            if (glr < 0.0) throw ConfigError("group learning rate for '" + name + "' is negative");
    }
};

class Optimizer {
public:
    Optimizer(const MultimodalModel& model, OptimizerConfig cfg)
        : Optimizer(model.groups(), std::move(cfg)) {}

    Optimizer(std::vector<ParamGroup> groups, OptimizerConfig cfg)
        : cfg_(std::move(cfg)), groups_(std::move(groups)) {
        cfg_.validate();
        if (cfg_.kind != OptKind::gd) {
            for (auto& g : groups_) {
                auto& slot = state_[g.name];
                for (auto& p : g.params) {
                    slot.m.emplace_back(p.numel(), 0.0);
                    slot.v.emplace_back(p.numel(), 0.0);
                }
            }
        }
    }

    const OptimizerConfig& config() const { return cfg_; }
    std::size_t steps_taken() const { return step_count_; }

    /// Clears every gradient buffer; idempotent.
    void zero_grad() {
        for (auto& g : groups_)
            for (auto& p : g.params) p.clear_grad();
    }

    /// Applies one update. Every parameter must hold a gradient.
    void step() {
        for (auto& g : groups_)
            for (auto& p : g.params)
                if (!p.has_grad())
                    throw GraphError("optimizer step with missing gradient in group '" + g.name +
                                     "'");
        if (cfg_.clip_norm) clip_all(*cfg_.clip_norm);

        double mult = cfg_.schedule.multiplier(step_count_);
        for (auto& g : groups_) {
            double lr = base_lr(g.name) * mult;
            auto* slot = cfg_.kind == OptKind::gd ? nullptr : &state_[g.name];
            for (std::size_t pi = 0; pi < g.params.size(); ++pi)
                update_param(g.params[pi], lr, slot, pi);
        }
        ++step_count_;
    }

    double base_lr(const std::string& group) const {
        auto it = cfg_.group_lr.find(group);
        return it != cfg_.group_lr.end() ? it->second : cfg_.lr;
    }

private:
    struct GroupState {
        std::vector<std::vector<double>> m;
        std::vector<std::vector<double>> v;
    };

    void clip_all(double threshold) {
        double sq = 0.0;
        for (auto& g : groups_)
            for (auto& p : g.params)
                for (double x : p.grad()) sq += x * x;
        double norm = std::sqrt(sq);
        if (norm <= threshold) return;
        double factor = threshold / norm;
        for (auto& g : groups_)
            for (auto& p : g.params)
                for (auto& x : p.mutable_grad()) x *= factor;
    }

    void update_param(Tensor& p, double lr, GroupState* slot, std::size_t pi) {
        auto& theta = p.mutable_values();
        const auto& grad = p.grad();
        switch (cfg_.kind) {
            case OptKind::gd:
                for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= lr * grad[i];
                break;
            case OptKind::sgd_momentum: {
                auto& vel = slot->m[pi];
                for (std::size_t i = 0; i < theta.size(); ++i) {
                    vel[i] = cfg_.momentum * vel[i] + grad[i];
                    theta[i] -= lr * vel[i];
                }
                break;
            }
            case OptKind::adam:
            case OptKind::adamw: {
                auto& m = slot->m[pi];
                auto& v = slot->v[pi];
                double t = static_cast<double>(step_count_ + 1);
                double bc1 = 1.0 - std::pow(cfg_.beta1, t);
                double bc2 = 1.0 - std::pow(cfg_.beta2, t);
                for (std::size_t i = 0; i < theta.size(); ++i) {
                    m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * grad[i];
                    v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * grad[i] * grad[i];
                    double mhat = m[i] / bc1;
                    double vhat = v[i] / bc2;
                    if (cfg_.kind == OptKind::adamw)
                        theta[i] -= lr * cfg_.weight_decay * theta[i];
                    theta[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.epsilon);
                }
                break;
            }
        }
    }

    OptimizerConfig cfg_;
    std::vector<ParamGroup> groups_;
    std::map<std::string, GroupState> state_;
    std::size_t step_count_ = 0;
};

}  // namespace cggm

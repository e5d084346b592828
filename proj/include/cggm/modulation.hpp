// SPDX-License-Identifier: Apache-2.0

/// \file modulation.hpp
/// Classifier-guided gradient modulation: per-modality balancing terms from
/// utilization deltas, in-place encoder gradient scaling, the gradient
/// direction loss built on closed-form final-layer gradients, and the
/// combined training step.

#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cggm/metrics.hpp"
#include "cggm/model.hpp"
#include "cggm/optim.hpp"
#include "cggm/tensor.hpp"

namespace cggm {

/// Timing of the direction loss inside a step: `current` builds it from this
/// batch's gradients and balancing terms before the single backward;
/// `delayed` weights this batch's gradients by the previous step's terms
/// (first step contributes nothing), mirroring a one-step-late bookkeeping.
enum class LgmTiming : std::uint8_t { current = 0, delayed = 1 };

struct CggmConfig {
    double rho = 1.3;
    double lambda = 0.2;
    double denom_tolerance = 1e-8;
    bool magnitude_enabled = true;
    bool direction_enabled = true;
    LgmTiming lgm_timing = LgmTiming::current;
    DirectionGradScope direction_grad_scope = DirectionGradScope::final_layer;

    void validate() const {
        if (rho <= 0.0) throw ConfigError("rho must be positive");
        if (lambda < 0.0) throw ConfigError("lambda must be nonnegative");
        if (denom_tolerance <= 0.0) throw ConfigError("denom tolerance must be positive");
    }

    // Scaling factors applied to encoder gradients are clamped to [0, rho].
    double clamp_lo() const { return 0.0; }
    double clamp_hi() const { return rho; }
};

struct BalancingTerms {
    std::vector<double> raw;      // unclamped, any sign
    std::vector<double> clamped;  // in [0, rho]
    std::size_t iteration = 0;
};

/// B_i = rho * sum_{k != i} delta_k / sum_k delta_k. A near-zero denominator
/// falls back to the neutral rho*(M-1)/M, which preserves the sum identity;
/// M = 1 degenerates to 0 either way.
inline BalancingTerms balancing_terms(std::span<const double> delta, const CggmConfig& cfg,
                                      std::size_t iteration = 0) {
    cfg.validate();
    if (delta.empty()) throw ConfigError("balancing terms need at least one modality");
    for (double d : delta)
        if (!std::isfinite(d)) throw NumericError("non-finite utilization delta");
    std::size_t m = delta.size();
    double den = 0.0;
    for (double d : delta) den += d;

    BalancingTerms terms;
    terms.iteration = iteration;
    terms.raw.resize(m);
    if (std::fabs(den) <= cfg.denom_tolerance) {
        double neutral = (cfg.rho * static_cast<double>(m - 1)) / static_cast<double>(m);
        for (auto& b : terms.raw) b = neutral;
    } else {
        for (std::size_t i = 0; i < m; ++i) {
            double num = 0.0;
            for (std::size_t k = 0; k < m; ++k)
                if (k != i) num += delta[k];
            terms.raw[i] = (cfg.rho * num) / den;
        }
    }
    terms.clamped.resize(m);
    for (std::size_t i = 0; i < m; ++i)
        terms.clamped[i] = std::min(std::max(terms.raw[i], cfg.clamp_lo()), cfg.clamp_hi());
    return terms;
}

/// Multiplies every gradient element of encoder group i by the clamped
/// factor B_i, in place, before the optimizer step. Other groups untouched.
inline void scale_encoder_gradients(MultimodalModel& model, const BalancingTerms& terms) {
    if (terms.clamped.size() != model.modalities())
        throw ShapeError("balancing term count does not match modality count");
    auto groups = model.groups();
    for (std::size_t i = 0; i < model.modalities(); ++i) {
        double factor = terms.clamped[i];
        for (auto& p : groups[i].params) {
            if (!p.has_grad())
                throw GraphError("encoder gradient missing; run backward before scaling");
            for (auto& g : p.mutable_grad()) g *= factor;
        }
    }
}

/// Flattened final-layer gradients from one batch. The fusion-head vector is
/// differentiable; the classifier vectors are detached, so the direction
/// loss never trains the classifiers.
struct GradSnapshot {
    Tensor fusion_grad;
    std::vector<Tensor> classifier_grads;
};

/// L_gm = (1/M) sum_i (|B_i| - B_i * sim(g_F, g_i)), with raw (unclamped)
/// balancing terms as constants. Nonnegative for any input.
inline Tensor direction_loss(const GradSnapshot& snapshot, std::span<const double> raw_b,
                             const CggmConfig&) {
    std::size_t m = snapshot.classifier_grads.size();
    if (m == 0 || raw_b.size() != m)
        throw ShapeError("direction loss: balancing term count does not match snapshot");
    Tensor acc;
    for (std::size_t i = 0; i < m; ++i) {
        Tensor sim = cosine_similarity(snapshot.fusion_grad, snapshot.classifier_grads[i]);
        Tensor term = sub(Tensor::scalar(std::fabs(raw_b[i])), scale(sim, raw_b[i]));
        acc = i == 0 ? term : add(acc, term);
    }
    return scale(acc, 1.0 / static_cast<double>(m));
}

/// L = L_task + lambda * L_gm.
inline Tensor total_loss(const Tensor& task, const Tensor& lgm, double lambda) {
    if (task.numel() != 1 || lgm.numel() != 1)
        throw ShapeError("total loss expects scalar terms");
    return add(task, scale(lgm, lambda));
}

// ---------------------------------------------------------------------------
// Training step.
// ---------------------------------------------------------------------------

/// One iteration's diagnostics.
struct TrainRecord {
    std::size_t iter = 0;
    double task_loss = 0.0;
    double lgm = 0.0;                 // current-batch value, recorded even when
                                      // the direction term is disabled
    std::vector<double> eps;          // raw per-modality batch metric
    std::vector<double> braw;
    std::vector<double> bclamp;
    std::vector<double> gnorm;        // per-encoder gradient norm, pre-scaling
    std::vector<double> cos;          // sim(g_F, g_i) per modality
};

/// Per-run mutable trainer state (previous balancing terms for the delayed
/// direction-loss timing).
struct TrainerState {
    std::vector<double> prev_raw_b;
    bool has_prev = false;
};

struct StepHooks {
    // MRD support: when set, fusion consumes zeros for flagged modalities.
    // Classifiers always see the raw representations.
    const std::vector<bool>* fusion_drop = nullptr;
};

inline double l2_norm_of_group(const ParamGroup& group) {
    double sq = 0.0;
    for (const auto& p : group.params)
        if (p.has_grad())
            for (double g : p.grad()) sq += g * g;
    return std::sqrt(sq);
}

/// Executes one modulated iteration: forward (encoders, fusion, detached
/// classifiers), batch metrics and balancing terms, closed-form head
/// gradients and the direction loss from the current batch, a single
/// backward over task + classifier + direction losses, encoder gradient
/// scaling, and the optimizer step.
inline TrainRecord training_step(MultimodalModel& model, const std::vector<Tensor>& inputs,
                                 const std::vector<double>& targets, MetricState& metrics,
                                 Optimizer& opt, const CggmConfig& cfg, TrainerState& state,
                                 const StepHooks& hooks = {}) {
    cfg.validate();
    const TaskKind task = model.config().task;
    const std::size_t m = model.modalities();

    // (1) forward
    std::vector<Tensor> hs = model.forward_encoders(inputs);
    std::vector<Tensor> fusion_in = hs;
    if (hooks.fusion_drop) {
        for (std::size_t i = 0; i < m; ++i)
            if ((*hooks.fusion_drop)[i]) fusion_in[i] = Tensor::zeros(hs[i].shape());
    }
    auto [h_fused, prediction] = model.forward_fusion(fusion_in);
    auto classifier_out = model.forward_classifiers(hs);

    // (2) utilization metrics and balancing terms
    MetricKind kind = task == TaskKind::classification ? MetricKind::accuracy : MetricKind::mae;
    std::vector<double> raw_eps(m);
    for (std::size_t i = 0; i < m; ++i)
        raw_eps[i] = evaluate_batch(kind, classifier_out[i].prediction, targets);
    std::vector<double> delta = metrics.update_and_delta(raw_eps);
    BalancingTerms terms = balancing_terms(delta, cfg, metrics.iteration());

    // (3) closed-form final-layer gradients and the direction loss
    Tensor fusion_residual = loss_residual(task, prediction, targets);
    GradSnapshot snapshot;
    snapshot.fusion_grad = head_gradient(h_fused, fusion_residual);
    for (std::size_t i = 0; i < m; ++i) {
        Tensor res = loss_residual(task, classifier_out[i].prediction, targets);
        snapshot.classifier_grads.push_back(
            head_gradient(classifier_out[i].final_input, res).detach());
    }

    TrainRecord rec;
    rec.iter = metrics.iteration() - 1;
    rec.eps = raw_eps;
    rec.braw = terms.raw;
    rec.bclamp = terms.clamped;
    Tensor fusion_grad_value = snapshot.fusion_grad.detach();
    double lgm_diag = 0.0;
    rec.cos.resize(m);
    for (std::size_t i = 0; i < m; ++i) {
        rec.cos[i] = cosine_similarity(fusion_grad_value, snapshot.classifier_grads[i]).value();
        lgm_diag += std::fabs(terms.raw[i]) - terms.raw[i] * rec.cos[i];
    }
    rec.lgm = lgm_diag / static_cast<double>(m);

    // (4) losses and the single backward
    Tensor loss = task_loss(task, prediction, targets);
    rec.task_loss = loss.value();
    for (std::size_t i = 0; i < m; ++i)
        loss = add(loss, task_loss(task, classifier_out[i].prediction, targets));
    if (cfg.direction_enabled && cfg.lambda != 0.0) {
        if (cfg.lgm_timing == LgmTiming::current) {
            loss = add(loss, scale(direction_loss(snapshot, terms.raw, cfg), cfg.lambda));
        } else if (state.has_prev) {
            loss = add(loss, scale(direction_loss(snapshot, state.prev_raw_b, cfg), cfg.lambda));
        }
    }
    opt.zero_grad();
    backward(loss);
    for (auto& p : model.parameters()) p.ensure_grad();  // untouched paths read as zero

    // (5)-(6) pre-scale gradient norms, encoder scaling, optimizer step
    auto groups = model.groups();
    rec.gnorm.resize(m);
    for (std::size_t i = 0; i < m; ++i) rec.gnorm[i] = l2_norm_of_group(groups[i]);
    if (cfg.magnitude_enabled) scale_encoder_gradients(model, terms);
    opt.step();

    state.prev_raw_b = terms.raw;
    state.has_prev = true;

    for (double v : rec.eps)
        if (!std::isfinite(v)) throw NumericError("non-finite batch metric");
    if (!std::isfinite(rec.task_loss) || !std::isfinite(rec.lgm))
        throw NumericError("non-finite loss in train record");
    return rec;
}

}  // namespace cggm

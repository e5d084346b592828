// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>
#include <vector>

#include "cggm/data.hpp"
#include "cggm/modulation.hpp"

using namespace cggm;

namespace {

CggmConfig config(double rho, double lambda = 0.0) {
    CggmConfig cfg;
    cfg.rho = rho;
    cfg.lambda = lambda;
    return cfg;
}

ModelConfig tiny_model_config(std::size_t modalities, std::uint64_t seed,
                              TaskKind task = TaskKind::classification) {
    ModelConfig cfg;
    cfg.modalities = modalities;
    cfg.input_dims.assign(modalities, 5);
    cfg.hidden_dim = 8;
    cfg.encoder_depth = 1;
    cfg.fusion_depth = 1;
    cfg.classifier_attn_layers = 1;
    cfg.attn_tokens = 2;
    cfg.attn_heads = 1;
    cfg.output_dim = task == TaskKind::regression ? 1 : 3;
    cfg.task = task;
    cfg.seed = seed;
    return cfg;
}

Batch random_batch(const ModelConfig& cfg, std::size_t rows, std::uint64_t seed) {
    Batch b;
    b.size = rows;
    Rng rng(seed);
    for (std::size_t i = 0; i < cfg.modalities; ++i) {
        std::vector<double> v(rows * cfg.input_dims[i]);
        for (auto& x : v) x = rng.uniform(-1, 1);
        b.inputs.push_back(Tensor::from_values({rows, cfg.input_dims[i]}, std::move(v)));
    }
    b.targets.resize(rows);
    for (auto& t : b.targets)
        t = cfg.task == TaskKind::classification ? static_cast<double>(rng.below(cfg.output_dim))
                                                 : rng.uniform(-3, 3);
    return b;
}

std::vector<std::vector<double>> snapshot_params(const MultimodalModel& model) {
    std::vector<std::vector<double>> out;
    for (const auto& p : model.parameters()) out.push_back(p.values());
    return out;
}

}  // namespace

TEST_CASE("balancing terms follow the weighted-complement rule") {
    SECTION("three modalities, direct evaluation") {
        auto t = balancing_terms(std::vector<double>{0.5, 0.3, 0.2}, config(1.0));
        CHECK(t.raw[0] == Catch::Approx(0.5).margin(1e-15));
        CHECK(t.raw[1] == Catch::Approx(0.7).margin(1e-15));
        CHECK(t.raw[2] == Catch::Approx(0.8).margin(1e-15));
        CHECK(t.raw[0] + t.raw[1] + t.raw[2] == Catch::Approx(2.0).margin(1e-9));
    }
    SECTION("symmetry") {
        auto t = balancing_terms(std::vector<double>{0.4, 0.4}, config(1.3));
        CHECK(t.raw[0] == Catch::Approx(0.65).margin(1e-15));
        CHECK(t.raw[1] == Catch::Approx(0.65).margin(1e-15));
    }
    SECTION("mixed signs produce signed raw terms, clamped to [0, rho]") {
        auto t = balancing_terms(std::vector<double>{0.2, -0.2, 0.1}, config(1.0));
        CHECK(t.raw[0] == Catch::Approx(-1.0).margin(1e-12));
        CHECK(t.raw[1] == Catch::Approx(3.0).margin(1e-12));
        CHECK(t.raw[2] == Catch::Approx(0.0).margin(1e-12));
        CHECK(t.clamped == std::vector<double>{0.0, 1.0, 0.0});
    }
}

TEST_CASE("balancing term edge cases") {
    SECTION("neutral fallback triggers exactly at the tolerance") {
        CggmConfig cfg = config(1.5);
        cfg.denom_tolerance = 1e-8;
        auto inside = balancing_terms(std::vector<double>{5e-9, 4e-9}, cfg);
        CHECK(inside.raw[0] == Catch::Approx(1.5 * 0.5).margin(1e-15));  // fallback
        auto outside = balancing_terms(std::vector<double>{1e-8, 1e-8}, cfg);
        CHECK(outside.raw[0] == Catch::Approx(0.75).margin(1e-12));  // live formula
    }
    SECTION("single modality degenerates to zero") {
        CHECK(balancing_terms(std::vector<double>{0.3}, config(2.0)).raw[0] == 0.0);
        CHECK(balancing_terms(std::vector<double>{0.0}, config(2.0)).raw[0] == 0.0);
    }
    SECTION("non-finite deltas are rejected") {
        CHECK_THROWS_AS(
            balancing_terms(std::vector<double>{0.1, std::numeric_limits<double>::quiet_NaN()},
                            config(1.0)),
            NumericError);
    }
    SECTION("equal deltas give exactly 1.0 at the neutral rho") {
        // M = 2, rho = 2: B = (2 * c) / (2c) is exact for any c != 0.
        Rng rng(17);
        for (int i = 0; i < 50; ++i) {
            double c = rng.uniform(1e-6, 1.0);
            auto t = balancing_terms(std::vector<double>{c, c}, config(2.0));
            CHECK(t.raw[0] == 1.0);
            CHECK(t.raw[1] == 1.0);
        }
        // M = 3 with unit deltas and rho = 1.5.
        auto t3 = balancing_terms(std::vector<double>{1.0, 1.0, 1.0}, config(1.5));
        CHECK(t3.raw == std::vector<double>{1.0, 1.0, 1.0});
    }
}

TEST_CASE("balancing term algebra over random draws") {
    Rng rng(23);
    for (int trial = 0; trial < 500; ++trial) {
        std::size_t m = 1 + rng.below(6);
        std::vector<double> delta(m);
        for (auto& d : delta) d = rng.uniform(-1, 1);
        CggmConfig cfg = config(rng.uniform(0.2, 2.5));
        auto terms = balancing_terms(delta, cfg);
        double den = 0;
        for (double d : delta) den += d;
        if (std::fabs(den) > cfg.denom_tolerance) {
            double sum = 0;
            for (double b : terms.raw) sum += b;
            CHECK(std::fabs(sum - cfg.rho * static_cast<double>(m - 1)) <= 1e-9);
            if (den > 0) {
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < m; ++j) {
                        if (delta[i] > delta[j]) CHECK(terms.raw[i] < terms.raw[j]);
                    }
            }
        }
        for (std::size_t i = 0; i < m; ++i) {
            CHECK(terms.clamped[i] >= 0.0);
            CHECK(terms.clamped[i] <= cfg.rho);
        }
    }
}

TEST_CASE("direction loss values") {
    auto vec = [](std::vector<double> v) {
        Shape s{v.size()};
        return Tensor::from_values(std::move(s), std::move(v));
    };
    SECTION("perfect alignment annihilates every term") {
        GradSnapshot snap;
        snap.fusion_grad = vec({1, 2, 3});
        snap.classifier_grads = {vec({2, 4, 6}), vec({0.5, 1, 1.5})};
        Tensor l = direction_loss(snap, std::vector<double>{0.5, 0.5}, config(1.0));
        CHECK(std::fabs(l.value()) <= 1e-9);
    }
    SECTION("orthogonal gradients cost the full weight") {
        GradSnapshot snap;
        snap.fusion_grad = vec({1, 0});
        snap.classifier_grads = {vec({0, 1}), vec({0, -2})};
        Tensor l = direction_loss(snap, std::vector<double>{1.0, 1.0}, config(1.0));
        CHECK(l.value() == Catch::Approx(1.0).margin(1e-12));
    }
    SECTION("negative weight prefers anti-alignment") {
        GradSnapshot snap;
        snap.fusion_grad = vec({1, 1});
        snap.classifier_grads = {vec({-1, -1})};
        Tensor l = direction_loss(snap, std::vector<double>{-1.0}, config(1.0));
        CHECK(std::fabs(l.value()) <= 1e-9);
    }
    SECTION("nonnegative over random draws") {
        Rng rng(31);
        for (int trial = 0; trial < 200; ++trial) {
            std::size_t m = 1 + rng.below(4);
            GradSnapshot snap;
            std::vector<double> g(10);
            for (auto& x : g) x = rng.uniform(-1, 1);
            snap.fusion_grad = vec(g);
            std::vector<double> b(m);
            for (auto& x : b) x = rng.uniform(-3, 3);
            for (std::size_t i = 0; i < m; ++i) {
                std::vector<double> gi(10);
                for (auto& x : gi) x = rng.uniform(-1, 1);
                snap.classifier_grads.push_back(vec(gi));
            }
            CHECK(direction_loss(snap, b, config(1.0)).value() >= -1e-9);
        }
    }
    SECTION("gradient reaches only the fusion side") {
        Tensor f = Tensor::parameter({3}, {1.0, 0.5, -0.2});
        Tensor c = Tensor::parameter({3}, {0.4, -1.0, 0.3});
        GradSnapshot snap;
        snap.fusion_grad = scale(f, 2.0);
        snap.classifier_grads = {scale(c, 1.5).detach()};
        Tensor l = direction_loss(snap, std::vector<double>{1.0}, config(1.0));
        backward(l);
        REQUIRE(f.has_grad());
        double fsum = 0;
        for (double g : f.grad()) fsum += std::fabs(g);
        CHECK(fsum > 0.0);
        CHECK_FALSE(c.has_grad());
    }
}

TEST_CASE("total loss") {
    Tensor task = Tensor::scalar(0.7);
    Tensor lgm = Tensor::scalar(0.2);
    CHECK(total_loss(task, lgm, 0.15).value() == Catch::Approx(0.73).margin(1e-15));
    CHECK(total_loss(task, lgm, 0.0).value() == 0.7);
    CHECK(total_loss(task, Tensor::scalar(0.0), 1.0).value() == 0.7);
}

TEST_CASE("encoder gradient scaling") {
    auto cfg = tiny_model_config(2, 3);
    auto model = MultimodalModel::build(cfg);
    auto batch = random_batch(cfg, 4, 9);

    auto hs = model.forward_encoders(batch.inputs);
    auto [h_fused, pred] = model.forward_fusion(hs);
    for (auto& p : model.parameters()) p.clear_grad();
    backward(task_loss(cfg.task, pred, batch.targets));

    auto groups = model.groups();
    std::vector<double> enc0_before, fusion_before;
    for (auto& p : groups[0].params)
        enc0_before.insert(enc0_before.end(), p.grad().begin(), p.grad().end());
    for (auto& p : groups[2].params)
        fusion_before.insert(fusion_before.end(), p.grad().begin(), p.grad().end());

    BalancingTerms terms;
    terms.raw = {0.5, 0.0};
    terms.clamped = {0.5, 0.0};
    scale_encoder_gradients(model, terms);

    std::vector<double> enc0_after, enc1_after, fusion_after;
    for (auto& p : groups[0].params)
        enc0_after.insert(enc0_after.end(), p.grad().begin(), p.grad().end());
    for (auto& p : groups[1].params)
        enc1_after.insert(enc1_after.end(), p.grad().begin(), p.grad().end());
    for (auto& p : groups[2].params)
        fusion_after.insert(fusion_after.end(), p.grad().begin(), p.grad().end());

    for (std::size_t i = 0; i < enc0_before.size(); ++i)
        CHECK(enc0_after[i] == 0.5 * enc0_before[i]);
    for (double g : enc1_after) CHECK(g == 0.0);
    CHECK(fusion_after == fusion_before);  // untouched groups bit-identical

    SECTION("missing gradients are a contract violation") {
        for (auto& p : model.parameters()) p.clear_grad();
        CHECK_THROWS_AS(scale_encoder_gradients(model, terms), GraphError);
    }
}

TEST_CASE("B = 0 freezes the encoder under plain descent") {
    auto cfg = tiny_model_config(2, 5);
    auto model = MultimodalModel::build(cfg);
    auto batch = random_batch(cfg, 4, 13);
    OptimizerConfig ocfg;
    ocfg.kind = OptKind::gd;
    ocfg.lr = 0.05;
    Optimizer opt(model, ocfg);
    MetricState metrics(2, MetricKind::accuracy);
    CggmConfig ccfg = config(1.0, 0.0);
    ccfg.magnitude_enabled = true;
    TrainerState state;

    auto before = snapshot_params(model);
    auto hs = model.forward_encoders(batch.inputs);
    auto [h_fused, pred] = model.forward_fusion(hs);
    opt.zero_grad();
    Tensor loss = task_loss(cfg.task, pred, batch.targets);
    backward(loss);
    for (auto& p : model.parameters()) p.ensure_grad();
    BalancingTerms terms;
    terms.raw = {0.0, 1.0};
    terms.clamped = {0.0, 1.0};
    scale_encoder_gradients(model, terms);
    opt.step();
    auto after = snapshot_params(model);

    auto groups = model.groups();
    std::size_t cursor = 0;
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
        for (auto& p : groups[gi].params) {
            (void)p;
            if (groups[gi].name == "encoder_1")
                CHECK(after[cursor] == before[cursor]);
            ++cursor;
        }
    }
    (void)state;
    (void)metrics;
    (void)ccfg;
}

TEST_CASE("training step") {
    auto cfg = tiny_model_config(2, 11);
    auto mk_run = [&](CggmConfig ccfg, std::size_t steps, std::uint64_t batch_seed = 40) {
        auto model = MultimodalModel::build(cfg);
        OptimizerConfig ocfg;
        ocfg.kind = OptKind::adam;
        ocfg.lr = 5e-3;
        Optimizer opt(model, ocfg);
        MetricState metrics(2, MetricKind::accuracy);
        TrainerState state;
        std::vector<TrainRecord> recs;
        for (std::size_t t = 0; t < steps; ++t) {
            Batch b = random_batch(cfg, 6, mix_seed(batch_seed, t));
            recs.push_back(
                training_step(model, b.inputs, b.targets, metrics, opt, ccfg, state));
        }
        return std::make_pair(snapshot_params(model), recs);
    };

    SECTION("single backward per iteration") {
        auto model = MultimodalModel::build(cfg);
        OptimizerConfig ocfg;
        Optimizer opt(model, ocfg);
        MetricState metrics(2, MetricKind::accuracy);
        TrainerState state;
        Batch b = random_batch(cfg, 6, 91);
        auto before = backward_invocations();
        training_step(model, b.inputs, b.targets, metrics, opt, config(1.3, 0.2), state);
        CHECK(backward_invocations() - before == 1);
    }

    SECTION("deterministic across identical runs") {
        auto [pa, ra] = mk_run(config(1.3, 0.2), 3);
        auto [pb, rb] = mk_run(config(1.3, 0.2), 3);
        CHECK(pa == pb);
        REQUIRE(ra.size() == rb.size());
        for (std::size_t i = 0; i < ra.size(); ++i) {
            CHECK(ra[i].task_loss == rb[i].task_loss);
            CHECK(ra[i].lgm == rb[i].lgm);
            CHECK(ra[i].eps == rb[i].eps);
            CHECK(ra[i].braw == rb[i].braw);
            CHECK(ra[i].bclamp == rb[i].bclamp);
            CHECK(ra[i].gnorm == rb[i].gnorm);
            CHECK(ra[i].cos == rb[i].cos);
        }
    }

    SECTION("both switches off match plain joint training bit-for-bit") {
        CggmConfig off = config(1.3, 0.2);
        off.magnitude_enabled = false;
        off.direction_enabled = false;
        auto [pa, ra] = mk_run(off, 3);

        // Reference: the same loop written without any modulation machinery.
        auto model = MultimodalModel::build(cfg);
        OptimizerConfig ocfg;
        ocfg.kind = OptKind::adam;
        ocfg.lr = 5e-3;
        Optimizer opt(model, ocfg);
        for (std::size_t t = 0; t < 3; ++t) {
            Batch b = random_batch(cfg, 6, mix_seed(40, t));
            auto hs = model.forward_encoders(b.inputs);
            auto [h_fused, pred] = model.forward_fusion(hs);
            Tensor loss = task_loss(cfg.task, pred, b.targets);
            for (const auto& c : model.forward_classifiers(hs))
                loss = add(loss, task_loss(cfg.task, c.prediction, b.targets));
            opt.zero_grad();
            backward(loss);
            opt.step();
        }
        CHECK(pa == snapshot_params(model));
        CHECK(ra.back().lgm >= 0.0);  // diagnostics still recorded
    }

    SECTION("direction loss changes the update when enabled") {
        CggmConfig on = config(1.3, 0.5);
        on.magnitude_enabled = false;
        CggmConfig off = config(1.3, 0.0);
        off.magnitude_enabled = false;
        auto [pa, ra] = mk_run(on, 2);
        auto [pb, rb] = mk_run(off, 2);
        CHECK(pa != pb);
    }

    SECTION("delayed timing skips the first step") {
        CggmConfig delayed = config(1.3, 0.5);
        delayed.magnitude_enabled = false;
        delayed.lgm_timing = LgmTiming::delayed;
        CggmConfig off = config(1.3, 0.0);
        off.magnitude_enabled = false;
        auto [pa, ra] = mk_run(delayed, 1);
        auto [pb, rb] = mk_run(off, 1);
        CHECK(pa == pb);  // one step: delayed term contributed nothing
        auto [pc, rc] = mk_run(delayed, 2);
        auto [pd, rd] = mk_run(off, 2);
        CHECK(pc != pd);  // second step uses the stored terms
    }

    SECTION("regression task runs end to end") {
        auto rcfg = tiny_model_config(2, 19, TaskKind::regression);
        auto model = MultimodalModel::build(rcfg);
        OptimizerConfig ocfg;
        Optimizer opt(model, ocfg);
        MetricState metrics(2, MetricKind::mae);
        TrainerState state;
        Batch b = random_batch(rcfg, 5, 77);
        auto rec = training_step(model, b.inputs, b.targets, metrics, opt, config(1.3, 0.2), state);
        CHECK(rec.eps.size() == 2);
        CHECK(std::isfinite(rec.task_loss));
    }

    SECTION("mrd hook zeroes fusion inputs without touching classifier metrics") {
        auto model = MultimodalModel::build(cfg);
        OptimizerConfig ocfg;
        Optimizer opt(model, ocfg);
        MetricState metrics(2, MetricKind::accuracy);
        TrainerState state;
        Batch b = random_batch(cfg, 6, 55);
        std::vector<bool> drop{true, false};
        StepHooks hooks;
        hooks.fusion_drop = &drop;
        CggmConfig off = config(1.0, 0.0);
        off.magnitude_enabled = false;
        off.direction_enabled = false;
        auto rec = training_step(model, b.inputs, b.targets, metrics, opt, off, state, hooks);

        // Classifier metrics computed from raw representations: same value as
        // an un-dropped forward pass on an identical twin model.
        auto twin = MultimodalModel::build(cfg);
        auto hs = twin.forward_encoders(b.inputs);
        auto cls = twin.forward_classifiers(hs);
        double expect = evaluate_batch(MetricKind::accuracy, cls[0].prediction, b.targets);
        CHECK(rec.eps[0] == expect);
    }
}

TEST_CASE("neutral-point scaling is bit-exact") {
    // Equal deltas with rho = M/(M-1) give scale factors of exactly 1.0, so a
    // scaled step must equal an unscaled step bit for bit.
    auto terms = balancing_terms(std::vector<double>{0.37, 0.37}, config(2.0));
    REQUIRE(terms.clamped == std::vector<double>{1.0, 1.0});

    auto cfg = tiny_model_config(2, 29);
    auto run = [&](bool apply_scaling) {
        auto model = MultimodalModel::build(cfg);
        auto batch = random_batch(cfg, 4, 31);
        auto hs = model.forward_encoders(batch.inputs);
        auto [h_fused, pred] = model.forward_fusion(hs);
        for (auto& p : model.parameters()) p.clear_grad();
        backward(task_loss(cfg.task, pred, batch.targets));
        for (auto& p : model.parameters()) p.ensure_grad();
        if (apply_scaling) scale_encoder_gradients(model, terms);
        OptimizerConfig ocfg;
        ocfg.kind = OptKind::gd;
        ocfg.lr = 0.1;
        Optimizer opt(model, ocfg);
        opt.step();
        return snapshot_params(model);
    };
    CHECK(run(true) == run(false));
}

// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "cggm/optim.hpp"

using namespace cggm;

namespace {

// A one-parameter group with a preset gradient.
std::vector<ParamGroup> single_group(double theta, double grad, const std::string& name = "g") {
    Tensor p = Tensor::parameter({1}, {theta});
    Tensor loss = scale(p, grad);
    backward(loss);
    return {{name, {p}}};
}

}  // namespace

TEST_CASE("plain descent matches the update rule by hand") {
    auto groups = single_group(1.0, 2.0);
    OptimizerConfig cfg;
    cfg.kind = OptKind::gd;
    cfg.lr = 0.1;
    Optimizer opt(groups, cfg);
    opt.step();
    CHECK(groups[0].params[0].values()[0] == 0.8);
}

TEST_CASE("descent composed with gradient scaling reproduces scaled descent exactly") {
    Rng rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        double theta = rng.uniform(-2, 2);
        double grad = rng.uniform(-3, 3);
        double alpha = rng.uniform(1e-4, 0.5);
        double b = rng.uniform(0.0, 2.0);

        auto groups = single_group(theta, grad);
        groups[0].params[0].mutable_grad()[0] *= b;  // modulation step
        OptimizerConfig cfg;
        cfg.kind = OptKind::gd;
        cfg.lr = alpha;
        Optimizer opt(groups, cfg);
        opt.step();
        CHECK(groups[0].params[0].values()[0] == theta - alpha * (b * grad));
    }
}

TEST_CASE("adam first step has magnitude about lr") {
    for (double g : {0.001, 0.5, 40.0}) {
        auto groups = single_group(1.0, g);
        OptimizerConfig cfg;
        cfg.kind = OptKind::adam;
        cfg.lr = 0.01;
        Optimizer opt(groups, cfg);
        opt.step();
        double delta = std::fabs(groups[0].params[0].values()[0] - 1.0);
        CHECK(delta == Catch::Approx(0.01).epsilon(1e-3));
    }
}

TEST_CASE("adamw applies decoupled weight decay") {
    auto groups = single_group(1.0, 0.0);
    groups[0].params[0].mutable_grad()[0] = 0.0;
    OptimizerConfig cfg;
    cfg.kind = OptKind::adamw;
    cfg.lr = 0.1;
    cfg.weight_decay = 0.5;
    Optimizer opt(groups, cfg);
    opt.step();
    CHECK(groups[0].params[0].values()[0] == Catch::Approx(0.95).margin(1e-12));
}

TEST_CASE("sgd momentum accumulates velocity") {
    auto groups = single_group(0.0, 1.0);
    OptimizerConfig cfg;
    cfg.kind = OptKind::sgd_momentum;
    cfg.lr = 0.1;
    cfg.momentum = 0.9;
    Optimizer opt(groups, cfg);
    opt.step();  // v = 1, theta = -0.1
    CHECK(groups[0].params[0].values()[0] == Catch::Approx(-0.1).margin(1e-15));
    groups[0].params[0].clear_grad();
    Tensor p = groups[0].params[0];
    backward(scale(p, 1.0));  // fresh grad 1
    opt.step();  // v = 1.9, theta = -0.1 - 0.19
    CHECK(groups[0].params[0].values()[0] == Catch::Approx(-0.29).margin(1e-12));
}

TEST_CASE("per-group learning rates stay isolated") {
    auto a = single_group(1.0, 1.0, "a");
    auto b = single_group(1.0, 1.0, "b");
    std::vector<ParamGroup> groups{a[0], b[0]};
    OptimizerConfig cfg;
    cfg.kind = OptKind::gd;
    cfg.lr = 0.1;
    cfg.group_lr["b"] = 0.0;
    Optimizer opt(groups, cfg);
    opt.step();
    CHECK(groups[0].params[0].values()[0] == Catch::Approx(0.9).margin(1e-15));
    CHECK(groups[1].params[0].values()[0] == 1.0);  // lr 0: unchanged
}

TEST_CASE("zero_grad clears and is idempotent") {
    auto groups = single_group(1.0, 2.0);
    OptimizerConfig cfg;
    Optimizer opt(groups, cfg);
    opt.zero_grad();
    CHECK_FALSE(groups[0].params[0].has_grad());
    opt.zero_grad();  // harmless
    CHECK_FALSE(groups[0].params[0].has_grad());
    CHECK_THROWS_AS(opt.step(), GraphError);  // missing grads

    SECTION("backward, zero, backward equals a single backward") {
        Tensor p = groups[0].params[0];
        Tensor loss = scale(p, 3.0);
        backward(loss);
        p.clear_grad();
        backward(loss);
        CHECK(p.grad() == std::vector<double>{3.0});
    }
}

TEST_CASE("global norm clip rescales the whole gradient vector") {
    Tensor p1 = Tensor::parameter({2}, {0.0, 0.0});
    Tensor p2 = Tensor::parameter({1}, {0.0});
    backward(sum(mul(p1, Tensor::from_values({2}, {3.0, 0.0}))));
    backward(scale(p2, 4.0));
    std::vector<ParamGroup> groups{{"a", {p1}}, {"b", {p2}}};
    OptimizerConfig cfg;
    cfg.kind = OptKind::gd;
    cfg.lr = 1.0;
    cfg.clip_norm = 1.0;  // full norm is 5
    Optimizer opt(groups, cfg);
    opt.step();
    CHECK(p1.values()[0] == Catch::Approx(-0.6).margin(1e-12));
    CHECK(p2.values()[0] == Catch::Approx(-0.8).margin(1e-12));

    SECTION("below the threshold nothing changes") {
        Tensor q = Tensor::parameter({1}, {0.0});
        backward(scale(q, 0.5));
        std::vector<ParamGroup> g2{{"q", {q}}};
        OptimizerConfig c2;
        c2.kind = OptKind::gd;
        c2.lr = 1.0;
        c2.clip_norm = 1.0;
        Optimizer o2(g2, c2);
        o2.step();
        CHECK(q.values()[0] == -0.5);
    }
}

TEST_CASE("schedules") {
    SECTION("step decay") {
        ScheduleConfig s;
        s.kind = ScheduleKind::step_decay;
        s.step_factor = 0.5;
        s.step_interval = 10;
        CHECK(s.multiplier(0) == 1.0);
        CHECK(s.multiplier(9) == 1.0);
        CHECK(s.multiplier(10) == 0.5);
        CHECK(s.multiplier(25) == 0.25);
    }
    SECTION("cosine with linear warm-up") {
        ScheduleConfig s;
        s.kind = ScheduleKind::cosine;
        s.warmup_steps = 4;
        s.total_steps = 12;
        CHECK(s.multiplier(0) == Catch::Approx(0.25));
        CHECK(s.multiplier(3) == Catch::Approx(1.0));
        CHECK(s.multiplier(4) == Catch::Approx(1.0));
        CHECK(s.multiplier(8) == Catch::Approx(0.5).margin(1e-12));
        CHECK(s.multiplier(12) == Catch::Approx(0.0).margin(1e-12));
        CHECK(s.multiplier(40) == Catch::Approx(0.0).margin(1e-12));
    }
}

TEST_CASE("config validation") {
    OptimizerConfig cfg;
    cfg.lr = 0.0;
    CHECK_THROWS_AS(Optimizer(std::vector<ParamGroup>{}, cfg), ConfigError);
    cfg = OptimizerConfig{};
    cfg.clip_norm = -1.0;
    CHECK_THROWS_AS(Optimizer(std::vector<ParamGroup>{}, cfg), ConfigError);
}

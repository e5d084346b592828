// SPDX-License-Identifier: Apache-2.0

/// \file harness.hpp
/// Experiment orchestration: strategy runs (joint, unimodal, MSLR, MRD,
/// CGGM), per-iteration diagnostics written as CSV, deterministic summary
/// JSON, the classifier-vs-unimodal gradient proximity probe, and rho/lambda
/// sweeps. Spawned runs own all of their state, so sweep and compare may run
/// configurations on parallel threads.

#pragma once

#include <json.hpp>

#include <array>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "cggm/data.hpp"
#include "cggm/metrics.hpp"
#include "cggm/model.hpp"
#include "cggm/modulation.hpp"
#include "cggm/optim.hpp"

namespace cggm {

enum class Strategy : std::uint8_t { joint = 0, unimodal = 1, mslr = 2, mrd = 3, cggm = 4 };

inline std::string to_string(Strategy s) {
    switch (s) {
        case Strategy::joint: return "joint";
        case Strategy::unimodal: return "unimodal";
        case Strategy::mslr: return "mslr";
        case Strategy::mrd: return "mrd";
        case Strategy::cggm: return "cggm";
    }
    return "?";
}

inline Strategy strategy_from_string(const std::string& s) {
    if (s == "joint") return Strategy::joint;
    if (s == "unimodal") return Strategy::unimodal;
    if (s == "mslr") return Strategy::mslr;
    if (s == "mrd") return Strategy::mrd;
    if (s == "cggm") return Strategy::cggm;
    throw ConfigError("unknown strategy '" + s + "'");
}

struct ExperimentConfig {
    SyntheticSpec data;
    std::string dataset_file;      // when set, load instead of generate
    ModelConfig model;
    OptimizerConfig optimizer;
    double classifier_lr = 5e-4;   // dedicated classifier group learning rate
    CggmConfig cggm;
    Strategy strategy = Strategy::cggm;
    std::size_t unimodal_index = 1;        // 1-based
    double mrd_drop_prob = 0.3;
    std::vector<double> mslr_lrs;          // per-encoder learning rates
    std::size_t epochs = 10;
    std::size_t batch_size = 64;
    std::size_t eval_interval = 1;         // epochs between test evaluations
    std::uint64_t seed = 7;
    std::string out_dir = "out";

    void validate() const {
        data.validate();
        model.validate();
        optimizer.validate();
        cggm.validate();
        if (classifier_lr < 0) throw ConfigError("classifier lr must be nonnegative");
        if (epochs == 0) throw ConfigError("epochs must be >= 1");
        if (batch_size == 0) throw ConfigError("batch size must be >= 1");
        if (strategy == Strategy::unimodal &&
            (unimodal_index < 1 || unimodal_index > data.modalities))
            throw ConfigError("unimodal index out of range");
        if (strategy == Strategy::mrd && (mrd_drop_prob < 0.0 || mrd_drop_prob > 1.0))
            throw ConfigError("mrd drop probability must lie in [0, 1]");
        if (strategy == Strategy::mslr && mslr_lrs.size() != data.modalities)
            throw ConfigError("mslr needs one learning rate per modality");
        if (model.modalities != data.modalities)
            throw ConfigError("model and data modality counts differ");
    }
};

// ---------------------------------------------------------------------------
// Config files: flat `key = value` lines, '#' comments, unknown keys rejected.
// ---------------------------------------------------------------------------

namespace detail {

inline std::string trim(const std::string& s) {
    auto b = s.find_first_not_of(" \t\r\n");
    auto e = s.find_last_not_of(" \t\r\n");
    return b == std::string::npos ? "" : s.substr(b, e - b + 1);
}

inline std::vector<double> parse_double_list(const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) continue;
        out.push_back(std::stod(item));
    }
    return out;
}

inline std::vector<std::size_t> parse_size_list(const std::string& s) {
    std::vector<std::size_t> out;
    for (double v : parse_double_list(s)) {
        if (v < 0 || v != std::floor(v)) throw ConfigError("expected nonnegative integers: " + s);
        out.push_back(static_cast<std::size_t>(v));
    }
    return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "on" || v == "true" || v == "1") return true;
    if (v == "off" || v == "false" || v == "0") return false;
    throw ConfigError("key '" + key + "' expects on/off, got '" + v + "'");
}

inline double fin(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "' expects a number, got '" + v + "'");
    }
}

inline std::size_t uin(const std::string& key, const std::string& v) {
    double d = fin(key, v);
    if (d < 0 || d != std::floor(d))
        throw ConfigError("key '" + key + "' expects a nonnegative integer, got '" + v + "'");
    return static_cast<std::size_t>(d);
}

}  // namespace detail

/// Applies one `key = value` setting; throws ConfigError on unknown keys.
inline void apply_config_key(ExperimentConfig& cfg, const std::string& key,
                             const std::string& value) {
    using detail::fin;
    using detail::uin;
    auto& d = cfg.data;
    auto& m = cfg.model;
    auto& o = cfg.optimizer;
    if (key == "task") {
        if (value == "classification") {
            d.task = TaskKind::classification;
            m.task = TaskKind::classification;
        } else if (value == "regression") {
            d.task = TaskKind::regression;
            m.task = TaskKind::regression;
            m.output_dim = 1;
        } else {
            throw ConfigError("task must be classification or regression");
        }
    } else if (key == "classes") {
        d.classes = uin(key, value);
        if (d.task == TaskKind::classification) m.output_dim = d.classes;
    } else if (key == "modalities") {
        d.modalities = uin(key, value);
        m.modalities = d.modalities;
        if (d.informativeness.size() != d.modalities) d.informativeness.assign(d.modalities, 0.5);
        if (d.feature_dims.size() != d.modalities) d.feature_dims.assign(d.modalities, 16);
        m.input_dims = d.feature_dims;
    } else if (key == "informativeness") {
        d.informativeness = detail::parse_double_list(value);
    } else if (key == "feature_dims") {
        d.feature_dims = detail::parse_size_list(value);
        m.input_dims = d.feature_dims;
    } else if (key == "samples") {
        d.samples = uin(key, value);
    } else if (key == "train_fraction") {
        d.train_fraction = fin(key, value);
    } else if (key == "noise") {
        d.noise_sigma = fin(key, value);
    } else if (key == "data_seed") {
        d.seed = static_cast<std::uint64_t>(uin(key, value));
    } else if (key == "dataset") {
        cfg.dataset_file = value;
    } else if (key == "hidden_dim") {
        m.hidden_dim = uin(key, value);
    } else if (key == "encoder_depth") {
        m.encoder_depth = uin(key, value);
    } else if (key == "encoder_kind") {
        if (value == "mlp") m.encoder_kind = EncoderKind::mlp;
        else if (value == "attention") m.encoder_kind = EncoderKind::attention;
        else throw ConfigError("encoder_kind must be mlp or attention");
    } else if (key == "fusion_depth") {
        m.fusion_depth = uin(key, value);
    } else if (key == "classifier_attn_layers") {
        m.classifier_attn_layers = uin(key, value);
    } else if (key == "attn_tokens") {
        m.attn_tokens = uin(key, value);
    } else if (key == "attn_heads") {
        m.attn_heads = uin(key, value);
    } else if (key == "optimizer") {
        if (value == "gd") o.kind = OptKind::gd;
        else if (value == "sgd") o.kind = OptKind::sgd_momentum;
        else if (value == "adam") o.kind = OptKind::adam;
        else if (value == "adamw") o.kind = OptKind::adamw;
        else throw ConfigError("optimizer must be gd, sgd, adam or adamw");
    } else if (key == "lr") {
        o.lr = fin(key, value);
    } else if (key == "classifier_lr") {
        cfg.classifier_lr = fin(key, value);
    } else if (key == "momentum") {
        o.momentum = fin(key, value);
    } else if (key == "beta1") {
        o.beta1 = fin(key, value);
    } else if (key == "beta2") {
        o.beta2 = fin(key, value);
    } else if (key == "weight_decay") {
        o.weight_decay = fin(key, value);
    } else if (key == "grad_clip") {
        double c = fin(key, value);
        if (c > 0) o.clip_norm = c;
        else o.clip_norm.reset();
    } else if (key == "schedule") {
        if (value == "none") o.schedule.kind = ScheduleKind::none;
        else if (value == "step") o.schedule.kind = ScheduleKind::step_decay;
        else if (value == "cosine") o.schedule.kind = ScheduleKind::cosine;
        else throw ConfigError("schedule must be none, step or cosine");
    } else if (key == "schedule_factor") {
        o.schedule.step_factor = fin(key, value);
    } else if (key == "schedule_interval") {
        o.schedule.step_interval = uin(key, value);
    } else if (key == "warmup_steps") {
        o.schedule.warmup_steps = uin(key, value);
    } else if (key == "rho") {
        cfg.cggm.rho = fin(key, value);
    } else if (key == "lambda") {
        cfg.cggm.lambda = fin(key, value);
    } else if (key == "denom_tolerance") {
        cfg.cggm.denom_tolerance = fin(key, value);
    } else if (key == "magnitude") {
        cfg.cggm.magnitude_enabled = detail::parse_bool(key, value);
    } else if (key == "direction") {
        cfg.cggm.direction_enabled = detail::parse_bool(key, value);
    } else if (key == "lgm_timing") {
        if (value == "current") cfg.cggm.lgm_timing = LgmTiming::current;
        else if (value == "delayed") cfg.cggm.lgm_timing = LgmTiming::delayed;
        else throw ConfigError("lgm_timing must be current or delayed");
    } else if (key == "strategy") {
        cfg.strategy = strategy_from_string(value);
    } else if (key == "unimodal_index") {
        cfg.unimodal_index = uin(key, value);
    } else if (key == "mrd_drop_prob") {
        cfg.mrd_drop_prob = fin(key, value);
    } else if (key == "mslr_lrs") {
        cfg.mslr_lrs = detail::parse_double_list(value);
    } else if (key == "epochs") {
        cfg.epochs = uin(key, value);
    } else if (key == "batch_size") {
        cfg.batch_size = uin(key, value);
    } else if (key == "eval_interval") {
        cfg.eval_interval = uin(key, value);
    } else if (key == "seed") {
        cfg.seed = static_cast<std::uint64_t>(uin(key, value));
    } else if (key == "out") {
        cfg.out_dir = value;
    } else {
        throw ConfigError("unknown config key '" + key + "'");
    }
}

/// Default experiment: the dominant-modality synthetic task under the
/// transferable defaults (rho 1.3, lambda 0.20, batch 64, lr 1e-3,
/// classifier lr 5e-4, adam, gradient clip 0.8).
inline ExperimentConfig default_experiment() {
    ExperimentConfig cfg;
    cfg.data.task = TaskKind::classification;
    cfg.data.classes = 4;
    cfg.data.modalities = 3;
    cfg.data.informativeness = {0.9, 0.3, 0.3};
    cfg.data.feature_dims = {16, 16, 16};
    cfg.data.samples = 800;
    cfg.data.train_fraction = 0.8;
    cfg.data.noise_sigma = 0.6;
    cfg.data.seed = 1;
    cfg.model.modalities = 3;
    cfg.model.input_dims = {16, 16, 16};
    cfg.model.hidden_dim = 16;
    cfg.model.encoder_depth = 2;
    cfg.model.fusion_depth = 1;
    cfg.model.classifier_attn_layers = 1;
    cfg.model.attn_tokens = 4;
    cfg.model.attn_heads = 1;
    cfg.model.output_dim = 4;
    cfg.model.task = TaskKind::classification;
    cfg.optimizer.kind = OptKind::adam;
    cfg.optimizer.lr = 1e-3;
    cfg.optimizer.clip_norm = 0.8;
    cfg.classifier_lr = 5e-4;
    cfg.cggm.rho = 1.3;
    cfg.cggm.lambda = 0.20;
    cfg.epochs = 10;
    cfg.batch_size = 64;
    return cfg;
}

inline ExperimentConfig read_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    ExperimentConfig cfg = default_experiment();
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key = value");
        std::string key = detail::trim(line.substr(0, eq));
        std::string value = detail::trim(line.substr(eq + 1));
        apply_config_key(cfg, key, value);
    }
    return cfg;
}

/// Canonical flat echo of a config; the summary JSON embeds it and the run id
/// is a digest of it.
inline std::vector<std::pair<std::string, std::string>> config_echo(const ExperimentConfig& cfg) {
    auto f = [](double v) {
        char buf[40];
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return std::string(buf);
    };
    auto list_f = [&](const std::vector<double>& v) {
        std::string s;
        for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + f(v[i]);
        return s;
    };
    auto list_u = [](const std::vector<std::size_t>& v) {
        std::string s;
        for (std::size_t i = 0; i < v.size(); ++i)
            s += (i ? "," : "") + std::to_string(v[i]);
        return s;
    };
    std::vector<std::pair<std::string, std::string>> kv;
    kv.emplace_back("task",
                    cfg.data.task == TaskKind::classification ? "classification" : "regression");
    kv.emplace_back("classes", std::to_string(cfg.data.classes));
    kv.emplace_back("modalities", std::to_string(cfg.data.modalities));
    kv.emplace_back("informativeness", list_f(cfg.data.informativeness));
    kv.emplace_back("feature_dims", list_u(cfg.data.feature_dims));
    kv.emplace_back("samples", std::to_string(cfg.data.samples));
    kv.emplace_back("train_fraction", f(cfg.data.train_fraction));
    kv.emplace_back("noise", f(cfg.data.noise_sigma));
    kv.emplace_back("data_seed", std::to_string(cfg.data.seed));
    if (!cfg.dataset_file.empty()) kv.emplace_back("dataset", cfg.dataset_file);
    kv.emplace_back("hidden_dim", std::to_string(cfg.model.hidden_dim));
    kv.emplace_back("encoder_depth", std::to_string(cfg.model.encoder_depth));
    kv.emplace_back("encoder_kind",
                    cfg.model.encoder_kind == EncoderKind::mlp ? "mlp" : "attention");
    kv.emplace_back("fusion_depth", std::to_string(cfg.model.fusion_depth));
    kv.emplace_back("classifier_attn_layers", std::to_string(cfg.model.classifier_attn_layers));
    kv.emplace_back("attn_tokens", std::to_string(cfg.model.attn_tokens));
    kv.emplace_back("attn_heads", std::to_string(cfg.model.attn_heads));
    const char* opt_name =
        cfg.optimizer.kind == OptKind::gd
            ? "gd"
            : cfg.optimizer.kind == OptKind::sgd_momentum
                  ? "sgd"
                  : cfg.optimizer.kind == OptKind::adam ? "adam" : "adamw";
    kv.emplace_back("optimizer", opt_name);
    kv.emplace_back("lr", f(cfg.optimizer.lr));
    kv.emplace_back("classifier_lr", f(cfg.classifier_lr));
    kv.emplace_back("momentum", f(cfg.optimizer.momentum));
    kv.emplace_back("beta1", f(cfg.optimizer.beta1));
    kv.emplace_back("beta2", f(cfg.optimizer.beta2));
    kv.emplace_back("weight_decay", f(cfg.optimizer.weight_decay));
    kv.emplace_back("grad_clip", cfg.optimizer.clip_norm ? f(*cfg.optimizer.clip_norm) : "0");
    const char* sched =
        cfg.optimizer.schedule.kind == ScheduleKind::none
            ? "none"
            : cfg.optimizer.schedule.kind == ScheduleKind::step_decay ? "step" : "cosine";
    kv.emplace_back("schedule", sched);
    kv.emplace_back("rho", f(cfg.cggm.rho));
    kv.emplace_back("lambda", f(cfg.cggm.lambda));
    kv.emplace_back("magnitude", cfg.cggm.magnitude_enabled ? "on" : "off");
    kv.emplace_back("direction", cfg.cggm.direction_enabled ? "on" : "off");
    kv.emplace_back("lgm_timing",
                    cfg.cggm.lgm_timing == LgmTiming::current ? "current" : "delayed");
    kv.emplace_back("strategy", to_string(cfg.strategy));
    if (cfg.strategy == Strategy::unimodal)
        kv.emplace_back("unimodal_index", std::to_string(cfg.unimodal_index));
    if (cfg.strategy == Strategy::mrd) kv.emplace_back("mrd_drop_prob", f(cfg.mrd_drop_prob));
    if (cfg.strategy == Strategy::mslr) kv.emplace_back("mslr_lrs", list_f(cfg.mslr_lrs));
    kv.emplace_back("epochs", std::to_string(cfg.epochs));
    kv.emplace_back("batch_size", std::to_string(cfg.batch_size));
    kv.emplace_back("eval_interval", std::to_string(cfg.eval_interval));
    kv.emplace_back("seed", std::to_string(cfg.seed));
    return kv;
}

// ---------------------------------------------------------------------------
// Reporting metrics (test-split only; never drive the balancing terms).
// ---------------------------------------------------------------------------

inline double macro_f1(std::span<const std::size_t> predicted, std::span<const std::size_t> actual,
                       std::size_t classes) {
    std::vector<double> tp(classes, 0), fp(classes, 0), fn(classes, 0);
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        if (predicted[i] == actual[i]) {
            tp[predicted[i]] += 1;
        } else {
            fp[predicted[i]] += 1;
            fn[actual[i]] += 1;
        }
    }
    double f1 = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
        double p = tp[c] + fp[c] > 0 ? tp[c] / (tp[c] + fp[c]) : 0.0;
        double r = tp[c] + fn[c] > 0 ? tp[c] / (tp[c] + fn[c]) : 0.0;
        f1 += p + r > 0 ? 2.0 * p * r / (p + r) : 0.0;
    }
    return f1 / static_cast<double>(classes);
}

inline double pearson(std::span<const double> a, std::span<const double> b) {
    std::size_t n = a.size();
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < n; ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= static_cast<double>(n);
    mb /= static_cast<double>(n);
    double num = 0, va = 0, vb = 0;
    for (std::size_t i = 0; i < n; ++i) {
        num += (a[i] - ma) * (b[i] - mb);
        va += (a[i] - ma) * (a[i] - ma);
        vb += (b[i] - mb) * (b[i] - mb);
    }
    double denom = std::sqrt(va) * std::sqrt(vb);
    return denom > 0 ? num / denom : 0.0;
}

/// Held-out metrics for one prediction branch (the fusion head or one
/// auxiliary classifier).
struct BranchMetrics {
    double accuracy = 0.0;  // classification
    double f1 = 0.0;
    double mae = 0.0;       // regression
    double corr = 0.0;
};

// ---------------------------------------------------------------------------
// Runs.
// ---------------------------------------------------------------------------

struct RunSummary {
    std::string run_id;
    ExperimentConfig config;
    BranchMetrics fused;
    std::vector<BranchMetrics> classifiers;
    std::vector<std::pair<std::size_t, double>> eval_history;  // (epoch, headline metric)
    std::size_t iterations = 0;
    double wall_seconds = 0.0;  // reported via run_meta.txt, not the JSON
    std::string records_path;
    std::string summary_path;
};

namespace detail {

// Minimal SHA-1 (for git-style run ids over the canonical config text).
inline std::string sha1_hex(const std::string& input) {
    auto rotl = [](std::uint32_t x, int s) { return (x << s) | (x >> (32 - s)); };
    std::array<std::uint32_t, 5> h{0x67452301u, 0xEFCDAB89u, 0x98BADCFEu, 0x10325476u,
                                   0xC3D2E1F0u};
    std::string msg = input;
    std::uint64_t bits = static_cast<std::uint64_t>(msg.size()) * 8;
    msg.push_back(static_cast<char>(0x80));
    while (msg.size() % 64 != 56) msg.push_back('\0');
    for (int i = 7; i >= 0; --i) msg.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
    for (std::size_t chunk = 0; chunk < msg.size(); chunk += 64) {
        std::array<std::uint32_t, 80> w{};
        for (int i = 0; i < 16; ++i)
            w[i] = (static_cast<std::uint32_t>(static_cast<unsigned char>(msg[chunk + 4 * i])) << 24) |
                   (static_cast<std::uint32_t>(static_cast<unsigned char>(msg[chunk + 4 * i + 1]))
                    << 16) |
                   (static_cast<std::uint32_t>(static_cast<unsigned char>(msg[chunk + 4 * i + 2]))
                    << 8) |
                   static_cast<std::uint32_t>(static_cast<unsigned char>(msg[chunk + 4 * i + 3]));
        for (int i = 16; i < 80; ++i) w[i] = rotl(w[i - 3] ^ w[i - 8] ^ w[i - 14] ^ w[i - 16], 1);
        auto [a, b, c, d, e] = h;
        for (int i = 0; i < 80; ++i) {
            std::uint32_t f, k;
            if (i < 20) {
                f = (b & c) | (~b & d);
                k = 0x5A827999u;
            } else if (i < 40) {
                f = b ^ c ^ d;
                k = 0x6ED9EBA1u;
            } else if (i < 60) {
                f = (b & c) | (b & d) | (c & d);
                k = 0x8F1BBCDCu;
            } else {
                f = b ^ c ^ d;
                k = 0xCA62C1D6u;
            }
            std::uint32_t tmp = rotl(a, 5) + f + e + k + w[i];
            e = d;
            d = c;
            c = rotl(b, 30);
            b = a;
            a = tmp;
        }
        h[0] += a;
        h[1] += b;
        h[2] += c;
        h[3] += d;
        h[4] += e;
    }
    char out[41];
    std::snprintf(out, sizeof out, "%08x%08x%08x%08x%08x", h[0], h[1], h[2], h[3], h[4]);
    return out;
}

inline std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::vector<Batch> ordered_eval_batches(const Dataset& ds, Split split,
                                               std::size_t batch_size) {
    const auto& idx = ds.indices(split);
    std::vector<Batch> out;
    for (std::size_t start = 0; start < idx.size(); start += batch_size) {
        std::size_t count = std::min(batch_size, idx.size() - start);
        out.push_back(make_batch(ds, std::span<const std::size_t>(idx.data() + start, count)));
    }
    return out;
}

}  // namespace detail

/// Held-out evaluation of the fused head and every classifier branch.
inline std::pair<BranchMetrics, std::vector<BranchMetrics>> evaluate_split(
    const MultimodalModel& model, const Dataset& ds, Split split, std::size_t batch_size) {
    TaskKind task = model.config().task;
    std::size_t m = model.modalities();
    std::vector<std::size_t> fused_pred_cls, actual_cls;
    std::vector<std::vector<std::size_t>> cls_pred_cls(m);
    std::vector<double> fused_pred_reg, actual_reg;
    std::vector<std::vector<double>> cls_pred_reg(m);

    for (const auto& batch : detail::ordered_eval_batches(ds, split, batch_size)) {
        auto hs = model.forward_encoders(batch.inputs);
        auto [h_fused, pred] = model.forward_fusion(hs);
        auto cls = model.forward_classifiers(hs);
        std::size_t rows = batch.size;
        if (task == TaskKind::classification) {
            std::size_t classes = model.config().output_dim;
            auto argmax_rows = [&](const Tensor& t, std::vector<std::size_t>& into) {
                const auto& v = t.values();
                for (std::size_t r = 0; r < rows; ++r) {
                    std::size_t best = 0;
                    for (std::size_t c = 1; c < classes; ++c)
                        if (v[r * classes + c] > v[r * classes + best]) best = c;
                    into.push_back(best);
                }
            };
            argmax_rows(pred, fused_pred_cls);
            for (std::size_t i = 0; i < m; ++i) argmax_rows(cls[i].prediction, cls_pred_cls[i]);
            for (double t : batch.targets) actual_cls.push_back(static_cast<std::size_t>(t));
        } else {
            for (std::size_t r = 0; r < rows; ++r) fused_pred_reg.push_back(pred.values()[r]);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t r = 0; r < rows; ++r)
                    cls_pred_reg[i].push_back(cls[i].prediction.values()[r]);
            actual_reg.insert(actual_reg.end(), batch.targets.begin(), batch.targets.end());
        }
    }

    auto branch_cls = [&](const std::vector<std::size_t>& pred) {
        BranchMetrics b;
        std::size_t hits = 0;
        for (std::size_t i = 0; i < pred.size(); ++i)
            if (pred[i] == actual_cls[i]) ++hits;
        b.accuracy = static_cast<double>(hits) / static_cast<double>(pred.size());
        b.f1 = macro_f1(pred, actual_cls, model.config().output_dim);
        return b;
    };
    auto branch_reg = [&](const std::vector<double>& pred) {
        BranchMetrics b;
        double acc = 0;
        for (std::size_t i = 0; i < pred.size(); ++i) acc += std::fabs(pred[i] - actual_reg[i]);
        b.mae = acc / static_cast<double>(pred.size());
        b.corr = pearson(pred, actual_reg);
        return b;
    };

    BranchMetrics fused;
    std::vector<BranchMetrics> classifiers(m);
    if (task == TaskKind::classification) {
        fused = branch_cls(fused_pred_cls);
        for (std::size_t i = 0; i < m; ++i) classifiers[i] = branch_cls(cls_pred_cls[i]);
    } else {
        fused = branch_reg(fused_pred_reg);
        for (std::size_t i = 0; i < m; ++i) classifiers[i] = branch_reg(cls_pred_reg[i]);
    }
    return {fused, classifiers};
}

inline void write_records_csv(const std::string& path, std::span<const TrainRecord> records,
                              std::size_t modalities) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << "iter,task_loss,lgm";
    auto cols = [&](const char* prefix) {
        for (std::size_t i = 1; i <= modalities; ++i) out << "," << prefix << "_" << i;
    };
    cols("eps");
    cols("braw");
    cols("bclamp");
    cols("gnorm");
    cols("cos");
    out << "\n";
    for (const auto& r : records) {
        out << r.iter << "," << detail::fmt17(r.task_loss) << "," << detail::fmt17(r.lgm);
        for (const auto* v : {&r.eps, &r.braw, &r.bclamp, &r.gnorm, &r.cos})
            for (double x : *v) out << "," << detail::fmt17(x);
        out << "\n";
    }
    if (!out) throw IoError("write to '" + path + "' failed");
}

inline nlohmann::ordered_json summary_json(const RunSummary& s) {
    nlohmann::ordered_json j;
    j["run_id"] = s.run_id;
    nlohmann::ordered_json cfg;
    for (const auto& [k, v] : config_echo(s.config)) cfg[k] = v;
    j["config"] = cfg;
    TaskKind task = s.config.model.task;
    auto branch = [&](const BranchMetrics& b) {
        nlohmann::ordered_json o;
        if (task == TaskKind::classification) {
            o["accuracy"] = b.accuracy;
            o["f1"] = b.f1;
        } else {
            o["mae"] = b.mae;
            o["corr"] = b.corr;
        }
        return o;
    };
    j["final"]["fused"] = branch(s.fused);
    auto arr = nlohmann::ordered_json::array();
    for (const auto& c : s.classifiers) arr.push_back(branch(c));
    j["final"]["classifiers"] = arr;
    auto hist = nlohmann::ordered_json::array();
    for (const auto& [epoch, v] : s.eval_history) {
        nlohmann::ordered_json e;
        e["epoch"] = epoch;
        e[task == TaskKind::classification ? "fused_accuracy" : "fused_mae"] = v;
        hist.push_back(e);
    }
    j["eval_history"] = hist;
    j["iterations"] = s.iterations;
    return j;
}

/// Executes one experiment end to end and writes records.csv, summary.json,
/// model.cggm and run_meta.txt into the output directory.
inline RunSummary run(const ExperimentConfig& user_cfg) {
    ExperimentConfig cfg = user_cfg;
    cfg.validate();
    auto t0 = std::chrono::steady_clock::now();

    Dataset ds = cfg.dataset_file.empty() ? generate(cfg.data) : load(cfg.dataset_file);
    if (!cfg.dataset_file.empty()) {
        cfg.data = ds.spec;
        cfg.model.input_dims = ds.spec.feature_dims;
        cfg.model.modalities = ds.spec.modalities;
    }
    ModelConfig mcfg = cfg.model;
    if (cfg.strategy == Strategy::unimodal) {
        ds = restrict_to_modality(ds, cfg.unimodal_index - 1);
        mcfg.modalities = 1;
        mcfg.input_dims = {ds.spec.feature_dims[0]};
    }
    mcfg.seed = mix_seed(cfg.seed, 900);
    auto model = MultimodalModel::build(mcfg);

    OptimizerConfig ocfg = cfg.optimizer;
    for (std::size_t i = 1; i <= mcfg.modalities; ++i)
        ocfg.group_lr["classifier_" + std::to_string(i)] = cfg.classifier_lr;
    if (cfg.strategy == Strategy::mslr)
        for (std::size_t i = 0; i < cfg.mslr_lrs.size(); ++i)
            ocfg.group_lr["encoder_" + std::to_string(i + 1)] = cfg.mslr_lrs[i];
    std::size_t train_rows = ds.train_indices.size();
    std::size_t steps_per_epoch = (train_rows + cfg.batch_size - 1) / cfg.batch_size;
    if (ocfg.schedule.kind == ScheduleKind::cosine)
        ocfg.schedule.total_steps = cfg.epochs * steps_per_epoch;
    Optimizer opt(model, ocfg);

    CggmConfig ccfg = cfg.cggm;
    if (cfg.strategy != Strategy::cggm) {
        ccfg.magnitude_enabled = false;
        ccfg.direction_enabled = false;
    }

    MetricKind kind =
        mcfg.task == TaskKind::classification ? MetricKind::accuracy : MetricKind::mae;
    MetricState metrics(mcfg.modalities, kind);
    TrainerState tstate;
    Rng mrd_rng(mix_seed(cfg.seed, 777));

    RunSummary summary;
    summary.config = cfg;
    std::vector<TrainRecord> records;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (auto& batch : batches(ds, Split::train, cfg.batch_size, mix_seed(cfg.seed, epoch))) {
            StepHooks hooks;
            std::vector<bool> drop;
            if (cfg.strategy == Strategy::mrd) {
                drop.resize(mcfg.modalities);
                for (std::size_t i = 0; i < mcfg.modalities; ++i)
                    drop[i] = mrd_rng.uniform() < cfg.mrd_drop_prob;
                hooks.fusion_drop = &drop;
            }
            records.push_back(
                training_step(model, batch.inputs, batch.targets, metrics, opt, ccfg, tstate,
                              hooks));
        }
        if (cfg.eval_interval > 0 &&
            ((epoch + 1) % cfg.eval_interval == 0 || epoch + 1 == cfg.epochs)) {
            auto [fused, cls] = evaluate_split(model, ds, Split::test, cfg.batch_size);
            summary.eval_history.emplace_back(
                epoch + 1,
                mcfg.task == TaskKind::classification ? fused.accuracy : fused.mae);
        }
    }

    auto [fused, classifiers] = evaluate_split(model, ds, Split::test, cfg.batch_size);
    summary.fused = fused;
    summary.classifiers = classifiers;
    summary.iterations = records.size();

    std::string echo_text;
    for (const auto& [k, v] : config_echo(cfg)) echo_text += k + "=" + v + "\n";
    summary.run_id = detail::sha1_hex(echo_text);

    namespace fs = std::filesystem;
    fs::create_directories(cfg.out_dir);
    summary.records_path = (fs::path(cfg.out_dir) / "records.csv").string();
    summary.summary_path = (fs::path(cfg.out_dir) / "summary.json").string();
    write_records_csv(summary.records_path, records, mcfg.modalities);
    {
        std::ofstream out(summary.summary_path);
        out << summary_json(summary).dump(2) << "\n";
        if (!out) throw IoError("write to '" + summary.summary_path + "' failed");
    }
    model.save((fs::path(cfg.out_dir) / "model.cggm").string());

    summary.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    {
        std::ofstream meta((fs::path(cfg.out_dir) / "run_meta.txt").string());
        meta << "run_id " << summary.run_id << "\n"
             << "wall_seconds " << summary.wall_seconds << "\n";
    }
    return summary;
}

// ---------------------------------------------------------------------------
// Gradient proximity probe.
// ---------------------------------------------------------------------------

/// Cosine between (a) classifier i's final-layer gradient on the batch and
/// (b) the fusion-head final-layer gradient when every other modality's
/// representation is zeroed. Pure: no parameter or optimizer mutation.
inline double unimodal_gradient_probe(const MultimodalModel& model,
                                      const std::vector<Tensor>& inputs,
                                      const std::vector<double>& targets, std::size_t modality) {
    if (modality >= model.modalities()) throw ConfigError("probe modality index out of range");
    TaskKind task = model.config().task;
    auto hs = model.forward_encoders(inputs);

    auto cls = model.forward_classifiers(hs);
    Tensor g_cls = head_gradient(cls[modality].final_input,
                                 loss_residual(task, cls[modality].prediction, targets));

    std::vector<Tensor> masked;
    masked.reserve(hs.size());
    for (std::size_t j = 0; j < hs.size(); ++j)
        masked.push_back(j == modality ? hs[j].detach() : Tensor::zeros(hs[j].shape()));
    auto [h_fused, pred] = model.forward_fusion(masked);
    Tensor g_uni = head_gradient(h_fused, loss_residual(task, pred, targets));

    return cosine_similarity(g_cls.detach(), g_uni.detach()).value();
}

/// Mean probe cosine per modality over the test split.
inline std::vector<double> probe_over_split(const MultimodalModel& model, const Dataset& ds,
                                            Split split, std::size_t batch_size) {
    std::vector<double> acc(model.modalities(), 0.0);
    std::size_t count = 0;
    for (const auto& batch : detail::ordered_eval_batches(ds, split, batch_size)) {
        for (std::size_t i = 0; i < model.modalities(); ++i)
            acc[i] += unimodal_gradient_probe(model, batch.inputs, batch.targets, i);
        ++count;
    }
    for (auto& v : acc) v /= static_cast<double>(count);
    return acc;
}

// ---------------------------------------------------------------------------
// Sweeps and comparisons.
// ---------------------------------------------------------------------------

enum class SweepAxis : std::uint8_t { rho = 0, lambda = 1 };

struct SweepRow {
    double value = 0.0;
    double metric = 0.0;  // fused accuracy (classification) or MAE (regression)
    double delta_vs_baseline = 0.0;
    RunSummary summary;
};

namespace detail {

template <typename Fn>
void run_indexed(std::size_t count, std::size_t jobs, Fn&& fn) {
    if (jobs <= 1 || count <= 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::size_t next = 0;
    // Static striping keeps each run on exactly one thread.
    for (std::size_t w = 0; w < std::min(jobs, count); ++w)
        pool.emplace_back([&fn, count, w, stride = std::min(jobs, count)] {
            for (std::size_t i = w; i < count; i += stride) fn(i);
        });
    (void)next;
    for (auto& t : pool) t.join();
}

}  // namespace detail

/// Runs the base config once as a joint baseline and once per sweep value
/// with the axis overridden; shared seed, per-value output directories.
inline std::vector<SweepRow> sweep(const ExperimentConfig& base, SweepAxis axis,
                                   std::span<const double> values, std::size_t jobs = 1) {
    if (values.size() < 2) throw ConfigError("a sweep needs at least two values");
    namespace fs = std::filesystem;
    ExperimentConfig baseline = base;
    baseline.strategy = Strategy::joint;
    baseline.out_dir = (fs::path(base.out_dir) / "baseline").string();
    RunSummary base_summary = run(baseline);
    bool classification = base.model.task == TaskKind::classification;
    double base_metric = classification ? base_summary.fused.accuracy : base_summary.fused.mae;

    std::vector<SweepRow> rows(values.size());
    detail::run_indexed(values.size(), jobs, [&](std::size_t i) {
        ExperimentConfig cfg = base;
        cfg.strategy = Strategy::cggm;
        if (axis == SweepAxis::rho)
            cfg.cggm.rho = values[i];
        else
            cfg.cggm.lambda = values[i];
        char name[64];
        std::snprintf(name, sizeof name, "%s_%g", axis == SweepAxis::rho ? "rho" : "lambda",
                      values[i]);
        cfg.out_dir = (fs::path(base.out_dir) / name).string();
        RunSummary s = run(cfg);
        SweepRow row;
        row.value = values[i];
        row.metric = classification ? s.fused.accuracy : s.fused.mae;
        row.delta_vs_baseline = row.metric - base_metric;
        row.summary = std::move(s);
        rows[i] = std::move(row);
    });

    fs::create_directories(base.out_dir);
    std::string path = (fs::path(base.out_dir) / "sweep.csv").string();
    std::ofstream out(path);
    out << (axis == SweepAxis::rho ? "rho" : "lambda") << ","
        << (classification ? "fused_accuracy" : "fused_mae") << ",delta_vs_baseline\n";
    for (const auto& r : rows)
        out << detail::fmt17(r.value) << "," << detail::fmt17(r.metric) << ","
            << detail::fmt17(r.delta_vs_baseline) << "\n";
    return rows;
}

/// Runs several strategies under one seed and emits a per-strategy table.
inline std::vector<RunSummary> compare(const ExperimentConfig& base,
                                       std::span<const Strategy> strategies,
                                       std::size_t jobs = 1) {
    if (strategies.empty()) throw ConfigError("compare needs at least one strategy");
    namespace fs = std::filesystem;
    std::vector<RunSummary> out(strategies.size());
    detail::run_indexed(strategies.size(), jobs, [&](std::size_t i) {
        ExperimentConfig cfg = base;
        cfg.strategy = strategies[i];
        cfg.out_dir = (fs::path(base.out_dir) / to_string(strategies[i])).string();
        out[i] = run(cfg);
    });
    fs::create_directories(base.out_dir);
    bool classification = base.model.task == TaskKind::classification;
    std::ofstream csv((fs::path(base.out_dir) / "compare.csv").string());
    csv << "strategy," << (classification ? "fused_accuracy,fused_f1" : "fused_mae,fused_corr");
    for (std::size_t i = 1; i <= base.model.modalities; ++i)
        csv << ",classifier_" << i << (classification ? "_accuracy" : "_mae");
    csv << "\n";
    for (std::size_t i = 0; i < strategies.size(); ++i) {
        const auto& s = out[i];
        csv << to_string(strategies[i]) << ",";
        if (classification)
            csv << detail::fmt17(s.fused.accuracy) << "," << detail::fmt17(s.fused.f1);
        else
            csv << detail::fmt17(s.fused.mae) << "," << detail::fmt17(s.fused.corr);
        for (std::size_t c = 0; c < base.model.modalities; ++c) {
            if (c < s.classifiers.size())
                csv << ","
                    << detail::fmt17(classification ? s.classifiers[c].accuracy
                                                    : s.classifiers[c].mae);
            else
                csv << ",";  // unimodal runs have a single classifier
        }
        csv << "\n";
    }
    return out;
}

}  // namespace cggm

// SPDX-License-Identifier: Apache-2.0

// Command-line front end: dataset generation, training runs, strategy
// comparisons, rho/lambda sweeps and the gradient proximity probe.
// Exit codes: 0 success, 1 configuration/usage error, 2 runtime error.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "cggm/harness.hpp"

namespace {

using namespace cggm;

struct CommonArgs {
    std::string config_file;
    std::uint64_t seed = 7;
    std::string out = "out";
    bool json = false;
    std::size_t jobs = 1;
    std::optional<std::string> strategy;
    std::optional<double> rho, lambda;
    std::optional<std::size_t> epochs, batch_size;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_file, "flat key = value config file");
    cmd->add_option("--seed", args.seed, "run seed")->capture_default_str();
    cmd->add_option("--out", args.out, "output directory")->capture_default_str();
    cmd->add_flag("--json", args.json, "print the machine-readable summary on stdout");
    cmd->add_option("--strategy", args.strategy, "joint | unimodal | mslr | mrd | cggm");
    cmd->add_option("--rho", args.rho, "magnitude scaling hyperparameter");
    cmd->add_option("--lambda", args.lambda, "direction loss trade-off");
    cmd->add_option("--epochs", args.epochs, "training epochs");
    cmd->add_option("--batch-size", args.batch_size, "batch size");
    cmd->add_option("--jobs", args.jobs, "worker threads for sweep/compare")
        ->capture_default_str();
}

// Config file first, explicit flags on top.
ExperimentConfig build_config(const CommonArgs& args) {
    ExperimentConfig cfg =
        args.config_file.empty() ? default_experiment() : read_config_file(args.config_file);
    cfg.seed = args.seed;
    cfg.out_dir = args.out;
    if (args.strategy) cfg.strategy = strategy_from_string(*args.strategy);
    if (args.rho) cfg.cggm.rho = *args.rho;
    if (args.lambda) cfg.cggm.lambda = *args.lambda;
    if (args.epochs) cfg.epochs = *args.epochs;
    if (args.batch_size) cfg.batch_size = *args.batch_size;
    return cfg;
}

void print_summary_line(const RunSummary& s) {
    bool classification = s.config.model.task == TaskKind::classification;
    std::cout << "strategy=" << to_string(s.config.strategy) << " seed=" << s.config.seed;
    if (classification)
        std::cout << " fused_accuracy=" << s.fused.accuracy << " fused_f1=" << s.fused.f1;
    else
        std::cout << " fused_mae=" << s.fused.mae << " fused_corr=" << s.fused.corr;
    std::cout << " records=" << s.records_path << "\n";
}

int cmd_generate(const CommonArgs& args) {
    ExperimentConfig cfg = build_config(args);
    Dataset ds = generate(cfg.data);
    namespace fs = std::filesystem;
    fs::create_directories(args.out);
    std::string path = (fs::path(args.out) / "dataset.cggd").string();
    save(ds, path);
    if (args.json) {
        nlohmann::ordered_json j;
        j["path"] = path;
        j["samples"] = ds.spec.samples;
        j["modalities"] = ds.spec.modalities;
        j["train_rows"] = ds.train_indices.size();
        j["test_rows"] = ds.test_indices.size();
        std::cout << j.dump(2) << "\n";
    } else {
        std::cout << "wrote " << path << " (" << ds.spec.samples << " samples, "
                  << ds.spec.modalities << " modalities)\n";
    }
    return 0;
}

int cmd_train(const CommonArgs& args) {
    RunSummary s = run(build_config(args));
    if (args.json)
        std::cout << summary_json(s).dump(2) << "\n";
    else
        print_summary_line(s);
    std::cerr << "wall_seconds " << s.wall_seconds << "\n";
    return 0;
}

int cmd_compare(const CommonArgs& args, const std::vector<std::string>& names) {
    ExperimentConfig cfg = build_config(args);
    std::vector<Strategy> strategies;
    for (const auto& n : names) strategies.push_back(strategy_from_string(n));
    if (strategies.empty())
        strategies = {Strategy::joint, Strategy::mslr, Strategy::mrd, Strategy::cggm};
    auto rows = compare(cfg, strategies, args.jobs);
    if (args.json) {
        auto arr = nlohmann::ordered_json::array();
        for (const auto& s : rows) arr.push_back(summary_json(s));
        std::cout << arr.dump(2) << "\n";
    } else {
        for (const auto& s : rows) print_summary_line(s);
        std::cout << "table: " << (std::filesystem::path(cfg.out_dir) / "compare.csv").string()
                  << "\n";
    }
    return 0;
}

int cmd_sweep(const CommonArgs& args, const std::string& axis_name,
              const std::vector<double>& values) {
    ExperimentConfig cfg = build_config(args);
    SweepAxis axis;
    if (axis_name == "rho") axis = SweepAxis::rho;
    else if (axis_name == "lambda") axis = SweepAxis::lambda;
    else throw ConfigError("sweep axis must be rho or lambda");
    auto rows = sweep(cfg, axis, values, args.jobs);
    if (args.json) {
        auto arr = nlohmann::ordered_json::array();
        for (const auto& r : rows) {
            nlohmann::ordered_json j;
            j["value"] = r.value;
            j["metric"] = r.metric;
            j["delta_vs_baseline"] = r.delta_vs_baseline;
            arr.push_back(j);
        }
        std::cout << arr.dump(2) << "\n";
    } else {
        for (const auto& r : rows)
            std::cout << axis_name << "=" << r.value << " metric=" << r.metric
                      << " delta=" << r.delta_vs_baseline << "\n";
    }
    return 0;
}

int cmd_probe(const CommonArgs& args, const std::string& model_path) {
    ExperimentConfig cfg = build_config(args);
    Dataset ds = cfg.dataset_file.empty() ? generate(cfg.data) : load(cfg.dataset_file);
    MultimodalModel model = [&] {
        if (!model_path.empty()) return MultimodalModel::load(model_path);
        RunSummary s = run(cfg);
        namespace fs = std::filesystem;
        return MultimodalModel::load((fs::path(cfg.out_dir) / "model.cggm").string());
    }();
    auto cosines = probe_over_split(model, ds, Split::test, cfg.batch_size);
    if (args.json) {
        nlohmann::ordered_json j;
        j["probe_cosines"] = cosines;
        std::cout << j.dump(2) << "\n";
    } else {
        for (std::size_t i = 0; i < cosines.size(); ++i)
            std::cout << "modality " << (i + 1) << " mean probe cosine " << cosines[i] << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"classifier-guided gradient modulation laboratory"};
    app.require_subcommand(1);

    CommonArgs args;
    std::vector<std::string> compare_names;
    std::vector<double> sweep_values;
    std::string sweep_axis = "rho";
    std::string probe_model;

    auto* generate_cmd = app.add_subcommand("generate", "write a synthetic dataset file");
    add_common(generate_cmd, args);
    auto* train_cmd = app.add_subcommand("train", "run one training strategy");
    add_common(train_cmd, args);
    auto* compare_cmd = app.add_subcommand("compare", "run several strategies on one seed");
    add_common(compare_cmd, args);
    compare_cmd->add_option("--strategies", compare_names,
                            "strategies to run (default joint,mslr,mrd,cggm)")
        ->delimiter(',');
    auto* sweep_cmd = app.add_subcommand("sweep", "sweep rho or lambda against a joint baseline");
    add_common(sweep_cmd, args);
    sweep_cmd->add_option("--axis", sweep_axis, "rho | lambda")->capture_default_str();
    sweep_cmd->add_option("--values", sweep_values, "sweep values")->delimiter(',')->required();
    auto* probe_cmd =
        app.add_subcommand("probe", "classifier vs unimodal gradient proximity probe");
    add_common(probe_cmd, args);
    probe_cmd->add_option("--model", probe_model, "probe an existing checkpoint");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n" << app.help();
        return 1;
    }

    try {
        if (generate_cmd->parsed()) return cmd_generate(args);
        if (train_cmd->parsed()) return cmd_train(args);
        if (compare_cmd->parsed()) return cmd_compare(args, compare_names);
        if (sweep_cmd->parsed()) return cmd_sweep(args, sweep_axis, sweep_values);
        if (probe_cmd->parsed()) return cmd_probe(args, probe_model);
        std::cerr << app.help();
        return 1;
    } catch (const cggm::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}

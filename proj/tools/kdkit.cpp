#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "kdkit/checkpoint.hpp"
#include "kdkit/experiment.hpp"
#include "kdkit/grid.hpp"
#include "kdkit/train.hpp"

namespace {

using namespace kdkit;

struct CommonArgs {
    std::string config_path;
    std::int64_t seed = -1;  // negative: keep the config's seed
    std::string out_dir = "runs";
    std::vector<std::string> overrides;
    std::size_t jobs = 1;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool with_jobs) {
    cmd->add_option("--config", args.config_path, "experiment config file")->required();
    cmd->add_option("--seed", args.seed, "override the config seed");
    cmd->add_option("--out", args.out_dir, "directory that run outputs go under");
    cmd->add_option("--set", args.overrides,
                    "override a config value, e.g. --set train.epochs=20");
    if (with_jobs) {
        cmd->add_option("--jobs", args.jobs, "grid cells to run concurrently")
            ->check(CLI::PositiveNumber);
    }
}

ConfigValue load_config(const CommonArgs& args) {
    ConfigValue root = parse_config_file(args.config_path);
    if (args.seed >= 0) set_config_path(root, "seed", ConfigValue::integer(args.seed));
    for (const std::string& text : args.overrides) {
        const auto eq = text.find('=');
        if (eq == std::string::npos || eq == 0) {
            throw ConfigError("override '" + text + "' is not of the form path=value");
        }
        set_config_path(root, text.substr(0, eq), parse_override_value(text.substr(eq + 1)));
    }
    return root;
}

std::string run_dir_for(const CommonArgs& args, std::uint64_t seed) {
    const std::string stem = std::filesystem::path(args.config_path).stem().string();
    return (std::filesystem::path(args.out_dir) / (stem + "-s" + std::to_string(seed))).string();
}

void print_run(const RunResult& result, const std::string& dir) {
    std::cout << "run dir: " << dir << "\n";
    for (const auto& [name, value] : result.metrics) {
        std::cout << name << ": " << detail::format_value(value) << "\n";
    }
    std::cout << "checkpoint: " << result.checkpoint_path << "\n";
}

int cmd_train(const CommonArgs& args, bool distill) {
    Registry registry = standard_registry();
    ConfigValue root = load_config(args);
    const ConfigValue* section = root.find("train");
    const bool has_teacher = section && section->is_mapping() && section->find("teacher");
    if (distill && !has_teacher) {
        throw ConfigError("distill needs train.teacher in '" + args.config_path + "'");
    }
    if (!distill && has_teacher) {
        throw ConfigError("'" + args.config_path +
                          "' declares train.teacher; use the distill command");
    }
    ExperimentPlan plan = build_experiment(root, registry);
    const std::string dir = run_dir_for(args, plan.seed);
    RunResult result = run_experiment(plan, dir);
    print_run(result, dir);
    return 0;
}

int cmd_sweep(const CommonArgs& args) {
    Registry registry = standard_registry();
    ConfigValue root = load_config(args);
    const ConfigValue* seed = root.find("seed");
    if (!seed || !seed->is_int() || seed->as_int() < 0) {
        throw ConfigError("'seed' must be a non-negative integer");
    }
    const std::string dir = run_dir_for(args, static_cast<std::uint64_t>(seed->as_int()));
    GridOutcome outcome = run_grid(root, registry, dir, args.jobs);

    std::cout << "table: " << outcome.table_path << "\n";
    std::cout << "cells: " << outcome.cells.size() << "\n";
    const GridCell& best = outcome.cells[outcome.best];
    std::cout << "best cell: " << outcome.best;
    for (std::size_t a = 0; a < outcome.axes.size(); ++a) {
        std::cout << (a ? ", " : " (") << outcome.axes[a].path << "=" << best.values[a];
    }
    std::cout << ")\n";
    std::cout << "best dev." << outcome.metric << ": " << detail::format_value(best.dev) << "\n";
    std::cout << "best test." << outcome.metric << ": " << detail::format_value(best.test)
              << "\n";
    std::cout << "best config: " << outcome.best_config_path << "\n";
    return 0;
}

int cmd_eval(const CommonArgs& args) {
    Registry registry = standard_registry();
    ConfigValue root = load_config(args);
    ExperimentPlan plan = build_experiment(root, registry);
    const std::string dir = run_dir_for(args, plan.seed);
    const std::string ckpt_path =
        (std::filesystem::path(dir) / "model.ckpt").string();
    CheckpointData ckpt = load_checkpoint(ckpt_path);
    restore_params(ckpt, plan.box->state_parameters());

    const Split& split = split_by_name(plan.data, plan.eval_split);
    std::cout << "{";
    for (std::size_t i = 0; i < plan.metrics.size(); ++i) {
        const double value = evaluate(*plan.box, split, plan.metrics[i].name,
                                      plan.batch_size, plan.student->output_field);
        if (i) std::cout << ", ";
        std::cout << '"' << plan.eval_split << '.' << plan.metrics[i].name
                  << "\": " << detail::format_value(value);
    }
    std::cout << "}\n";
    return 0;
}

int cmd_validate(const CommonArgs& args) {
    Registry registry = standard_registry();
    ConfigValue root = load_config(args);
    ExperimentPlan plan = build_experiment(root, registry);
    for (const auto& record : plan.build_records) std::cout << record << "\n";
    std::cout << "ok: " << plan.build_records.size() << " components, "
              << plan.num_epochs << " epochs planned\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"declarative teacher-student training runs"};
    app.require_subcommand(1);

    CommonArgs train_args, distill_args, sweep_args, eval_args, validate_args;
    CLI::App* train = app.add_subcommand("train", "train a single model from a config");
    add_common(train, train_args, false);
    CLI::App* distill = app.add_subcommand("distill", "train a student against a teacher");
    add_common(distill, distill_args, false);
    CLI::App* sweep = app.add_subcommand("sweep", "run the config's hyperparameter grid");
    add_common(sweep, sweep_args, true);
    CLI::App* eval = app.add_subcommand("eval", "evaluate a trained checkpoint");
    add_common(eval, eval_args, false);
    CLI::App* validate = app.add_subcommand("validate", "build the plan and print components");
    add_common(validate, validate_args, false);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (train->parsed()) return cmd_train(train_args, false);
        if (distill->parsed()) return cmd_train(distill_args, true);
        if (sweep->parsed()) return cmd_sweep(sweep_args);
        if (eval->parsed()) return cmd_eval(eval_args);
        if (validate->parsed()) return cmd_validate(validate_args);
    } catch (const kdkit::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}

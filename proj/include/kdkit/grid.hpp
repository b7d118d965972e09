#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "kdkit/experiment.hpp"
#include "kdkit/train.hpp"

namespace kdkit {

struct GridAxis {
    std::string path;                 // dot path overridden in the base config
    std::vector<ConfigValue> values;  // candidate values, in declared order
};

struct GridCell {
    std::size_t index = 0;            // row-major position
    std::vector<std::string> values;  // rendered axis values, one per axis
    RunResult run;
    double dev = 0.0;
    double test = 0.0;
};

struct GridOutcome {
    std::vector<GridAxis> axes;
    std::vector<GridCell> cells;   // row-major: the last axis varies fastest
    std::size_t best = 0;          // first cell with the best dev metric
    std::string metric;
    bool maximize = true;
    std::string table_path;
    std::string best_config_path;
};

namespace detail {

inline std::string render_axis_value(const ConfigValue& v) {
    if (v.is_sequence()) {
        std::string out = "[";
        for (std::size_t i = 0; i < v.items().size(); ++i) {
            if (i) out += ", ";
            out += scalar_text(v.items()[i]);
        }
        return out + "]";
    }
    return scalar_text(v);
}

inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        else out.push_back(c);
    }
    out.push_back('"');
    return out;
}

inline double metric_value(const RunResult& run, const std::string& key) {
    for (const auto& [name, value] : run.metrics) {
        if (name == key) return value;
    }
    throw Error("run produced no metric '" + key + "'");
}

}  // namespace detail

inline std::vector<GridAxis> grid_axes(const ConfigValue& config) {
    const ConfigValue* sweep = config.find("sweep");
    if (!sweep) throw ConfigError("config has no 'sweep' section");
    const ConfigValue* grid = sweep->find("grid");
    if (!grid || !grid->is_mapping() || grid->entries().empty()) {
        throw ConfigError("'sweep.grid' must map config paths to value lists");
    }
    std::vector<GridAxis> axes;
    for (const auto& [path, values] : grid->entries()) {
        if (!values.is_sequence() || values.items().empty()) {
            throw ConfigError("sweep axis '" + path + "' needs a non-empty value list");
        }
        if (!find_config_path(config, path)) {
            throw ConfigError("sweep axis '" + path + "' does not resolve in the config");
        }
        axes.push_back({path, values.items()});
    }
    return axes;
}

// Exhaustive sweep over the declared grid: every combination runs with the
// same seed, results land in one CSV row per cell, and the cell with the
// best dev metric wins (first such cell on ties). Cells are independent, so
// `jobs` of them may run concurrently.
inline GridOutcome run_grid(const ConfigValue& base, const Registry& registry,
                            const std::string& out_dir, std::size_t jobs = 1) {
    namespace fs = std::filesystem;
    GridOutcome outcome;
    outcome.axes = grid_axes(base);

    std::size_t total = 1;
    for (const auto& axis : outcome.axes) total *= axis.values.size();
    outcome.cells.resize(total);

    fs::create_directories(out_dir);
    auto run_cell = [&](std::size_t index) {
        GridCell& cell = outcome.cells[index];
        cell.index = index;

        ConfigValue cfg = base;
        std::size_t remainder = index;
        std::vector<std::size_t> pick(outcome.axes.size(), 0);
        for (std::size_t a = outcome.axes.size(); a-- > 0;) {
            pick[a] = remainder % outcome.axes[a].values.size();
            remainder /= outcome.axes[a].values.size();
        }
        for (std::size_t a = 0; a < outcome.axes.size(); ++a) {
            const ConfigValue& value = outcome.axes[a].values[pick[a]];
            set_config_path(cfg, outcome.axes[a].path, value);
            cell.values.push_back(detail::render_axis_value(value));
        }

        ExperimentPlan plan = build_experiment(cfg, registry);
        const std::string cell_dir =
            (fs::path(out_dir) / "cells" / std::to_string(index)).string();
        fs::remove_all(cell_dir);
        cell.run = run_experiment(plan, cell_dir);

        const std::string metric = plan.metrics.front().name;
        cell.dev = detail::metric_value(cell.run, "dev." + metric);
        cell.test = detail::metric_value(cell.run, "test." + metric);
        return std::pair<std::string, bool>{metric, plan.metrics.front().maximize};
    };

    if (jobs <= 1) {
        for (std::size_t i = 0; i < total; ++i) {
            auto [metric, maximize] = run_cell(i);
            outcome.metric = metric;
            outcome.maximize = maximize;
        }
    } else {
        std::atomic<std::size_t> next{0};
        std::mutex mu;
        std::exception_ptr first_error;
        std::string metric;
        bool maximize = true;
        auto worker = [&] {
            while (true) {
                const std::size_t i = next.fetch_add(1);
                if (i >= total) return;
                try {
                    auto [m, maxi] = run_cell(i);
                    std::lock_guard<std::mutex> lock(mu);
                    metric = m;
                    maximize = maxi;
                } catch (...) {
                    std::lock_guard<std::mutex> lock(mu);
                    if (!first_error) first_error = std::current_exception();
                    return;
                }
            }
        };
        std::vector<std::thread> pool;
        const std::size_t n = jobs < total ? jobs : total;
        for (std::size_t i = 0; i < n; ++i) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
        if (first_error) std::rethrow_exception(first_error);
        outcome.metric = metric;
        outcome.maximize = maximize;
    }

    // selection: best dev metric, earliest cell on ties
    outcome.best = 0;
    for (std::size_t i = 1; i < total; ++i) {
        const double challenger = outcome.cells[i].dev;
        const double champion = outcome.cells[outcome.best].dev;
        if (outcome.maximize ? challenger > champion : challenger < champion) outcome.best = i;
    }

    outcome.table_path = (fs::path(out_dir) / "grid.csv").string();
    std::ofstream table(outcome.table_path, std::ios::trunc);
    if (!table) throw IoError("cannot open table file '" + outcome.table_path + "'");
    for (std::size_t a = 0; a < outcome.axes.size(); ++a) {
        if (a) table << ',';
        table << detail::csv_field(outcome.axes[a].path);
    }
    table << ",dev." << outcome.metric << ",test." << outcome.metric << '\n';
    for (const auto& cell : outcome.cells) {
        for (const auto& v : cell.values) table << detail::csv_field(v) << ',';
        table << detail::format_value(cell.dev) << ',' << detail::format_value(cell.test) << '\n';
    }
    table.close();

    // echo the winning configuration as a plain runnable config
    ConfigValue best_cfg = base;
    {
        std::size_t remainder = outcome.best;
        std::vector<std::size_t> pick(outcome.axes.size(), 0);
        for (std::size_t a = outcome.axes.size(); a-- > 0;) {
            pick[a] = remainder % outcome.axes[a].values.size();
            remainder /= outcome.axes[a].values.size();
        }
        for (std::size_t a = 0; a < outcome.axes.size(); ++a) {
            set_config_path(best_cfg, outcome.axes[a].path, outcome.axes[a].values[pick[a]]);
        }
        auto& entries = best_cfg.entries();
        for (std::size_t i = 0; i < entries.size(); ++i) {
            if (entries[i].first == "sweep") {
                entries.erase(entries.begin() + static_cast<std::ptrdiff_t>(i));
                break;
            }
        }
    }
    outcome.best_config_path = (fs::path(out_dir) / "best.yaml").string();
    std::ofstream best_file(outcome.best_config_path, std::ios::trunc);
    if (!best_file) throw IoError("cannot open '" + outcome.best_config_path + "'");
    best_file << serialize_config(best_cfg);

    return outcome;
}

}  // namespace kdkit

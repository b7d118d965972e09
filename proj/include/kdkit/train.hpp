#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "kdkit/checkpoint.hpp"
#include "kdkit/experiment.hpp"
#include "kdkit/optim.hpp"

namespace kdkit {

struct EpochStats {
    double mean_loss = 0.0;                              // sample-weighted over batches
    std::vector<std::pair<std::string, double>> terms;   // per-term sample-weighted means
    double seconds = 0.0;
};

namespace detail {

inline double elapsed_seconds(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

inline std::string format_value(double v) { return double_text(v); }

}  // namespace detail

// One pass over the training split in seeded shuffle order. The shuffle
// stream depends only on (seed, epoch), so epoch k draws the same order
// whether the run started fresh or resumed from a checkpoint.
inline EpochStats train_epoch(ExperimentPlan& plan, Optimizer& opt, std::size_t epoch) {
    const auto start = std::chrono::steady_clock::now();
    RngStream shuffle(plan.seed, "shuffle", epoch);
    auto batches = iterate_batches(plan.data.train, plan.batch_size, &shuffle);

    EpochStats stats;
    double loss_sum = 0.0;
    std::vector<double> term_sums;
    std::size_t rows_total = 0;
    for (auto& batch : batches) {
        const std::size_t rows = batch.get("input").dim(0);
        opt.zero_grad();
        StepResult res = plan.box->distill_step(batch);
        opt.step();

        loss_sum += res.total * static_cast<double>(rows);
        if (term_sums.empty()) {
            term_sums.assign(res.terms.size(), 0.0);
            for (const auto& [name, value] : res.terms) stats.terms.emplace_back(name, 0.0);
        }
        for (std::size_t i = 0; i < res.terms.size(); ++i) {
            term_sums[i] += res.terms[i].second * static_cast<double>(rows);
        }
        rows_total += rows;
    }
    stats.mean_loss = loss_sum / static_cast<double>(rows_total);
    for (std::size_t i = 0; i < term_sums.size(); ++i) {
        stats.terms[i].second = term_sums[i] / static_cast<double>(rows_total);
    }
    stats.seconds = detail::elapsed_seconds(start);
    return stats;
}

namespace detail {

// Gradient-free metric over a split, with the forward pass pluggable so box
// evaluation can reset hook caches between batches.
template <class Forward>
double score_split(Forward&& forward, const Split& split, const std::string& metric,
                   std::size_t batch_size, const std::string& output_field) {
    NoGradScope ng;
    double correct = 0.0;
    double sq_sum = 0.0;
    std::size_t rows_total = 0;
    std::size_t elems_total = 0;
    for (auto& batch : iterate_batches(split, batch_size, nullptr)) {
        IOBundle out = forward(batch);
        const Tensor& pred = out.get(output_field);
        const std::size_t rows = pred.dim(0);
        const std::size_t width = pred.dim(1);
        if (metric == "accuracy") {
            const Tensor& labels = batch.get("label");
            for (std::size_t r = 0; r < rows; ++r) {
                std::size_t best = 0;
                for (std::size_t c = 1; c < width; ++c) {
                    if (pred[r * width + c] > pred[r * width + best]) best = c;
                }
                if (static_cast<double>(best) == labels[r]) correct += 1.0;
            }
        } else if (metric == "mse") {
            const Tensor& target = batch.get("target");
            for (std::size_t i = 0; i < rows * width; ++i) {
                const double d = pred[i] - target[i];
                sq_sum += d * d;
            }
            elems_total += rows * width;
        } else {
            throw ConfigError("unknown metric '" + metric + "'");
        }
        rows_total += rows;
    }
    if (metric == "accuracy") return correct / static_cast<double>(rows_total);
    return sq_sum / static_cast<double>(elems_total);
}

}  // namespace detail

// Accuracy breaks argmax ties toward the lowest class index; mse averages
// over every target element.
inline double evaluate(Module& model, const Split& split, const std::string& metric,
                       std::size_t batch_size, const std::string& output_field = "logits") {
    return detail::score_split([&](const IOBundle& b) { return model.forward_bundle(b); }, split,
                               metric, batch_size, output_field);
}

// Evaluating through the box keeps registered hooks consistent: their
// capture caches are cleared before every forward pass.
inline double evaluate(DistillationBox& box, const Split& split, const std::string& metric,
                       std::size_t batch_size, const std::string& output_field = "logits") {
    return detail::score_split(
        [&](const IOBundle& b) {
            box.cache(Side::student).clear();
            box.cache(Side::teacher).clear();
            return box.student().forward_bundle(b);
        },
        split, metric, batch_size, output_field);
}

inline const Split& split_by_name(const Splits& data, const std::string& name) {
    if (name == "train") return data.train;
    if (name == "dev") return data.dev;
    if (name == "test") return data.test;
    throw ConfigError("unknown split '" + name + "'");
}

struct RunResult {
    std::vector<std::pair<std::string, double>> metrics;  // train.loss, dev.*, test.*
    double best_dev = 0.0;
    std::string log_path;
    std::string checkpoint_path;
    std::string metrics_path;
};

// Full training run: per-epoch scheduled lr, seeded shuffles, tab-separated
// log records, end-of-run checkpoint and single-line metrics file. Passing a
// checkpoint resumes from its completed-epoch count; because data, shuffle
// order, and initialization are all derived from the seed, the resumed run
// reproduces the uninterrupted one bit for bit.
inline RunResult run_experiment(ExperimentPlan& plan, const std::string& out_dir,
                                const std::string& resume_checkpoint = "") {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);

    RunResult result;
    result.log_path = (fs::path(out_dir) / "train.log").string();
    result.checkpoint_path = (fs::path(out_dir) / "model.ckpt").string();
    result.metrics_path = (fs::path(out_dir) / "metrics.json").string();

    auto opt = make_optimizer(*plan.optimizer_spec, plan.box->trainable_parameters());
    auto sched = make_scheduler(*plan.scheduler_spec, plan.optimizer_spec->lr);
    const Metric& primary = plan.metrics.front();

    std::size_t start_epoch = 0;
    double best_dev = primary.maximize ? -std::numeric_limits<double>::infinity()
                                       : std::numeric_limits<double>::infinity();
    if (!resume_checkpoint.empty()) {
        CheckpointData ckpt = load_checkpoint(resume_checkpoint);
        if (ckpt.seed != plan.seed) {
            throw TrainError("checkpoint seed " + std::to_string(ckpt.seed) +
                             " does not match run seed " + std::to_string(plan.seed));
        }
        restore_params(ckpt, plan.box->state_parameters());
        restore_optimizer(ckpt, *opt);
        start_epoch = ckpt.epoch;
        if (std::isfinite(ckpt.best_dev)) best_dev = ckpt.best_dev;
        if (start_epoch > plan.num_epochs) {
            throw TrainError("checkpoint already covers " + std::to_string(start_epoch) +
                             " epochs; run asks for " + std::to_string(plan.num_epochs));
        }
    }

    std::ofstream log(result.log_path, std::ios::app);
    if (!log) throw IoError("cannot open log file '" + result.log_path + "'");
    auto record = [&](std::size_t epoch, const std::string& split, const std::string& metric,
                      double value, double lr, double seconds) {
        char secs[32];
        std::snprintf(secs, sizeof(secs), "%.3f", seconds);
        log << epoch << '\t' << split << '\t' << metric << '\t' << detail::format_value(value)
            << '\t' << detail::format_value(lr) << '\t' << secs << '\n';
    };

    double final_train_loss = std::numeric_limits<double>::quiet_NaN();
    double final_dev = std::numeric_limits<double>::quiet_NaN();
    double final_test = std::numeric_limits<double>::quiet_NaN();
    for (std::size_t epoch = start_epoch; epoch < plan.num_epochs; ++epoch) {
        sched->apply(*opt, epoch);
        const double lr = opt->lr();

        EpochStats stats = train_epoch(plan, *opt, epoch);
        record(epoch, "train", "loss", stats.mean_loss, lr, stats.seconds);
        final_train_loss = stats.mean_loss;

        auto timed_eval = [&](const Split& split, double& seconds) {
            const auto start = std::chrono::steady_clock::now();
            const double v = evaluate(*plan.box, split, primary.name, plan.batch_size,
                                      plan.student->output_field);
            seconds = detail::elapsed_seconds(start);
            return v;
        };
        double dev_seconds = 0.0, test_seconds = 0.0;
        final_dev = timed_eval(plan.data.dev, dev_seconds);
        final_test = timed_eval(plan.data.test, test_seconds);
        record(epoch, "dev", primary.name, final_dev, lr, dev_seconds);
        record(epoch, "test", primary.name, final_test, lr, test_seconds);

        const bool better = primary.maximize ? final_dev > best_dev : final_dev < best_dev;
        if (better) best_dev = final_dev;
    }
    log.close();

    if (start_epoch == plan.num_epochs) {
        // resumed at completion: nothing left to train, still report metrics
        final_dev = evaluate(*plan.box, plan.data.dev, primary.name, plan.batch_size,
                             plan.student->output_field);
        final_test = evaluate(*plan.box, plan.data.test, primary.name, plan.batch_size,
                              plan.student->output_field);
    }

    CheckpointData snap = snapshot_state(plan.seed, plan.num_epochs, best_dev,
                                         plan.box->state_parameters(), opt.get());
    save_checkpoint(result.checkpoint_path, snap);

    result.best_dev = best_dev;
    if (std::isfinite(final_train_loss)) result.metrics.emplace_back("train.loss", final_train_loss);
    result.metrics.emplace_back("dev." + primary.name, final_dev);
    result.metrics.emplace_back("test." + primary.name, final_test);
    for (std::size_t i = 1; i < plan.metrics.size(); ++i) {
        const Metric& m = plan.metrics[i];
        result.metrics.emplace_back(
            "dev." + m.name,
            evaluate(*plan.box, plan.data.dev, m.name, plan.batch_size,
                     plan.student->output_field));
        result.metrics.emplace_back(
            "test." + m.name,
            evaluate(*plan.box, plan.data.test, m.name, plan.batch_size,
                     plan.student->output_field));
    }

    std::ofstream metrics_file(result.metrics_path);
    if (!metrics_file) throw IoError("cannot open metrics file '" + result.metrics_path + "'");
    metrics_file << "{";
    for (std::size_t i = 0; i < result.metrics.size(); ++i) {
        if (i) metrics_file << ", ";
        metrics_file << '"' << result.metrics[i].first
                     << "\": " << detail::format_value(result.metrics[i].second);
    }
    metrics_file << "}\n";

    return result;
}

}  // namespace kdkit

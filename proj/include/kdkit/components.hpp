#pragma once

#include <algorithm>
#include <memory>
#include <string>
#include <vector>

#include "kdkit/box.hpp"
#include "kdkit/data.hpp"
#include "kdkit/nn.hpp"
#include "kdkit/optim.hpp"
#include "kdkit/registry.hpp"

namespace kdkit {

// ---------------------------------------------------------------------------
// Config-composable feature transforms
// ---------------------------------------------------------------------------

struct Transform {
    virtual ~Transform() = default;
    virtual Tensor apply(const Tensor& x) const = 0;
};

struct ClipTransform : Transform {
    double lo, hi;
    ClipTransform(double lo_, double hi_) : lo(lo_), hi(hi_) {
        if (!(lo <= hi)) throw ConfigError("clip needs lo <= hi");
    }
    Tensor apply(const Tensor& x) const override {
        Tensor out = x.clone();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(out[i], lo, hi);
        return out;
    }
};

struct ScaleTransform : Transform {
    double factor;
    explicit ScaleTransform(double f) : factor(f) {}
    Tensor apply(const Tensor& x) const override {
        Tensor out = x.clone();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= factor;
        return out;
    }
};

struct IdentityTransform : Transform {
    Tensor apply(const Tensor& x) const override { return x.clone(); }
};

// per-column (x - mean) / std over a [n x d] matrix
struct StandardizeTransform : Transform {
    std::vector<double> mean, stddev;
    StandardizeTransform(std::vector<double> mean_, std::vector<double> stddev_)
        : mean(std::move(mean_)), stddev(std::move(stddev_)) {
        if (mean.size() != stddev.size()) {
            throw ConfigError("standardize needs mean and std of equal length");
        }
        for (double s : stddev) {
            if (!(s > 0.0)) throw ConfigError("standardize needs std > 0");
        }
    }
    Tensor apply(const Tensor& x) const override {
        if (x.rank() != 2 || x.dim(1) != mean.size()) {
            throw ShapeError("standardize expects [n x " + std::to_string(mean.size()) +
                             "] input");
        }
        Tensor out = x.clone();
        const std::size_t d = mean.size();
        for (std::size_t i = 0; i < x.dim(0); ++i) {
            for (std::size_t j = 0; j < d; ++j) {
                out[i * d + j] = (out[i * d + j] - mean[j]) / stddev[j];
            }
        }
        return out;
    }
};

struct ComposeTransform : Transform {
    std::vector<std::shared_ptr<Transform>> transforms;
    explicit ComposeTransform(std::vector<std::shared_ptr<Transform>> ts)
        : transforms(std::move(ts)) {}
    Tensor apply(const Tensor& x) const override {
        Tensor out = x.clone();
        for (const auto& t : transforms) out = t->apply(out);
        return out;
    }
};

// ---------------------------------------------------------------------------
// Component value types carried through the registry
// ---------------------------------------------------------------------------

// A built model plus the interface facts the experiment layer validates
// eagerly (input width vs dataset dims, head width vs class count).
struct ModelHandle {
    std::shared_ptr<Module> module;
    std::size_t in_dim = 0;
    std::size_t out_dim = 0;
    std::string output_field = "logits";
};

struct OptimizerSpec {
    std::string kind = "sgd";  // sgd | adam
    double lr = 0.01;
    double momentum = 0.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct SchedulerSpec {
    std::string kind = "constant";  // constant | step
    double gamma = 0.1;
    std::vector<std::size_t> milestones;
};

struct WeightedSumLoss {
    std::vector<LossTermSpec> terms;
};

struct Metric {
    std::string name;
    bool maximize = true;
};

inline std::unique_ptr<Optimizer> make_optimizer(const OptimizerSpec& spec,
                                                 std::vector<ParamRef> params) {
    if (spec.kind == "sgd") {
        return std::make_unique<SGD>(std::move(params), spec.lr, spec.momentum);
    }
    if (spec.kind == "adam") {
        return std::make_unique<Adam>(std::move(params), spec.lr, spec.beta1, spec.beta2,
                                      spec.eps);
    }
    throw ConfigError("unknown optimizer kind '" + spec.kind + "'");
}

inline std::unique_ptr<Scheduler> make_scheduler(const SchedulerSpec& spec, double base_lr) {
    if (spec.kind == "constant") return std::make_unique<ConstantSchedule>(base_lr);
    if (spec.kind == "step") {
        return std::make_unique<StepSchedule>(base_lr, spec.gamma, spec.milestones);
    }
    throw ConfigError("unknown scheduler kind '" + spec.kind + "'");
}

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

namespace detail {

inline std::size_t checked_count(ArgsView& a, const std::string& name) {
    const long long n = a.require_int(name);
    if (n < 0) a.fail("argument '" + name + "' must be >= 0");
    return static_cast<std::size_t>(n);
}

inline std::size_t count_or(ArgsView& a, const std::string& name, std::size_t dflt) {
    const long long n = a.int_or(name, static_cast<long long>(dflt));
    if (n < 0) a.fail("argument '" + name + "' must be >= 0");
    return static_cast<std::size_t>(n);
}

inline std::any dataset_builder(const std::string& kind, ArgsView& a) {
    auto spec = std::make_shared<DatasetSpec>();
    spec->kind = kind;
    spec->n_train = checked_count(a, "n_train");
    spec->n_dev = checked_count(a, "n_dev");
    spec->n_test = checked_count(a, "n_test");
    spec->dims = count_or(a, "dims", 2);
    spec->classes = count_or(a, "classes", 2);
    spec->targets = count_or(a, "targets", 1);
    spec->noise = a.number_or("noise", 0.1);
    spec->separation = a.number_or("separation", 2.0);
    spec->stream_label = a.string_or("stream_label", "data");
    a.finish();
    return spec;
}

inline LossTermSpec loss_term_from(const Resolved& node) {
    if (!node.is_mapping()) {
        throw ConfigError("loss term must be a mapping, got " + std::string(node.kind_name()));
    }
    LossTermSpec t;
    bool have_kind = false;
    for (const auto& [key, value] : node.entries()) {
        if (key == "kind") {
            t.kind = value.as_string();
            have_kind = true;
        } else if (key == "name") {
            t.name = value.as_string();
        } else if (key == "weight") {
            t.weight = value.number();
        } else if (key == "tau") {
            t.tau = value.number();
        } else if (key == "student") {
            t.student = value.as_string();
        } else if (key == "teacher") {
            t.teacher = value.as_string();
        } else if (key == "labels") {
            t.labels = value.as_string();
        } else if (key == "target") {
            t.target = value.as_string();
        } else if (key == "adapter") {
            t.adapter = value.as_string();
        } else {
            throw ConfigError("unexpected key '" + key + "' in loss term");
        }
    }
    if (!have_kind) throw ConfigError("loss term needs a 'kind'");
    if (t.name.empty()) t.name = t.kind;
    return t;
}

}  // namespace detail

// The standard component set resolved by shipped configs.
inline Registry standard_registry() {
    Registry r;

    r.add("dataset.blobs", "dataset",
          [](ArgsView& a) { return detail::dataset_builder("blobs", a); });
    r.add("dataset.rings", "dataset",
          [](ArgsView& a) { return detail::dataset_builder("rings", a); });
    r.add("dataset.linear_regression", "dataset",
          [](ArgsView& a) { return detail::dataset_builder("linear_regression", a); });

    r.add("model.mlp", "model", [](ArgsView& a) -> std::any {
        const std::size_t in_dim = detail::checked_count(a, "in_dim");
        const std::size_t out_dim = detail::checked_count(a, "out_dim");
        std::vector<std::size_t> hidden;
        for (long long h : a.int_seq("hidden_dims")) {
            if (h <= 0) a.fail("hidden_dims must be positive");
            hidden.push_back(static_cast<std::size_t>(h));
        }
        const std::string output_field = a.string_or("output_field", "logits");
        a.finish();
        auto handle = std::make_shared<ModelHandle>();
        handle->module = std::make_shared<MLP>(in_dim, hidden, out_dim, output_field);
        handle->in_dim = in_dim;
        handle->out_dim = out_dim;
        handle->output_field = output_field;
        return handle;
    });

    r.add("model.small_cnn", "model", [](ArgsView& a) -> std::any {
        const std::size_t in_channels = detail::checked_count(a, "in_channels");
        const std::size_t num_classes = detail::checked_count(a, "num_classes");
        std::vector<std::size_t> channels;
        for (long long c : a.int_seq("channels")) {
            if (c <= 0) a.fail("channels must be positive");
            channels.push_back(static_cast<std::size_t>(c));
        }
        a.finish();
        auto handle = std::make_shared<ModelHandle>();
        handle->module = std::make_shared<SmallCNN>(in_channels, channels, num_classes);
        handle->in_dim = in_channels;
        handle->out_dim = num_classes;
        return handle;
    });

    r.add("loss.weighted_sum", "loss", [](ArgsView& a) -> std::any {
        const Resolved& terms = a.require("terms");
        if (!terms.is_sequence() || terms.items().empty()) {
            a.fail("argument 'terms' expects a non-empty sequence");
        }
        auto loss = std::make_shared<WeightedSumLoss>();
        for (const auto& item : terms.items()) {
            loss->terms.push_back(detail::loss_term_from(item));
        }
        if (const Resolved* weights = a.find("weights")) {
            if (!weights->is_sequence() || weights->items().size() != loss->terms.size()) {
                a.fail("argument 'weights' must parallel 'terms'");
            }
            for (std::size_t i = 0; i < loss->terms.size(); ++i) {
                loss->terms[i].weight = weights->items()[i].number();
            }
        }
        a.finish();
        return loss;
    });

    r.add("optim.sgd", "optimizer", [](ArgsView& a) -> std::any {
        auto spec = std::make_shared<OptimizerSpec>();
        spec->kind = "sgd";
        spec->lr = a.require_number("lr");
        spec->momentum = a.number_or("momentum", 0.0);
        a.finish();
        return spec;
    });

    r.add("optim.adam", "optimizer", [](ArgsView& a) -> std::any {
        auto spec = std::make_shared<OptimizerSpec>();
        spec->kind = "adam";
        spec->lr = a.require_number("lr");
        spec->beta1 = a.number_or("beta1", 0.9);
        spec->beta2 = a.number_or("beta2", 0.999);
        spec->eps = a.number_or("eps", 1e-8);
        a.finish();
        return spec;
    });

    r.add("schedule.constant", "scheduler", [](ArgsView& a) -> std::any {
        a.finish();
        auto spec = std::make_shared<SchedulerSpec>();
        spec->kind = "constant";
        return spec;
    });

    r.add("schedule.step", "scheduler", [](ArgsView& a) -> std::any {
        auto spec = std::make_shared<SchedulerSpec>();
        spec->kind = "step";
        spec->gamma = a.require_number("gamma");
        for (long long m : a.int_seq("milestones")) {
            if (m < 0) a.fail("milestones must be >= 0");
            spec->milestones.push_back(static_cast<std::size_t>(m));
        }
        a.finish();
        return spec;
    });

    r.add("transform.clip", "transform", [](ArgsView& a) -> std::any {
        const double lo = a.require_number("lo");
        const double hi = a.require_number("hi");
        a.finish();
        return std::shared_ptr<Transform>(std::make_shared<ClipTransform>(lo, hi));
    });

    r.add("transform.scale", "transform", [](ArgsView& a) -> std::any {
        const double factor = a.require_number("factor");
        a.finish();
        return std::shared_ptr<Transform>(std::make_shared<ScaleTransform>(factor));
    });

    r.add("transform.identity", "transform", [](ArgsView& a) -> std::any {
        a.finish();
        return std::shared_ptr<Transform>(std::make_shared<IdentityTransform>());
    });

    r.add("transform.standardize", "transform", [](ArgsView& a) -> std::any {
        auto mean = a.number_seq("mean");
        auto stddev = a.number_seq("std");
        a.finish();
        return std::shared_ptr<Transform>(
            std::make_shared<StandardizeTransform>(std::move(mean), std::move(stddev)));
    });

    r.add("transform.compose", "transform", [](ArgsView& a) -> std::any {
        auto transforms = a.component_seq<Transform>("transforms", "transform");
        a.finish();
        return std::shared_ptr<Transform>(
            std::make_shared<ComposeTransform>(std::move(transforms)));
    });

    r.add("metric.accuracy", "metric", [](ArgsView& a) -> std::any {
        a.finish();
        return std::make_shared<Metric>(Metric{"accuracy", true});
    });

    r.add("metric.mse", "metric", [](ArgsView& a) -> std::any {
        a.finish();
        return std::make_shared<Metric>(Metric{"mse", false});
    });

    return r;
}

}  // namespace kdkit

#pragma once

#include <memory>
#include <string>
#include <vector>

#include "kdkit/box.hpp"
#include "kdkit/checkpoint.hpp"
#include "kdkit/components.hpp"
#include "kdkit/config.hpp"
#include "kdkit/data.hpp"
#include "kdkit/registry.hpp"

namespace kdkit {

// A fully resolved experiment: data generated, models initialized, teacher
// frozen, hooks and adapters attached, loss terms registered. Running it
// needs no further configuration decisions.
struct ExperimentPlan {
    std::uint64_t seed = 0;
    std::shared_ptr<DatasetSpec> dataset_spec;
    Splits data;
    std::shared_ptr<ModelHandle> student;
    std::shared_ptr<ModelHandle> teacher;  // null for single-model training
    std::shared_ptr<DistillationBox> box;
    std::shared_ptr<OptimizerSpec> optimizer_spec;
    std::shared_ptr<SchedulerSpec> scheduler_spec;
    std::size_t num_epochs = 1;
    std::size_t batch_size = 1;
    std::vector<Metric> metrics;  // first entry drives logging and selection
    std::string eval_split = "test";
    std::string teacher_checkpoint;
    std::vector<std::string> build_records;
};

namespace detail {

inline Capture capture_from(const std::string& s) {
    if (s == "input") return Capture::input;
    if (s == "output") return Capture::output;
    if (s == "both") return Capture::both;
    throw ConfigError("capture must be input, output, or both; got '" + s + "'");
}

inline Side side_from(const std::string& s) {
    if (s == "student") return Side::student;
    if (s == "teacher") return Side::teacher;
    throw ConfigError("side must be student or teacher; got '" + s + "'");
}

inline std::size_t positive_count(const Resolved& v, const std::string& what) {
    if (!v.is_int() || v.as_int() < 1) {
        throw ConfigError("'" + what + "' must be a positive integer");
    }
    return static_cast<std::size_t>(v.as_int());
}

template <class T>
std::shared_ptr<T> component_value(const Resolved& v, const std::string& what,
                                   const std::string& kind) {
    if (!v.is_component() || v.component().kind != kind) {
        throw ConfigError("'" + what + "' must be a " + kind + " component");
    }
    auto* p = std::any_cast<std::shared_ptr<T>>(&v.component().value);
    if (!p) throw ConfigError("'" + what + "' component has an unexpected value type");
    return *p;
}

inline Metric make_metric(const Registry& registry, const std::string& name) {
    const std::string key = "metric." + name;
    if (!registry.contains(key)) throw ConfigError("unknown metric '" + name + "'");
    ArgsView args(key, {}, {});
    std::any value = registry.lookup(key).builder(args);
    auto* p = std::any_cast<std::shared_ptr<Metric>>(&value);
    if (!p) throw ConfigError("'" + key + "' is not a metric component");
    return **p;
}

}  // namespace detail

inline ExperimentPlan build_experiment(const ConfigValue& config, const Registry& registry) {
    if (!config.is_mapping()) throw ConfigError("config root must be a mapping");
    for (const char* section : {"seed", "datasets", "models", "train"}) {
        if (!config.has(section)) {
            throw ConfigError("missing required section '" + std::string(section) + "'");
        }
    }

    // a declared dependency list makes the config self-describing; check it
    // before building anything so the error names the absent component
    if (const ConfigValue* requires_node = config.find("requires")) {
        for (const auto& item : requires_node->items()) {
            const std::string& key = item.as_string();
            if (!registry.contains(key)) {
                throw ConfigError("config requires unregistered component '" + key + "'");
            }
        }
    }

    ExperimentPlan plan;
    const ConfigValue& seed_node = config.at("seed");
    if (!seed_node.is_int() || seed_node.as_int() < 0) {
        throw ConfigError("'seed' must be a non-negative integer");
    }
    plan.seed = static_cast<std::uint64_t>(seed_node.as_int());

    Instantiator inst(config, registry);

    // evaluate sections in document order so the build log reads top-down
    if (!config.at("datasets").is_mapping() || config.at("datasets").entries().empty()) {
        throw ConfigError("'datasets' must declare at least one dataset");
    }
    for (const auto& [name, node] : config.at("datasets").entries()) {
        inst.resolve_path("datasets." + name);
    }
    if (!config.at("models").is_mapping() || config.at("models").entries().empty()) {
        throw ConfigError("'models' must declare at least one model");
    }
    for (const auto& [name, node] : config.at("models").entries()) {
        inst.resolve_path("models." + name);
    }
    Resolved train = inst.resolve_path("train");
    if (!train.is_mapping()) throw ConfigError("'train' must be a mapping");

    // dataset: explicit !ref, or the sole datasets entry
    if (const Resolved* ds = train.find("dataset")) {
        plan.dataset_spec = detail::component_value<DatasetSpec>(*ds, "train.dataset", "dataset");
    } else if (config.at("datasets").entries().size() == 1) {
        Resolved only = inst.resolve_path("datasets." +
                                          config.at("datasets").entries().front().first);
        plan.dataset_spec = detail::component_value<DatasetSpec>(only, "datasets", "dataset");
    } else {
        throw ConfigError("several datasets declared; set train.dataset to one of them");
    }

    plan.student = detail::component_value<ModelHandle>(train.at("model"), "train.model", "model");
    if (const Resolved* t = train.find("teacher")) {
        plan.teacher = detail::component_value<ModelHandle>(*t, "train.teacher", "model");
    }
    if (const Resolved* tc = train.find("teacher_checkpoint")) {
        if (!plan.teacher) {
            throw ConfigError("train.teacher_checkpoint given without train.teacher");
        }
        plan.teacher_checkpoint = tc->as_string();
    }

    auto loss = detail::component_value<WeightedSumLoss>(train.at("loss"), "train.loss", "loss");
    plan.optimizer_spec = detail::component_value<OptimizerSpec>(train.at("optimizer"),
                                                                 "train.optimizer", "optimizer");
    if (const Resolved* s = train.find("scheduler")) {
        plan.scheduler_spec =
            detail::component_value<SchedulerSpec>(*s, "train.scheduler", "scheduler");
    } else {
        plan.scheduler_spec = std::make_shared<SchedulerSpec>();
    }

    plan.num_epochs = detail::positive_count(train.at("epochs"), "train.epochs");
    plan.batch_size = detail::positive_count(train.at("batch_size"), "train.batch_size");

    // metric, defaulted by task
    const bool regression = plan.dataset_spec->kind == "linear_regression";
    std::string metric = regression ? "mse" : "accuracy";
    if (const Resolved* m = train.find("metric")) metric = m->as_string();
    if (regression && metric == "accuracy") {
        throw ConfigError("metric 'accuracy' needs classification data");
    }
    if (!regression && metric == "mse") {
        throw ConfigError("metric 'mse' needs regression data");
    }
    plan.metrics = {detail::make_metric(registry, metric)};

    // eager interface validation: model widths against the dataset
    const DatasetSpec& ds = *plan.dataset_spec;
    const std::size_t want_out = regression ? ds.targets : ds.classes;
    auto check_model = [&](const ModelHandle& h, const std::string& who) {
        if (h.in_dim != ds.dims) {
            throw ConfigError(who + " expects input width " + std::to_string(h.in_dim) +
                              " but the dataset has " + std::to_string(ds.dims) + " features");
        }
        if (h.out_dim != want_out) {
            throw ConfigError(who + " has head width " + std::to_string(h.out_dim) +
                              " but the dataset needs " + std::to_string(want_out));
        }
    };
    check_model(*plan.student, "train.model");
    if (plan.teacher) {
        check_model(*plan.teacher, "train.teacher");
        if (plan.teacher->module == plan.student->module) {
            throw ConfigError("train.model and train.teacher must be different models");
        }
    }

    // deterministic initialization; the student stream does not depend on
    // whether a teacher exists
    init_parameters(*plan.student->module, plan.seed, "student");
    if (plan.teacher) {
        init_parameters(*plan.teacher->module, plan.seed, "teacher");
        if (!plan.teacher_checkpoint.empty()) {
            CheckpointData ckpt = load_checkpoint(plan.teacher_checkpoint);
            restore_params(ckpt, plan.teacher->module->named_parameters());
        }
    }

    plan.box = std::make_shared<DistillationBox>(
        plan.student->module, plan.teacher ? plan.teacher->module : nullptr);

    if (const Resolved* hooks = train.find("hooks")) {
        for (const auto& h : hooks->items()) {
            if (!h.is_mapping()) throw ConfigError("each hook must be a mapping");
            const Side side = detail::side_from(h.at("model").as_string());
            HookHandle handle;
            handle.target_path = h.at("path").as_string();
            handle.capture = detail::capture_from(
                h.find("capture") ? h.at("capture").as_string() : "output");
            handle.slot = h.at("slot").as_string();
            plan.box->register_hook(side, handle);
        }
    }

    std::vector<std::string> adapter_names;
    if (const Resolved* adapters = train.find("adapters")) {
        for (const auto& a : adapters->items()) {
            if (!a.is_mapping()) throw ConfigError("each adapter must be a mapping");
            const std::string name = a.at("name").as_string();
            const Side side = detail::side_from(a.at("side").as_string());
            const std::size_t out_dim = detail::positive_count(a.at("out_dim"), "adapter out_dim");
            const bool trainable = a.find("trainable") ? a.at("trainable").as_bool() : false;
            plan.box->attach_adapter(name, side, a.at("source").as_string(), out_dim, trainable);
            adapter_names.push_back(name);
        }
    }

    for (const auto& term : loss->terms) {
        if (!term.adapter.empty()) {
            bool known = false;
            for (const auto& n : adapter_names) known = known || n == term.adapter;
            if (!known) {
                throw ConfigError("loss term '" + term.name + "' references unknown adapter '" +
                                  term.adapter + "'");
            }
        }
        plan.box->add_term(term);
    }

    plan.data = generate(ds, plan.seed);

    // optional deterministic preprocessing of every split's inputs
    if (const Resolved* t = train.find("transform")) {
        auto transform =
            detail::component_value<Transform>(*t, "train.transform", "transform");
        for (Split* split : {&plan.data.train, &plan.data.dev, &plan.data.test}) {
            split->inputs = transform->apply(split->inputs);
        }
    }

    if (!adapter_names.empty()) {
        auto probe = iterate_batches(plan.data.train, plan.batch_size, nullptr);
        plan.box->materialize_adapters(probe.front(), plan.seed);
    }

    if (const ConfigValue* test = config.find("test")) {
        Resolved t = inst.resolve_path("test");
        if (!t.is_mapping()) throw ConfigError("'test' must be a mapping");
        if (const Resolved* split = t.find("split")) {
            plan.eval_split = split->as_string();
            if (plan.eval_split != "train" && plan.eval_split != "dev" &&
                plan.eval_split != "test") {
                throw ConfigError("test.split must be train, dev, or test");
            }
        }
        if (const Resolved* m = t.find("metric")) {
            Metric extra = detail::make_metric(registry, m->as_string());
            if (extra.name != plan.metrics[0].name) plan.metrics.push_back(extra);
        }
    }

    plan.build_records = inst.records();
    return plan;
}

}  // namespace kdkit

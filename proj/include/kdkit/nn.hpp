#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "kdkit/ops.hpp"
#include "kdkit/rng.hpp"
#include "kdkit/tensor.hpp"

namespace kdkit {

// Ordered named fields exchanged with a model. Consumers address fields by
// name only, so a bundle may carry more than a model needs.
class IOBundle {
public:
    bool has(const std::string& name) const { return find(name) != fields_.end(); }

    const Tensor& get(const std::string& name) const {
        auto it = find(name);
        if (it == fields_.end()) {
            throw Error("missing field '" + name + "' in bundle; available: " + names());
        }
        return it->second;
    }

    void set(const std::string& name, Tensor value) {
        auto it = find(name);
        if (it != fields_.end()) {
            it->second = std::move(value);
        } else {
            fields_.emplace_back(name, std::move(value));
        }
    }

    std::size_t size() const { return fields_.size(); }
    auto begin() const { return fields_.begin(); }
    auto end() const { return fields_.end(); }

    std::string names() const {
        std::string out = "[";
        for (const auto& kv : fields_) {
            if (out.size() > 1) out += ", ";
            out += kv.first;
        }
        return out + "]";
    }

private:
    using Store = std::vector<std::pair<std::string, Tensor>>;

    Store::const_iterator find(const std::string& name) const {
        return std::find_if(fields_.begin(), fields_.end(),
                            [&](const auto& kv) { return kv.first == name; });
    }
    Store::iterator find(const std::string& name) {
        return std::find_if(fields_.begin(), fields_.end(),
                            [&](const auto& kv) { return kv.first == name; });
    }

    Store fields_;
};

// Captured hook outputs for one forward pass. Slots are reserved when hooks
// are registered; each reserved slot must be written exactly once per pass.
class IOCache {
public:
    void reserve_slot(const std::string& slot) {
        if (std::find(reserved_.begin(), reserved_.end(), slot) != reserved_.end()) {
            throw Error("hook slot '" + slot + "' already registered");
        }
        reserved_.push_back(slot);
    }

    void release_slot(const std::string& slot) {
        reserved_.erase(std::remove(reserved_.begin(), reserved_.end(), slot), reserved_.end());
    }

    bool slot_registered(const std::string& slot) const {
        return std::find(reserved_.begin(), reserved_.end(), slot) != reserved_.end();
    }

    void clear() { entries_.clear(); }

    void put(const std::string& slot, Tensor value) {
        for (auto& kv : entries_) {
            if (kv.first == slot) {
                throw Error("hook slot '" + slot + "' captured twice in one forward pass");
            }
        }
        entries_.emplace_back(slot, std::move(value));
    }

    bool has(const std::string& slot) const {
        for (const auto& kv : entries_)
            if (kv.first == slot) return true;
        return false;
    }

    const Tensor& get(const std::string& slot) const {
        for (const auto& kv : entries_)
            if (kv.first == slot) return kv.second;
        std::string avail;
        for (const auto& kv : entries_) {
            if (!avail.empty()) avail += ", ";
            avail += kv.first;
        }
        throw Error("no captured tensor in slot '" + slot + "'; cache holds: [" + avail + "]");
    }

    std::size_t size() const { return entries_.size(); }

    // True when every reserved slot has been written ("both" hooks reserve
    // their two derived slots individually).
    bool fully_populated() const {
        for (const auto& slot : reserved_)
            if (!has(slot)) return false;
        return true;
    }

private:
    std::vector<std::pair<std::string, Tensor>> entries_;
    std::vector<std::string> reserved_;
};

enum class Capture { input, output, both };

struct HookHandle {
    std::string target_path;
    Capture capture = Capture::output;
    std::string slot;
};

// Trainable parameter reference: dot path plus the tensor it names.
struct ParamRef {
    std::string path;
    Tensor* tensor;
    bool frozen() const { return !tensor->requires_grad(); }
};

// Node in a named module tree. forward() is the subclass computation;
// operator() wraps it so registered hooks observe every submodule call.
class Module {
public:
    virtual ~Module() = default;

    virtual Tensor forward(const Tensor& x) = 0;

    Tensor operator()(const Tensor& x) {
        Tensor out = forward(x);
        for (const auto& h : hooks_) {
            switch (h.capture) {
                case Capture::input: h.cache->put(h.slot, x); break;
                case Capture::output: h.cache->put(h.slot, out); break;
                case Capture::both:
                    h.cache->put(h.slot + ".input", x);
                    h.cache->put(h.slot + ".output", out);
                    break;
            }
        }
        return out;
    }

    // --- tree structure -----------------------------------------------------

    void add_child(const std::string& name, std::shared_ptr<Module> child) {
        for (const auto& kv : children_) {
            if (kv.first == name) throw Error("duplicate child module name '" + name + "'");
        }
        children_.emplace_back(name, std::move(child));
    }

    const std::vector<std::pair<std::string, std::shared_ptr<Module>>>& children() const {
        return children_;
    }

    // Dot-path lookup; "" is the module itself.
    Module& get_submodule(const std::string& path) {
        if (path.empty()) return *this;
        const auto dot = path.find('.');
        const std::string head = path.substr(0, dot);
        for (auto& kv : children_) {
            if (kv.first == head) {
                return dot == std::string::npos ? *kv.second
                                                : kv.second->get_submodule(path.substr(dot + 1));
            }
        }
        std::string avail;
        for (const auto& kv : children_) {
            if (!avail.empty()) avail += ", ";
            avail += kv.first;
        }
        throw Error("unknown submodule '" + head + "'; available here: [" + avail + "]");
    }

    // --- parameters -----------------------------------------------------------

    // Parameters owned directly by this node (not by children).
    virtual std::vector<std::pair<std::string, Tensor*>> local_parameters() { return {}; }

    std::vector<ParamRef> named_parameters() {
        std::vector<ParamRef> out;
        collect_parameters("", out);
        return out;
    }

    void freeze() {
        for (auto& p : named_parameters()) p.tensor->set_requires_grad(false);
    }

    bool all_frozen() {
        for (auto& p : named_parameters())
            if (!p.frozen()) return false;
        return true;
    }

    std::size_t parameter_count() {
        std::size_t n = 0;
        for (auto& p : named_parameters()) n += p.tensor->size();
        return n;
    }

    // --- hooks ----------------------------------------------------------------

    std::uint64_t add_hook(Capture capture, const std::string& slot, IOCache& cache) {
        const std::uint64_t id = next_hook_id();
        if (capture == Capture::both) {
            cache.reserve_slot(slot + ".input");
            cache.reserve_slot(slot + ".output");
        } else {
            cache.reserve_slot(slot);
        }
        hooks_.push_back(HookEntry{id, capture, slot, &cache});
        return id;
    }

    bool remove_hook(std::uint64_t id) {
        for (std::size_t i = 0; i < hooks_.size(); ++i) {
            if (hooks_[i].id == id) {
                if (hooks_[i].capture == Capture::both) {
                    hooks_[i].cache->release_slot(hooks_[i].slot + ".input");
                    hooks_[i].cache->release_slot(hooks_[i].slot + ".output");
                } else {
                    hooks_[i].cache->release_slot(hooks_[i].slot);
                }
                hooks_.erase(hooks_.begin() + static_cast<std::ptrdiff_t>(i));
                return true;
            }
        }
        for (auto& kv : children_)
            if (kv.second->remove_hook(id)) return true;
        return false;
    }

    // --- bundle interface -------------------------------------------------------

    virtual std::string input_field() const { return "input"; }
    virtual std::string output_field() const { return "logits"; }

    IOBundle forward_bundle(const IOBundle& in) {
        IOBundle out;
        out.set(output_field(), (*this)(in.get(input_field())));
        return out;
    }

private:
    struct HookEntry {
        std::uint64_t id;
        Capture capture;
        std::string slot;
        IOCache* cache;
    };

    static std::uint64_t next_hook_id() {
        static std::atomic<std::uint64_t> counter{0};
        return ++counter;
    }

    void collect_parameters(const std::string& prefix, std::vector<ParamRef>& out) {
        for (auto& kv : local_parameters()) {
            out.push_back(ParamRef{prefix.empty() ? kv.first : prefix + "." + kv.first, kv.second});
        }
        for (auto& kv : children_) {
            kv.second->collect_parameters(prefix.empty() ? kv.first : prefix + "." + kv.first, out);
        }
    }

    std::vector<std::pair<std::string, std::shared_ptr<Module>>> children_;
    std::vector<HookEntry> hooks_;
};

inline std::uint64_t register_forward_hook(Module& model, const HookHandle& handle,
                                           IOCache& cache) {
    Module& target = model.get_submodule(handle.target_path);
    return target.add_hook(handle.capture, handle.slot, cache);
}

inline void remove_forward_hook(Module& model, std::uint64_t id) {
    if (!model.remove_hook(id)) {
        throw Error("no forward hook with id " + std::to_string(id));
    }
}

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

// y = x W^T + b with weight [out x in], bias [out].
class Linear : public Module {
public:
    Linear(std::size_t in_dim, std::size_t out_dim)
        : weight_(Shape{out_dim, in_dim}), bias_(Shape{out_dim}) {
        weight_.enable_grad();
        bias_.enable_grad();
    }

    Tensor forward(const Tensor& x) override {
        return add_row_bias(matmul(x, transpose2d(weight_)), bias_);
    }

    std::vector<std::pair<std::string, Tensor*>> local_parameters() override {
        return {{"weight", &weight_}, {"bias", &bias_}};
    }

    std::size_t in_dim() const { return weight_.dim(1); }
    std::size_t out_dim() const { return weight_.dim(0); }
    Tensor& weight() { return weight_; }
    Tensor& bias() { return bias_; }

private:
    Tensor weight_;
    Tensor bias_;
};

class ReLU : public Module {
public:
    Tensor forward(const Tensor& x) override { return relu(x); }
};

class Conv2d : public Module {
public:
    Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
           std::size_t stride = 1, std::size_t padding = 0)
        : weight_(Shape{out_channels, in_channels, kernel, kernel}),
          bias_(Shape{out_channels}),
          stride_(stride),
          padding_(padding) {
        weight_.enable_grad();
        bias_.enable_grad();
    }

    Tensor forward(const Tensor& x) override {
        return add_channel_bias(conv2d(x, weight_, stride_, padding_), bias_);
    }

    std::vector<std::pair<std::string, Tensor*>> local_parameters() override {
        return {{"weight", &weight_}, {"bias", &bias_}};
    }

private:
    Tensor weight_;
    Tensor bias_;
    std::size_t stride_;
    std::size_t padding_;
};

class GlobalAvgPool : public Module {
public:
    Tensor forward(const Tensor& x) override { return global_avg_pool(x); }
};

class Flatten : public Module {
public:
    Tensor forward(const Tensor& x) override { return flatten2d(x); }
};

// Runs its children in declaration order.
class Sequential : public Module {
public:
    Tensor forward(const Tensor& x) override {
        Tensor h = x;
        for (const auto& kv : children()) h = (*kv.second)(h);
        return h;
    }
};

// ---------------------------------------------------------------------------
// models
// ---------------------------------------------------------------------------

// Fully connected stack: in -> hidden... -> out with ReLU between layers.
// With no hidden layers this is a bare affine model (used for regression).
class MLP : public Sequential {
public:
    MLP(std::size_t in_dim, std::vector<std::size_t> hidden_dims, std::size_t out_dim,
        std::string output_field = "logits")
        : output_field_(std::move(output_field)) {
        std::size_t prev = in_dim;
        for (std::size_t i = 0; i < hidden_dims.size(); ++i) {
            add_child("fc" + std::to_string(i + 1), std::make_shared<Linear>(prev, hidden_dims[i]));
            add_child("act" + std::to_string(i + 1), std::make_shared<ReLU>());
            prev = hidden_dims[i];
        }
        add_child("head", std::make_shared<Linear>(prev, out_dim));
    }

    std::string output_field() const override { return output_field_; }

private:
    std::string output_field_;
};

// Two conv blocks, global average pooling, linear head.
class SmallCNN : public Sequential {
public:
    SmallCNN(std::size_t in_channels, std::vector<std::size_t> channels, std::size_t num_classes) {
        if (channels.size() != 2) {
            throw Error("small_cnn expects exactly two channel counts, got " +
                        std::to_string(channels.size()));
        }
        auto backbone = std::make_shared<Sequential>();
        auto layer1 = std::make_shared<Sequential>();
        layer1->add_child("conv", std::make_shared<Conv2d>(in_channels, channels[0], 3, 1, 1));
        layer1->add_child("act", std::make_shared<ReLU>());
        auto layer2 = std::make_shared<Sequential>();
        layer2->add_child("conv", std::make_shared<Conv2d>(channels[0], channels[1], 3, 2, 1));
        layer2->add_child("act", std::make_shared<ReLU>());
        backbone->add_child("layer1", layer1);
        backbone->add_child("layer2", layer2);
        add_child("backbone", backbone);
        add_child("pool", std::make_shared<GlobalAvgPool>());
        add_child("head", std::make_shared<Linear>(channels[1], num_classes));
    }
};

// Affine projection attached to a hook slot during distillation. The input
// width is only known once a feature has been captured, so the layer is
// materialized lazily on first use.
class AffineAdapter : public Module {
public:
    explicit AffineAdapter(std::size_t out_dim) : out_dim_(out_dim) {}

    bool materialized() const { return linear_ != nullptr; }

    void materialize(std::size_t in_dim) {
        if (linear_) return;
        linear_ = std::make_shared<Linear>(in_dim, out_dim_);
        add_child("proj", linear_);
    }

    Tensor forward(const Tensor& x) override {
        if (x.rank() != 2) {
            throw ShapeError("adapter expects rank-2 features, got " + shape_str(x.shape()));
        }
        materialize(x.dim(1));
        return (*linear_)(x);
    }

    std::size_t out_dim() const { return out_dim_; }
    Linear& linear() {
        if (!linear_) throw Error("adapter not materialized yet");
        return *linear_;
    }

private:
    std::size_t out_dim_;
    std::shared_ptr<Linear> linear_;
};

// ---------------------------------------------------------------------------
// initialization
// ---------------------------------------------------------------------------

namespace detail {

inline std::size_t fan_in(const Tensor& weight) {
    return weight.dim(0) == 0 ? 0 : weight.size() / weight.dim(0);
}

}  // namespace detail

// Kaiming-uniform fan-in init for weights, zeros for biases. Every parameter
// draws from its own stream keyed by (seed, role, path), and parameters are
// visited in path-lexicographic order, so the values a parameter receives do
// not depend on construction order or on what else the experiment builds.
inline void init_parameters(Module& root, std::uint64_t seed, const std::string& role) {
    auto params = root.named_parameters();
    std::sort(params.begin(), params.end(),
              [](const ParamRef& a, const ParamRef& b) { return a.path < b.path; });
    for (auto& p : params) {
        RngStream stream(seed, "init." + role + "." + p.path);
        Tensor& t = *p.tensor;
        const bool is_bias = p.path.size() >= 5 && p.path.rfind(".bias") == p.path.size() - 5;
        if (is_bias || t.rank() < 2) {
            for (std::size_t i = 0; i < t.size(); ++i) t[i] = 0.0;
        } else {
            const double bound = std::sqrt(6.0 / static_cast<double>(detail::fan_in(t)));
            for (std::size_t i = 0; i < t.size(); ++i) t[i] = stream.uniform(-bound, bound);
        }
    }
}

// Exact identity projection; requires square weight.
inline void identity_init(Linear& layer) {
    if (layer.in_dim() != layer.out_dim()) {
        throw ShapeError("identity init needs a square weight, got " +
                         shape_str(layer.weight().shape()));
    }
    Tensor& w = layer.weight();
    const std::size_t n = layer.in_dim();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = 0.0;
    for (std::size_t i = 0; i < n; ++i) w[i * n + i] = 1.0;
    Tensor& b = layer.bias();
    for (std::size_t i = 0; i < b.size(); ++i) b[i] = 0.0;
}

}  // namespace kdkit

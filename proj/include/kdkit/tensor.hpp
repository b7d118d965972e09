#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "kdkit/error.hpp"

namespace kdkit {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

namespace detail {
// Persistent gradient storage for a leaf tensor. Shared by all copies of the
// tensor; survives across tapes until zero_grad().
struct GradSlot {
    bool requires_grad = true;
    std::vector<double> grad;  // empty means "absent"
};
}  // namespace detail

class Tape;

namespace detail {
Tape*& current_tape_slot();
}

// Dense row-major tensor of 64-bit floats with value semantics (copies share
// the underlying buffer). A tensor may be a trainable leaf (it then owns a
// GradSlot) or an intermediate recorded on the active tape.
class Tensor {
public:
    Tensor() : Tensor(Shape{}) {}

    explicit Tensor(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<double>>(numel(shape_), fill)) {}

    static Tensor from_data(Shape shape, std::vector<double> values) {
        if (numel(shape) != values.size()) {
            throw ShapeError("tensor data size " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape));
        }
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = std::make_shared<std::vector<double>>(std::move(values));
        return t;
    }

    static Tensor scalar(double v) { return from_data({}, {v}); }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_->size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }

    double* data() { return data_->data(); }
    const double* data() const { return data_->data(); }
    std::vector<double>& values() { return *data_; }
    const std::vector<double>& values() const { return *data_; }

    double operator[](std::size_t i) const { return (*data_)[i]; }
    double& operator[](std::size_t i) { return (*data_)[i]; }

    // Value of a scalar tensor.
    double item() const {
        if (size() != 1) {
            throw ShapeError("item() requires a scalar tensor, got shape " + shape_str(shape_));
        }
        return (*data_)[0];
    }

    // Marks this tensor as a trainable leaf. Copies share the flag.
    Tensor& enable_grad() {
        if (!slot_) slot_ = std::make_shared<detail::GradSlot>();
        slot_->requires_grad = true;
        return *this;
    }

    void set_requires_grad(bool on) {
        if (on) {
            enable_grad();
        } else if (slot_) {
            slot_->requires_grad = false;
        }
    }

    bool requires_grad() const { return slot_ && slot_->requires_grad; }

    // Accumulated gradient of a leaf; nullptr when absent.
    const std::vector<double>* grad() const {
        if (!slot_ || slot_->grad.empty()) return nullptr;
        return &slot_->grad;
    }

    void zero_grad() {
        if (slot_) slot_->grad.clear();
    }

    // Same data, no recorded history and no leaf slot.
    Tensor detach() const {
        Tensor t;
        t.shape_ = shape_;
        t.data_ = data_;
        return t;
    }

    Tensor clone() const {
        return from_data(shape_, *data_);
    }

    // Tape bookkeeping (used by the ops layer).
    int node() const { return node_; }
    std::uint64_t tape_id() const { return tape_id_; }
    void set_node(std::uint64_t tape_id, int node) {
        tape_id_ = tape_id;
        node_ = node;
    }
    const std::shared_ptr<detail::GradSlot>& grad_slot() const { return slot_; }

private:
    Shape shape_;
    std::shared_ptr<std::vector<double>> data_;
    std::shared_ptr<detail::GradSlot> slot_;
    std::uint64_t tape_id_ = 0;
    int node_ = -1;
};

// Reverse-mode tape. Nodes are appended in execution order, which is a
// topological order by construction. A fresh tape is opened per training
// step; leaf gradients outlive the tape in each leaf's GradSlot.
class Tape {
public:
    Tape() : id_(next_id()) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    std::uint64_t id() const { return id_; }
    std::size_t node_count() const { return nodes_.size(); }

    using BackwardFn = std::function<void(const std::vector<double>& out_grad, Tape&)>;

    int add_node(std::size_t out_size, BackwardFn backward) {
        nodes_.push_back(Node{out_size, std::move(backward)});
        return static_cast<int>(nodes_.size() - 1);
    }

    // Node id of a leaf tensor on this tape, creating it on first use. The
    // leaf's backward accumulates into its persistent GradSlot.
    int leaf_node(const Tensor& t) {
        auto slot = t.grad_slot();
        auto it = leaves_.find(slot.get());
        if (it != leaves_.end()) return it->second;
        const std::size_t n = t.size();
        int id = add_node(n, [slot, n](const std::vector<double>& g, Tape&) {
            if (slot->grad.empty()) slot->grad.assign(n, 0.0);
            for (std::size_t i = 0; i < n; ++i) slot->grad[i] += g[i];
        });
        leaves_.emplace(slot.get(), id);
        return id;
    }

    // Gradient buffer of an intermediate node, allocated on first touch.
    std::vector<double>& grad(int node) {
        auto& g = grads_[static_cast<std::size_t>(node)];
        if (g.empty()) g.assign(nodes_[static_cast<std::size_t>(node)].size, 0.0);
        return g;
    }

    // Reverse topological sweep from a scalar loss recorded on this tape.
    void backward(const Tensor& loss) {
        if (loss.size() != 1) {
            throw ShapeError("backward() requires a scalar loss, got shape " +
                             shape_str(loss.shape()));
        }
        if (loss.tape_id() != id_ || loss.node() < 0) {
            throw Error("backward() loss is not recorded on the active tape");
        }
        grads_.assign(nodes_.size(), {});
        grad(loss.node())[0] = 1.0;
        for (int i = loss.node(); i >= 0; --i) {
            auto& g = grads_[static_cast<std::size_t>(i)];
            if (g.empty()) continue;
            nodes_[static_cast<std::size_t>(i)].backward(g, *this);
        }
        grads_.clear();
    }

private:
    struct Node {
        std::size_t size;
        BackwardFn backward;
    };

    static std::uint64_t next_id() {
        static std::atomic<std::uint64_t> counter{0};
        return ++counter;
    }

    std::uint64_t id_;
    std::vector<Node> nodes_;
    std::vector<std::vector<double>> grads_;
    std::unordered_map<detail::GradSlot*, int> leaves_;
};

namespace detail {
inline Tape*& current_tape_slot() {
    thread_local Tape* tape = nullptr;
    return tape;
}
}  // namespace detail

inline Tape* current_tape() { return detail::current_tape_slot(); }

// Opens a fresh tape for the current thread; restores the previous one on exit.
class TapeScope {
public:
    TapeScope() : prev_(detail::current_tape_slot()) {
        detail::current_tape_slot() = &tape_;
    }
    ~TapeScope() { detail::current_tape_slot() = prev_; }

    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

    Tape& tape() { return tape_; }

private:
    Tape tape_;
    Tape* prev_;
};

// Disables recording within a scope (teacher forwards, evaluation).
class NoGradScope {
public:
    NoGradScope() : prev_(detail::current_tape_slot()) {
        detail::current_tape_slot() = nullptr;
    }
    ~NoGradScope() { detail::current_tape_slot() = prev_; }

    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    Tape* prev_;
};

// Runs the reverse sweep on the thread's active tape.
inline void backward(const Tensor& loss) {
    Tape* tape = current_tape();
    if (!tape) throw Error("backward() called with no active tape");
    tape->backward(loss);
}

}  // namespace kdkit

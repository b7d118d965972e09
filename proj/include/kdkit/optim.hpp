#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "kdkit/nn.hpp"
#include "kdkit/tensor.hpp"

namespace kdkit {

// One serializable piece of optimizer state. Buffer paths are prefixed so
// they can never collide with model parameter paths in a checkpoint.
struct StateEntry {
    std::string path;
    Shape shape;
    std::vector<double>* values;
};

class Optimizer {
public:
    Optimizer(std::vector<ParamRef> params, double lr) : params_(std::move(params)), lr_(lr) {
        if (!(lr >= 0.0)) throw ConfigError("learning rate must be >= 0");
        step_count_.assign(1, 0.0);
    }
    virtual ~Optimizer() = default;

    double lr() const { return lr_; }
    void set_lr(double lr) {
        if (!(lr >= 0.0)) throw ConfigError("learning rate must be >= 0");
        lr_ = lr;
    }

    const std::vector<ParamRef>& params() const { return params_; }
    std::size_t step_count() const { return static_cast<std::size_t>(step_count_[0]); }

    void zero_grad() {
        for (auto& p : params_) p.tensor->zero_grad();
    }

    // Applies one update from the gradients accumulated on every parameter.
    // A trainable parameter without a gradient means the step was wired up
    // wrong, so that is an error rather than a silent no-op.
    void step() {
        step_count_[0] += 1.0;
        for (std::size_t i = 0; i < params_.size(); ++i) {
            const std::vector<double>* g = params_[i].tensor->grad();
            if (!g) {
                throw TrainError("no gradient for parameter '" + params_[i].path +
                                 "'; run backward() before step()");
            }
            update(i, *params_[i].tensor, *g);
        }
    }

    virtual std::string kind() const = 0;

    // Flat view over everything step() mutates besides the parameters,
    // including the step counter; checkpoints restore state by path.
    std::vector<StateEntry> state_entries() {
        std::vector<StateEntry> out;
        out.push_back({"opt.step", Shape{}, &step_count_});
        for (std::size_t b = 0; b < buffers_.size(); ++b) {
            for (std::size_t i = 0; i < params_.size(); ++i) {
                out.push_back({"opt." + buffer_names_[b] + "." + params_[i].path,
                               params_[i].tensor->shape(), &buffers_[b][i]});
            }
        }
        return out;
    }

protected:
    virtual void update(std::size_t i, Tensor& w, const std::vector<double>& g) = 0;

    void add_buffer(const std::string& name) {
        buffer_names_.push_back(name);
        buffers_.emplace_back();
        auto& bank = buffers_.back();
        bank.reserve(params_.size());
        for (const auto& p : params_) bank.emplace_back(p.tensor->size(), 0.0);
    }

    std::vector<double>& buffer(std::size_t bank, std::size_t i) { return buffers_[bank][i]; }
    double lr_value() const { return lr_; }
    double t() const { return step_count_[0]; }

private:
    std::vector<ParamRef> params_;
    double lr_;
    std::vector<double> step_count_;  // held as a length-1 buffer for serialization
    std::vector<std::string> buffer_names_;
    std::vector<std::vector<std::vector<double>>> buffers_;  // bank -> param -> values
};

class SGD : public Optimizer {
public:
    SGD(std::vector<ParamRef> params, double lr, double momentum = 0.0)
        : Optimizer(std::move(params), lr), momentum_(momentum) {
        if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must be in [0, 1)");
        add_buffer("momentum");
    }

    std::string kind() const override { return "sgd"; }
    double momentum() const { return momentum_; }

protected:
    void update(std::size_t i, Tensor& w, const std::vector<double>& g) override {
        auto& v = buffer(0, i);
        for (std::size_t k = 0; k < v.size(); ++k) {
            v[k] = momentum_ * v[k] + g[k];
            w[k] -= lr_value() * v[k];
        }
    }

private:
    double momentum_;
};

class Adam : public Optimizer {
public:
    Adam(std::vector<ParamRef> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
         double eps = 1e-8)
        : Optimizer(std::move(params), lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
            throw ConfigError("adam betas must be in [0, 1)");
        }
        if (!(eps > 0.0)) throw ConfigError("adam eps must be > 0");
        add_buffer("m");
        add_buffer("v");
    }

    std::string kind() const override { return "adam"; }

protected:
    void update(std::size_t i, Tensor& w, const std::vector<double>& g) override {
        auto& m = buffer(0, i);
        auto& v = buffer(1, i);
        const double bc1 = 1.0 - std::pow(beta1_, t());
        const double bc2 = 1.0 - std::pow(beta2_, t());
        for (std::size_t k = 0; k < m.size(); ++k) {
            m[k] = beta1_ * m[k] + (1.0 - beta1_) * g[k];
            v[k] = beta2_ * v[k] + (1.0 - beta2_) * g[k] * g[k];
            const double mhat = m[k] / bc1;
            const double vhat = v[k] / bc2;
            w[k] -= lr_value() * mhat / (std::sqrt(vhat) + eps_);
        }
    }

private:
    double beta1_, beta2_, eps_;
};

// ---------------------------------------------------------------------------
// Learning-rate schedules (applied per epoch, before its first step)
// ---------------------------------------------------------------------------

class Scheduler {
public:
    virtual ~Scheduler() = default;
    virtual double lr_at(std::size_t epoch) const = 0;
    void apply(Optimizer& opt, std::size_t epoch) const { opt.set_lr(lr_at(epoch)); }
};

class ConstantSchedule : public Scheduler {
public:
    explicit ConstantSchedule(double lr) : lr_(lr) {
        if (!(lr >= 0.0)) throw ConfigError("learning rate must be >= 0");
    }
    double lr_at(std::size_t) const override { return lr_; }

private:
    double lr_;
};

// lr(epoch) = base * gamma^(number of milestones <= epoch); an epoch equal
// to a milestone already uses the decayed rate.
class StepSchedule : public Scheduler {
public:
    StepSchedule(double base_lr, double gamma, std::vector<std::size_t> milestones)
        : base_(base_lr), gamma_(gamma), milestones_(std::move(milestones)) {
        if (!(base_lr >= 0.0)) throw ConfigError("learning rate must be >= 0");
        if (!(gamma > 0.0)) throw ConfigError("step schedule gamma must be > 0");
        for (std::size_t i = 1; i < milestones_.size(); ++i) {
            if (milestones_[i] <= milestones_[i - 1]) {
                throw ConfigError("step schedule milestones must be strictly increasing");
            }
        }
    }

    double lr_at(std::size_t epoch) const override {
        std::size_t hits = 0;
        for (std::size_t m : milestones_) {
            if (m <= epoch) ++hits;
        }
        return base_ * std::pow(gamma_, static_cast<double>(hits));
    }

private:
    double base_;
    double gamma_;
    std::vector<std::size_t> milestones_;
};

}  // namespace kdkit

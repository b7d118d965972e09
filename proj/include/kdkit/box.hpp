#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "kdkit/losses.hpp"
#include "kdkit/nn.hpp"
#include "kdkit/tensor.hpp"

namespace kdkit {

enum class Side { teacher, student };

inline std::string side_name(Side s) { return s == Side::teacher ? "teacher" : "student"; }

// One weighted loss term. Tensor references (student/teacher) name a hook
// slot first and fall back to the model's output bundle field. The mse kind
// compares against either a batch field (target) or the teacher (exactly one).
struct LossTermSpec {
    std::string kind;                // cross_entropy | kd_kl | mse | feature_mse
    std::string name;                // unique within the box; defaults to kind
    double weight = 1.0;
    double tau = 1.0;                // kd_kl only
    std::string student = "logits";  // slot or output field on the student side
    std::string teacher = "logits";  // slot or output field on the teacher side
    std::string labels = "label";    // batch field with integer labels (cross_entropy)
    std::string target;              // batch field with regression targets (mse)
    std::string adapter;             // adapter applied for feature_mse ("" = none)
};

struct StepResult {
    double total = 0.0;
    std::vector<std::pair<std::string, double>> terms;  // unweighted term values
};

// Pairs a frozen teacher with a trainable student, runs both forwards with
// hook capture, and composes the weighted loss terms. Also covers plain
// single-model training as the degenerate box without a teacher.
class DistillationBox {
public:
    explicit DistillationBox(std::shared_ptr<Module> student,
                             std::shared_ptr<Module> teacher = nullptr)
        : student_(std::move(student)), teacher_(std::move(teacher)) {
        if (!student_) throw Error("distillation box needs a student model");
        if (teacher_) teacher_->freeze();
    }

    bool has_teacher() const { return teacher_ != nullptr; }
    Module& student() { return *student_; }
    Module& teacher() {
        if (!teacher_) throw Error("box has no teacher model");
        return *teacher_;
    }

    IOCache& cache(Side side) { return side == Side::teacher ? tcache_ : scache_; }

    std::uint64_t register_hook(Side side, const HookHandle& handle) {
        Module& m = side == Side::teacher ? teacher() : *student_;
        return register_forward_hook(m, handle, cache(side));
    }

    // Attaches a lazily materialized affine adapter reading from source_slot
    // on the given side. Student-side adapters always train; teacher-side
    // ones train only when asked.
    AffineAdapter& attach_adapter(const std::string& name, Side side,
                                  const std::string& source_slot, std::size_t out_dim,
                                  bool trainable = false) {
        for (const auto& a : adapters_) {
            if (a.name == name) throw Error("duplicate adapter name '" + name + "'");
        }
        if (!cache(side).slot_registered(source_slot)) {
            throw Error("adapter '" + name + "' reads unknown " + side_name(side) + " slot '" +
                        source_slot + "'");
        }
        AdapterEntry entry;
        entry.name = name;
        entry.side = side;
        entry.source = source_slot;
        entry.trainable = side == Side::student ? true : trainable;
        entry.adapter = std::make_shared<AffineAdapter>(out_dim);
        adapters_.push_back(std::move(entry));
        return *adapters_.back().adapter;
    }

    void add_term(LossTermSpec term) {
        if (term.kind != "cross_entropy" && term.kind != "kd_kl" && term.kind != "mse" &&
            term.kind != "feature_mse") {
            throw Error("unknown loss term kind '" + term.kind + "'");
        }
        if (!std::isfinite(term.weight)) {
            throw Error("loss term '" + term.kind + "' has non-finite weight");
        }
        if (term.kind == "kd_kl" && !(term.tau > 0.0)) {
            throw Error("kd_kl term needs a positive temperature");
        }
        if (term.name.empty()) term.name = term.kind;
        for (const auto& t : terms_) {
            if (t.name == term.name) {
                throw Error("duplicate loss term name '" + term.name + "'");
            }
        }
        terms_.push_back(std::move(term));
    }

    const std::vector<LossTermSpec>& terms() const { return terms_; }

    // Runs the teacher (gradient-free) and then the student on one batch,
    // repopulating both caches.
    void forward_both(const IOBundle& batch) {
        tcache_.clear();
        scache_.clear();
        if (teacher_) {
            NoGradScope ng;
            teacher_out_ = teacher_->forward_bundle(batch);
        }
        student_out_ = student_->forward_bundle(batch);
    }

    // Shape probe: one gradient-free pass so every adapter learns its input
    // width, then parameter init and freezing. Must run before the optimizer
    // collects parameters. Consumes no randomness beyond the named streams.
    void materialize_adapters(const IOBundle& batch, std::uint64_t seed) {
        if (adapters_.empty()) return;
        {
            NoGradScope ng;
            forward_both(batch);
            for (auto& a : adapters_) {
                const Tensor& src = resolve(a.side, a.source);
                if (src.rank() != 2) {
                    throw ShapeError("adapter '" + a.name + "' needs a rank-2 feature, got " +
                                     shape_str(src.shape()));
                }
                a.adapter->materialize(src.dim(1));
            }
        }
        for (auto& a : adapters_) {
            init_parameters(*a.adapter, seed, "aux." + a.name);
            if (!a.trainable) a.adapter->freeze();
        }
    }

    // Loss over already-run forwards. Term values are reported unweighted;
    // the total applies the weights.
    Tensor compute_loss(const IOBundle& batch, StepResult& result) {
        if (terms_.empty()) throw Error("distillation box has no loss terms");
        Tensor total;
        bool first = true;
        result.terms.clear();
        for (const auto& t : terms_) {
            Tensor value = eval_term(t, batch);
            const double v = value.item();
            if (!std::isfinite(v)) {
                throw TrainError("non-finite value in loss term '" + t.name + "'");
            }
            result.terms.emplace_back(t.name, v);
            Tensor weighted = scale(value, t.weight);
            total = first ? weighted : add(total, weighted);
            first = false;
        }
        result.total = total.item();
        if (!std::isfinite(result.total)) throw TrainError("non-finite total loss");
        return total;
    }

    // One training step: forwards, loss, backward. Gradients land in the
    // student and trainable adapters only; the caller applies the optimizer.
    StepResult distill_step(const IOBundle& batch) {
        TapeScope scope;
        forward_both(batch);
        StepResult result;
        Tensor total = compute_loss(batch, result);
        if (total.node() >= 0) backward(total);
        return result;
    }

    // Parameters the optimizer updates: student (unfrozen) plus trainable
    // adapter parameters, adapter paths prefixed "aux.<name>.".
    std::vector<ParamRef> trainable_parameters() {
        std::vector<ParamRef> out;
        for (auto& p : student_->named_parameters()) {
            if (!p.frozen()) out.push_back(p);
        }
        for (auto& a : adapters_) {
            if (!a.trainable) continue;
            for (auto& p : a.adapter->named_parameters()) {
                out.push_back(ParamRef{"aux." + a.name + "." + p.path, p.tensor});
            }
        }
        return out;
    }

    // Everything that belongs in a resume checkpoint: all student parameters
    // plus all adapter parameters (frozen ones included).
    std::vector<ParamRef> state_parameters() {
        std::vector<ParamRef> out = student_->named_parameters();
        for (auto& a : adapters_) {
            for (auto& p : a.adapter->named_parameters()) {
                out.push_back(ParamRef{"aux." + a.name + "." + p.path, p.tensor});
            }
        }
        return out;
    }

    void zero_grad() {
        for (auto& p : state_parameters()) p.tensor->zero_grad();
    }

    AffineAdapter& adapter(const std::string& name) {
        for (auto& a : adapters_) {
            if (a.name == name) return *a.adapter;
        }
        throw Error("unknown adapter '" + name + "'");
    }

    // Latest captured tensor by slot, falling back to output bundle fields.
    const Tensor& resolve(Side side, const std::string& name) {
        IOCache& c = cache(side);
        if (c.has(name)) return c.get(name);
        const IOBundle& out = side == Side::teacher ? teacher_out_ : student_out_;
        if (side == Side::teacher && !teacher_) {
            throw Error("loss term references the teacher, but the box has none");
        }
        if (out.has(name)) return out.get(name);
        std::string slots;
        for (const auto& kv : out) {
            if (!slots.empty()) slots += ", ";
            slots += kv.first;
        }
        throw Error("'" + name + "' names neither a captured slot nor an output field on the " +
                    side_name(side) + " side; output fields: [" + slots + "]");
    }

private:
    struct AdapterEntry {
        std::string name;
        Side side;
        std::string source;
        bool trainable = false;
        std::shared_ptr<AffineAdapter> adapter;
    };

    Tensor eval_term(const LossTermSpec& t, const IOBundle& batch) {
        if (t.kind == "cross_entropy") {
            return cross_entropy_mean(resolve(Side::student, t.student), batch.get(t.labels));
        }
        if (t.kind == "kd_kl") {
            Tensor kl = kl_softened_mean(resolve(Side::teacher, t.teacher),
                                         resolve(Side::student, t.student), t.tau);
            return scale(kl, t.tau * t.tau);
        }
        if (t.kind == "mse") {
            const Tensor& a = resolve(Side::student, t.student);
            const Tensor& b =
                t.target.empty() ? resolve(Side::teacher, t.teacher) : batch.get(t.target);
            return mse_mean(a, b.detach());
        }
        // feature_mse
        const Tensor& s = resolve(Side::student, t.student);
        const Tensor& f = resolve(Side::teacher, t.teacher);
        if (t.adapter.empty()) return feature_mse_loss(s, f);
        for (auto& a : adapters_) {
            if (a.name != t.adapter) continue;
            if (a.side == Side::student) return feature_mse_loss(s, f, a.adapter.get());
            // teacher-side adapter projects the teacher feature instead
            return feature_mse_loss(s, (*a.adapter)(f));
        }
        throw Error("loss term '" + t.name + "' references unknown adapter '" + t.adapter + "'");
    }

    std::shared_ptr<Module> student_;
    std::shared_ptr<Module> teacher_;
    IOCache tcache_;
    IOCache scache_;
    IOBundle teacher_out_;
    IOBundle student_out_;
    std::vector<AdapterEntry> adapters_;
    std::vector<LossTermSpec> terms_;
};

}  // namespace kdkit

#pragma once

#include <cmath>
#include <string>

#include "kdkit/nn.hpp"
#include "kdkit/ops.hpp"
#include "kdkit/tensor.hpp"

namespace kdkit {

struct SoftenedDistribution {
    Tensor probs;
    double temperature;
};

// Rowwise softmax of logits / tau.
inline SoftenedDistribution softened_softmax(const Tensor& logits, double tau) {
    if (logits.rank() != 2 || logits.dim(1) < 2) {
        throw ShapeError("softened_softmax: expected [batch x classes] with >= 2 classes, got " +
                         shape_str(logits.shape()));
    }
    if (!(tau > 0.0)) throw Error("softened_softmax: temperature must be positive");
    return SoftenedDistribution{softmax_rows(logits, tau), tau};
}

// L = alpha * CE(student, labels) + (1 - alpha) * tau^2 * KL(p || q), where
// p softens the teacher logits (the target distribution) and q the student's.
// The CE term uses the plain tau = 1 softmax against hard integer labels.
inline Tensor kd_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                      const Tensor& labels, double alpha, double tau) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) {
        throw Error("kd_loss: balancing factor must lie in [0, 1], got " + std::to_string(alpha));
    }
    if (!(tau > 0.0)) throw Error("kd_loss: temperature must be positive");
    if (student_logits.shape() != teacher_logits.shape()) {
        throw ShapeError("kd_loss: student and teacher logit shapes differ, " +
                         shape_str(student_logits.shape()) + " vs " +
                         shape_str(teacher_logits.shape()));
    }
    Tensor ce = cross_entropy_mean(student_logits, labels);
    Tensor kl = kl_softened_mean(teacher_logits, student_logits, tau);
    return add(scale(ce, alpha), scale(kl, (1.0 - alpha) * tau * tau));
}

// mse(student, targets) + mse(student, teacher), both batch-mean, unit weights.
inline Tensor regression_kd_loss(const Tensor& student_pred, const Tensor& teacher_pred,
                                 const Tensor& targets) {
    if (student_pred.rank() != 2 || teacher_pred.rank() != 2 || targets.rank() != 2 ||
        student_pred.shape() != teacher_pred.shape() || student_pred.shape() != targets.shape()) {
        throw ShapeError("regression_kd_loss: expected three rank-2 tensors of one shape, got " +
                         shape_str(student_pred.shape()) + ", " + shape_str(teacher_pred.shape()) +
                         ", " + shape_str(targets.shape()));
    }
    return add(mse_mean(student_pred, targets), mse_mean(student_pred, teacher_pred.detach()));
}

// Mean squared error between a (possibly adapted) student feature and a
// teacher feature. The adapter, when given, projects the student feature to
// the teacher's width. Teacher features are captured without gradient
// tracking, so gradient reaches the student and the adapter only; a
// teacher-side adapter handed in as teacher_feat keeps its own gradients.
inline Tensor feature_mse_loss(const Tensor& student_feat, const Tensor& teacher_feat,
                               AffineAdapter* adapter = nullptr) {
    Tensor s = student_feat;
    if (adapter) s = (*adapter)(student_feat);
    if (s.shape() != teacher_feat.shape()) {
        throw ShapeError("feature_mse_loss: shapes differ after adaptation, " +
                         shape_str(s.shape()) + " vs " + shape_str(teacher_feat.shape()));
    }
    return mse_mean(s, teacher_feat);
}

}  // namespace kdkit

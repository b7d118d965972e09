#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "kdkit/ops.hpp"
#include "kdkit/rng.hpp"
#include "kdkit/tensor.hpp"
#include "support/fd.hpp"

using kdkit::NoGradScope;
using kdkit::RngStream;
using kdkit::Shape;
using kdkit::Tape;
using kdkit::TapeScope;
using kdkit::Tensor;

namespace {

Tensor rand_tensor(Shape shape, RngStream& s, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = s.uniform(lo, hi);
    return t;
}

// Random fill that stays away from zero, for ops with a kink there.
Tensor rand_tensor_off_zero(Shape shape, RngStream& s, double margin = 0.05) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) {
        double v;
        do {
            v = s.uniform(-1.0, 1.0);
        } while (std::abs(v) < margin);
        t[i] = v;
    }
    return t;
}

template <class MakeLoss>
void require_fd(MakeLoss&& make_loss, std::vector<Tensor> inputs, double tol = 1e-6) {
    auto report = kdtest::fd_compare(make_loss, inputs);
    REQUIRE(report.checked > 0);
    REQUIRE(report.max_rel_err < tol);
}

}  // namespace

// ---------------------------------------------------------------------------
// tape mechanics
// ---------------------------------------------------------------------------

TEST_CASE("leaf gradients accumulate across steps until cleared") {
    Tensor w = Tensor::from_data({2}, {1.5, -0.5});
    w.enable_grad();
    for (int step = 0; step < 2; ++step) {
        TapeScope scope;
        Tensor loss = kdkit::reduce_sum(kdkit::mul(w, w));
        kdkit::backward(loss);
    }
    const auto* g = w.grad();
    REQUIRE(g);
    REQUIRE((*g)[0] == Catch::Approx(4.0 * 1.5).epsilon(1e-12));
    REQUIRE((*g)[1] == Catch::Approx(4.0 * -0.5).epsilon(1e-12));
    w.zero_grad();
    REQUIRE(w.grad() == nullptr);
}

TEST_CASE("constants and frozen tensors collect no gradient") {
    Tensor x = Tensor::from_data({2}, {2.0, 3.0});
    Tensor w = Tensor::from_data({2}, {1.0, 1.0});
    Tensor frozen = Tensor::from_data({2}, {5.0, 5.0});
    w.enable_grad();
    frozen.enable_grad();
    frozen.set_requires_grad(false);
    {
        TapeScope scope;
        Tensor loss = kdkit::reduce_sum(kdkit::mul(kdkit::mul(x, w), frozen));
        kdkit::backward(loss);
    }
    REQUIRE(x.grad() == nullptr);
    REQUIRE(frozen.grad() == nullptr);
    const auto* g = w.grad();
    REQUIRE(g);
    REQUIRE((*g)[0] == Catch::Approx(10.0));
    REQUIRE((*g)[1] == Catch::Approx(15.0));
}

TEST_CASE("backward rejects a non-scalar loss") {
    Tensor w = Tensor::from_data({2}, {1.0, 2.0});
    w.enable_grad();
    TapeScope scope;
    Tensor y = kdkit::scale(w, 2.0);
    REQUIRE_THROWS_AS(kdkit::backward(y), kdkit::ShapeError);
}

TEST_CASE("backward without an active tape is an error") {
    Tensor loss = Tensor::scalar(1.0);
    REQUIRE_THROWS_AS(kdkit::backward(loss), kdkit::Error);
}

TEST_CASE("a loss from a previous tape is rejected") {
    Tensor w = Tensor::from_data({2}, {1.0, 2.0});
    w.enable_grad();
    Tensor stale;
    {
        TapeScope scope;
        stale = kdkit::reduce_sum(kdkit::mul(w, w));
    }
    TapeScope scope;
    REQUIRE_THROWS_AS(kdkit::backward(stale), kdkit::Error);
}

TEST_CASE("item requires a scalar") {
    Tensor t(Shape{2, 2});
    REQUIRE_THROWS_AS(t.item(), kdkit::ShapeError);
    REQUIRE(Tensor::scalar(3.5).item() == 3.5);
}

TEST_CASE("detach shares storage but drops tracking") {
    Tensor w = Tensor::from_data({2}, {1.0, 2.0});
    w.enable_grad();
    Tensor d = w.detach();
    REQUIRE_FALSE(d.requires_grad());
    d[0] = 9.0;
    REQUIRE(w[0] == 9.0);
    Tensor c = w.clone();
    c[1] = -1.0;
    REQUIRE(w[1] == 2.0);
}

TEST_CASE("no-grad scope suspends recording") {
    Tensor w = Tensor::from_data({2}, {1.0, 2.0});
    w.enable_grad();
    TapeScope scope;
    {
        NoGradScope ng;
        Tensor y = kdkit::mul(w, w);
        REQUIRE(y.node() == -1);
    }
    Tensor loss = kdkit::reduce_sum(kdkit::mul(w, w));
    kdkit::backward(loss);
    REQUIRE(w.grad() != nullptr);
}

TEST_CASE("an intermediate from an earlier tape is treated as a constant") {
    Tensor w = Tensor::from_data({2}, {1.0, 2.0});
    w.enable_grad();
    Tensor h;
    {
        TapeScope scope;
        h = kdkit::scale(w, 3.0);
    }
    {
        TapeScope scope;
        Tensor loss = kdkit::reduce_sum(kdkit::add(kdkit::mul(h, h), kdkit::mul(w, w)));
        kdkit::backward(loss);
    }
    const auto* g = w.grad();
    REQUIRE(g);
    REQUIRE((*g)[0] == Catch::Approx(2.0));
    REQUIRE((*g)[1] == Catch::Approx(4.0));
}

// ---------------------------------------------------------------------------
// exact forward values
// ---------------------------------------------------------------------------

TEST_CASE("matmul matches a hand computation") {
    Tensor a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor b = Tensor::from_data({3, 2}, {7, 8, 9, 10, 11, 12});
    Tensor c = kdkit::matmul(a, b);
    REQUIRE(c.shape() == Shape{2, 2});
    REQUIRE(c[0] == 58.0);
    REQUIRE(c[1] == 64.0);
    REQUIRE(c[2] == 139.0);
    REQUIRE(c[3] == 154.0);
}

TEST_CASE("matmul by the identity returns the input") {
    Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor x = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor y = kdkit::matmul(eye, x);
    for (std::size_t i = 0; i < x.size(); ++i) REQUIRE(y[i] == x[i]);
    Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    Tensor col = Tensor::from_data({2, 1}, {1, 1});
    Tensor r = kdkit::matmul(a, col);
    REQUIRE(r[0] == 3.0);
    REQUIRE(r[1] == 7.0);
}

TEST_CASE("unit 1x1 kernel is the identity convolution") {
    Tensor x = Tensor::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor k = Tensor::from_data({1, 1, 1, 1}, {1});
    Tensor y = kdkit::conv2d(x, k);
    REQUIRE(y.shape() == x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) REQUIRE(y[i] == x[i]);
    Tensor ones(Shape{1, 1, 3, 3}, 1.0);
    Tensor k3(Shape{1, 1, 3, 3}, 1.0);
    Tensor s = kdkit::conv2d(ones, k3);
    REQUIRE(s.shape() == Shape{1, 1, 1, 1});
    REQUIRE(s[0] == 9.0);
}

TEST_CASE("relu and reduce_mean basics") {
    Tensor x = Tensor::from_data({3}, {-1, 0, 2});
    Tensor y = kdkit::relu(x);
    REQUIRE(y[0] == 0.0);
    REQUIRE(y[1] == 0.0);
    REQUIRE(y[2] == 2.0);
    REQUIRE(kdkit::reduce_mean(Tensor(Shape{4}, 1.0)).item() == 1.0);
}

TEST_CASE("gradient of a bare leaf loss is one") {
    Tensor x = Tensor::scalar(5.0);
    x.enable_grad();
    {
        TapeScope scope;
        Tensor loss = kdkit::scale(x, 1.0);
        kdkit::backward(loss);
    }
    REQUIRE((*x.grad())[0] == 1.0);
}

TEST_CASE("gradient of mean of squares is x over half the count") {
    Tensor x = Tensor::from_data({2}, {1.0, 2.0});
    x.enable_grad();
    {
        TapeScope scope;
        kdkit::backward(kdkit::reduce_mean(kdkit::mul(x, x)));
    }
    REQUIRE((*x.grad())[0] == Catch::Approx(1.0));
    REQUIRE((*x.grad())[1] == Catch::Approx(2.0));
}

TEST_CASE("conv2d matches a hand computation") {
    Tensor x = Tensor::from_data({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    Tensor k = Tensor::from_data({1, 1, 2, 2}, {1, 0, 0, 1});
    Tensor y = kdkit::conv2d(x, k);
    REQUIRE(y.shape() == Shape{1, 1, 2, 2});
    REQUIRE(y[0] == 6.0);
    REQUIRE(y[1] == 8.0);
    REQUIRE(y[2] == 12.0);
    REQUIRE(y[3] == 14.0);
}

TEST_CASE("conv2d output size honours stride and padding") {
    Tensor x(Shape{1, 2, 5, 5}, 1.0);
    Tensor k(Shape{3, 2, 3, 3}, 0.5);
    REQUIRE(kdkit::conv2d(x, k, 1, 0).shape() == Shape{1, 3, 3, 3});
    REQUIRE(kdkit::conv2d(x, k, 2, 1).shape() == Shape{1, 3, 3, 3});
    REQUIRE(kdkit::conv2d(x, k, 1, 1).shape() == Shape{1, 3, 5, 5});
}

TEST_CASE("global_avg_pool averages the spatial grid") {
    Tensor x = Tensor::from_data({1, 2, 2, 2}, {1, 2, 3, 4, 10, 20, 30, 40});
    Tensor y = kdkit::global_avg_pool(x);
    REQUIRE(y.shape() == Shape{1, 2});
    REQUIRE(y[0] == Catch::Approx(2.5));
    REQUIRE(y[1] == Catch::Approx(25.0));
}

TEST_CASE("softened softmax of a two-logit row") {
    Tensor z = Tensor::from_data({1, 2}, {2.0, 0.0});
    Tensor p = kdkit::softmax_rows(z, 2.0);
    REQUIRE(p[0] == Catch::Approx(0.7310585786300049).epsilon(1e-12));
    REQUIRE(p[1] == Catch::Approx(0.2689414213699951).epsilon(1e-12));
    Tensor q = kdkit::softmax_rows(z, 1.0);
    const double e2 = std::exp(2.0);
    REQUIRE(q[0] == Catch::Approx(e2 / (e2 + 1.0)).epsilon(1e-12));
}

TEST_CASE("softmax is shift invariant and stable for huge logits") {
    Tensor z = Tensor::from_data({1, 3}, {1000.0, 1001.0, 999.0});
    Tensor p = kdkit::softmax_rows(z, 1.0);
    double sum = 0.0;
    for (std::size_t i = 0; i < 3; ++i) {
        REQUIRE(std::isfinite(p[i]));
        sum += p[i];
    }
    REQUIRE(sum == Catch::Approx(1.0).epsilon(1e-12));
    Tensor z0 = Tensor::from_data({1, 3}, {0.0, 1.0, -1.0});
    Tensor p0 = kdkit::softmax_rows(z0, 1.0);
    for (std::size_t i = 0; i < 3; ++i) REQUIRE(p[i] == Catch::Approx(p0[i]).epsilon(1e-12));
}

TEST_CASE("cross entropy of uniform logits is log C") {
    Tensor z(Shape{4, 5}, 0.0);
    Tensor labels = Tensor::from_data({4}, {0, 1, 2, 3});
    REQUIRE(kdkit::cross_entropy_mean(z, labels).item() ==
            Catch::Approx(std::log(5.0)).epsilon(1e-12));
}

TEST_CASE("kl of identical logits is zero") {
    RngStream s(1, "kl");
    Tensor z = rand_tensor({3, 4}, s, -2.0, 2.0);
    REQUIRE(kdkit::kl_softened_mean(z, z, 3.0).item() == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("kl gradient is the softened probability gap over tau") {
    RngStream s(2, "kl");
    Tensor t = rand_tensor({4, 6}, s, -2.0, 2.0);
    Tensor v = rand_tensor({4, 6}, s, -2.0, 2.0);
    v.enable_grad();
    const double tau = 3.0;
    {
        TapeScope scope;
        kdkit::backward(kdkit::kl_softened_mean(t, v, tau));
    }
    Tensor p, q;
    {
        NoGradScope ng;
        p = kdkit::softmax_rows(t, tau);
        q = kdkit::softmax_rows(v, tau);
    }
    const auto* g = v.grad();
    REQUIRE(g);
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double expected = (q[i] - p[i]) / (tau * 4.0);
        REQUIRE((*g)[i] == Catch::Approx(expected).margin(1e-12));
    }
}

TEST_CASE("mse of a small pair") {
    Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from_data({2, 2}, {1, 0, 3, 8});
    REQUIRE(kdkit::mse_mean(a, b).item() == Catch::Approx((4.0 + 16.0) / 4.0).epsilon(1e-12));
}

// ---------------------------------------------------------------------------
// shape and domain errors
// ---------------------------------------------------------------------------

TEST_CASE("shape mismatches are rejected") {
    Tensor a(Shape{2, 3});
    Tensor b(Shape{3, 2});
    REQUIRE_THROWS_AS(kdkit::add(a, b), kdkit::ShapeError);
    REQUIRE_THROWS_AS(kdkit::matmul(a, a), kdkit::ShapeError);
    REQUIRE_THROWS_AS(kdkit::matmul(Tensor(Shape{2}), a), kdkit::ShapeError);
    REQUIRE_THROWS_AS(kdkit::add_row_bias(a, Tensor(Shape{2})), kdkit::ShapeError);
    REQUIRE_THROWS_AS(kdkit::conv2d(Tensor(Shape{1, 2, 4, 4}), Tensor(Shape{1, 3, 2, 2})),
                      kdkit::ShapeError);
    REQUIRE_THROWS_AS(kdkit::global_avg_pool(a), kdkit::ShapeError);
}

TEST_CASE("labels outside the class range are rejected") {
    Tensor z(Shape{2, 3}, 0.0);
    REQUIRE_THROWS_AS(kdkit::cross_entropy_mean(z, Tensor::from_data({2}, {0, 3})), kdkit::Error);
    REQUIRE_THROWS_AS(kdkit::cross_entropy_mean(z, Tensor::from_data({2}, {0, 1.5})),
                      kdkit::Error);
    REQUIRE_THROWS_AS(kdkit::cross_entropy_mean(z, Tensor::from_data({3}, {0, 1, 1})),
                      kdkit::ShapeError);
}

TEST_CASE("non-positive temperatures are rejected") {
    Tensor z(Shape{2, 3}, 0.0);
    REQUIRE_THROWS_AS(kdkit::softmax_rows(z, 0.0), kdkit::Error);
    REQUIRE_THROWS_AS(kdkit::kl_softened_mean(z, z, -1.0), kdkit::Error);
}

// ---------------------------------------------------------------------------
// finite-difference checks, several seeds per op
// ---------------------------------------------------------------------------

TEST_CASE("elementwise ops match finite differences") {
    for (std::uint64_t seed : {1, 2, 3}) {
        RngStream s(seed, "fd.elementwise");
        Tensor a = rand_tensor({3, 4}, s);
        Tensor b = rand_tensor({3, 4}, s);
        Tensor w = rand_tensor({3, 4}, s);
        require_fd([&](std::vector<Tensor>& in) {
            return kdkit::reduce_sum(kdkit::mul(kdkit::add(in[0], in[1]), w));
        }, {a, b});
        require_fd([&](std::vector<Tensor>& in) {
            return kdkit::reduce_sum(kdkit::mul(kdkit::sub(in[0], in[1]), w));
        }, {a, b});
        require_fd([&](std::vector<Tensor>& in) {
            return kdkit::reduce_sum(kdkit::mul(kdkit::mul(in[0], in[1]), w));
        }, {a, b});
        require_fd([&](std::vector<Tensor>& in) {
            return kdkit::reduce_sum(kdkit::mul(kdkit::scale(in[0], 1.7), w));
        }, {a});
        require_fd([&](std::vector<Tensor>& in) {
            return kdkit::reduce_sum(kdkit::mul(kdkit::add_scalar(in[0], -0.3), w));
        }, {a});
    }
}

TEST_CASE("nonlinearities match finite differences") {
    for (std::uint64_t seed : {1, 2, 3}) {
        RngStream s(seed, "fd.nonlin");
        Tensor x = rand_tensor_off_zero({4, 5}, s);
        Tensor pos = rand_tensor({4, 5}, s, 0.5, 2.0);
        Tensor w = rand_tensor({4, 5}, s);
        require_fd([&](std::vector<Tensor>& in) {
            return kdkit::reduce_sum(kdkit::mul(kdkit::relu(in[0]), w));
        }, {x});
        require_fd([&](std::vector<Tensor>& in) {
            return kdkit::reduce_sum(kdkit::mul(kdkit::exp(in[0]), w));
        }, {x});
        require_fd([&](std::vector<Tensor>& in) {
            return kdkit::reduce_sum(kdkit::mul(kdkit::log(in[0]), w));
        }, {pos});
    }
}

TEST_CASE("reductions match finite differences") {
    for (std::uint64_t seed : {1, 2}) {
        RngStream s(seed, "fd.reduce");
        Tensor x = rand_tensor({3, 4}, s);
        require_fd([&](std::vector<Tensor>& in) {
            return kdkit::scale(kdkit::reduce_sum(in[0]), 0.7);
        }, {x});
        require_fd([&](std::vector<Tensor>& in) {
            return kdkit::scale(kdkit::reduce_mean(in[0]), 1.3);
        }, {x});
    }
}

TEST_CASE("transpose matches finite differences") {
    for (std::uint64_t seed : {1, 2}) {
        RngStream s(seed, "fd.transpose");
        Tensor x = rand_tensor({3, 5}, s);
        Tensor w = rand_tensor({5, 3}, s);
        require_fd([&](std::vector<Tensor>& in) {
            return kdkit::reduce_sum(kdkit::mul(kdkit::transpose2d(in[0]), w));
        }, {x});
    }
    Tensor a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor t = kdkit::transpose2d(a);
    REQUIRE(t.shape() == Shape{3, 2});
    REQUIRE(t[0] == 1.0);
    REQUIRE(t[1] == 4.0);
    REQUIRE(t[5] == 6.0);
}

TEST_CASE("matmul and bias match finite differences") {
    for (std::uint64_t seed : {1, 2, 3}) {
        RngStream s(seed, "fd.matmul");
        Tensor a = rand_tensor({3, 4}, s);
        Tensor b = rand_tensor({4, 2}, s);
        Tensor bias = rand_tensor({2}, s);
        Tensor w = rand_tensor({3, 2}, s);
        require_fd([&](std::vector<Tensor>& in) {
            return kdkit::reduce_sum(
                kdkit::mul(kdkit::add_row_bias(kdkit::matmul(in[0], in[1]), in[2]), w));
        }, {a, b, bias});
    }
}

TEST_CASE("conv2d matches finite differences") {
    for (std::uint64_t seed : {1, 2}) {
        RngStream s(seed, "fd.conv");
        Tensor x = rand_tensor({2, 3, 5, 5}, s);
        Tensor k = rand_tensor({4, 3, 3, 3}, s);
        Tensor bias = rand_tensor({4}, s);
        Tensor w1 = rand_tensor({2, 4, 3, 3}, s);
        require_fd([&](std::vector<Tensor>& in) {
            return kdkit::reduce_sum(kdkit::mul(
                kdkit::add_channel_bias(kdkit::conv2d(in[0], in[1], 1, 0), in[2]), w1));
        }, {x, k, bias});
        Tensor w2 = rand_tensor({2, 4, 3, 3}, s);
        require_fd([&](std::vector<Tensor>& in) {
            return kdkit::reduce_sum(kdkit::mul(kdkit::conv2d(in[0], in[1], 2, 1), w2));
        }, {x, k});
    }
}

TEST_CASE("pooling and flatten match finite differences") {
    for (std::uint64_t seed : {1, 2}) {
        RngStream s(seed, "fd.pool");
        Tensor x = rand_tensor({2, 3, 4, 4}, s);
        Tensor w = rand_tensor({2, 3}, s);
        require_fd([&](std::vector<Tensor>& in) {
            return kdkit::reduce_sum(kdkit::mul(kdkit::global_avg_pool(in[0]), w));
        }, {x});
        Tensor wf = rand_tensor({2, 48}, s);
        require_fd([&](std::vector<Tensor>& in) {
            return kdkit::reduce_sum(kdkit::mul(kdkit::flatten2d(in[0]), wf));
        }, {x});
    }
}

TEST_CASE("softmax family matches finite differences") {
    for (std::uint64_t seed : {1, 2, 3}) {
        RngStream s(seed, "fd.softmax");
        Tensor z = rand_tensor({4, 5}, s, -2.0, 2.0);
        Tensor w = rand_tensor({4, 5}, s);
        for (double tau : {1.0, 3.0}) {
            require_fd([&, tau](std::vector<Tensor>& in) {
                return kdkit::reduce_sum(kdkit::mul(kdkit::softmax_rows(in[0], tau), w));
            }, {z});
        }
        Tensor labels = Tensor::from_data({4}, {0, 2, 4, 1});
        require_fd([&](std::vector<Tensor>& in) {
            return kdkit::cross_entropy_mean(in[0], labels);
        }, {z});
        Tensor teacher = rand_tensor({4, 5}, s, -2.0, 2.0);
        require_fd([&](std::vector<Tensor>& in) {
            return kdkit::kl_softened_mean(teacher, in[0], 3.0);
        }, {z});
    }
}

TEST_CASE("mse matches finite differences") {
    for (std::uint64_t seed : {1, 2}) {
        RngStream s(seed, "fd.mse");
        Tensor a = rand_tensor({3, 4}, s);
        Tensor b = rand_tensor({3, 4}, s);
        require_fd([&](std::vector<Tensor>& in) {
            return kdkit::mse_mean(in[0], in[1]);
        }, {a, b});
    }
}

TEST_CASE("a two-layer network matches finite differences end to end") {
    for (std::uint64_t seed : {1, 2}) {
        RngStream s(seed, "fd.mlp");
        Tensor x = rand_tensor({8, 3}, s);
        Tensor w1 = rand_tensor({3, 16}, s, -0.5, 0.5);
        Tensor b1 = rand_tensor({16}, s, -0.1, 0.1);
        Tensor w2 = rand_tensor({16, 4}, s, -0.5, 0.5);
        Tensor b2 = rand_tensor({4}, s, -0.1, 0.1);
        Tensor labels = Tensor::from_data({8}, {0, 1, 2, 3, 0, 1, 2, 3});
        require_fd([&](std::vector<Tensor>& in) {
            Tensor h = kdkit::relu(kdkit::add_row_bias(kdkit::matmul(x, in[0]), in[1]));
            Tensor logits = kdkit::add_row_bias(kdkit::matmul(h, in[2]), in[3]);
            return kdkit::cross_entropy_mean(logits, labels);
        }, {w1, b1, w2, b2}, 2e-6);
    }
}

#include <cmath>
#include <functional>
#include <tuple>

#include <catch2/catch_amalgamated.hpp>

#include "kdkit/ops.hpp"
#include "kdkit/optim.hpp"

using namespace kdkit;

namespace {

ParamRef ref(const std::string& path, Tensor& t) {
    t.enable_grad();
    return ParamRef{path, &t};
}

// one gradient-descent step on a closed-form loss
void step_on(Optimizer& opt, const std::function<Tensor()>& loss_fn) {
    TapeScope scope;
    opt.zero_grad();
    Tensor loss = loss_fn();
    backward(loss);
    opt.step();
}

}  // namespace

TEST_CASE("plain sgd takes lr-scaled gradient steps") {
    Tensor w = Tensor::from_data({1}, {1.0});
    SGD opt({ref("w", w)}, 0.1, 0.0);

    step_on(opt, [&] { return scale(reduce_sum(w), 0.5); });  // gradient 0.5
    CHECK(w[0] == Catch::Approx(0.95).margin(1e-15));
    CHECK(opt.step_count() == 1);
}

TEST_CASE("sgd on a quadratic bowl contracts geometrically") {
    Tensor w = Tensor::from_data({1}, {1.0});
    SGD opt({ref("w", w)}, 0.05, 0.0);
    for (int i = 0; i < 100; ++i) {
        step_on(opt, [&] { return reduce_sum(mul(w, w)); });  // w^2, gradient 2w
    }
    // each step multiplies w by (1 - 2 * 0.05) = 0.9
    CHECK(w[0] == Catch::Approx(2.6561398887587544e-05).epsilon(1e-12));
}

TEST_CASE("sgd momentum accumulates velocity") {
    Tensor w = Tensor::from_data({1}, {0.0});
    SGD opt({ref("w", w)}, 1.0, 0.5);
    // constant gradient 1: v_1 = 1, v_2 = 1.5, v_3 = 1.75
    for (int i = 0; i < 3; ++i) {
        step_on(opt, [&] { return reduce_sum(w); });
    }
    CHECK(w[0] == Catch::Approx(-(1.0 + 1.5 + 1.75)).margin(1e-15));
}

TEST_CASE("zero gradient leaves parameters unchanged") {
    Tensor w = Tensor::from_data({2}, {3.0, -2.0});
    SGD sgd({ref("w", w)}, 0.1, 0.9);
    step_on(sgd, [&] { return reduce_sum(mul(w, Tensor::from_data({2}, {0.0, 0.0}))); });
    CHECK(w[0] == 3.0);
    CHECK(w[1] == -2.0);

    // adam too: m and v stay zero, update is 0/(0 + eps)
    Tensor w2 = Tensor::from_data({2}, {3.0, -2.0});
    Adam adam({ref("w", w2)}, 0.1);
    step_on(adam, [&] { return reduce_sum(mul(w2, Tensor::from_data({2}, {0.0, 0.0}))); });
    CHECK(w2[0] == 3.0);
    CHECK(w2[1] == -2.0);
}

TEST_CASE("step without gradients names the parameter") {
    Tensor w = Tensor::from_data({1}, {1.0});
    SGD opt({ref("model.fc1.weight", w)}, 0.1);
    try {
        opt.step();
        FAIL("expected TrainError");
    } catch (const TrainError& e) {
        CHECK(std::string(e.what()).find("model.fc1.weight") != std::string::npos);
    }
}

TEST_CASE("adam first step moves by almost exactly lr") {
    Tensor w = Tensor::from_data({1}, {0.0});
    Adam opt({ref("w", w)}, 1e-3);
    step_on(opt, [&] { return reduce_sum(w); });  // gradient 1
    // mhat = g, vhat = g^2, update = lr * g / (|g| + eps)
    CHECK(w[0] == Catch::Approx(-9.99999990e-4).epsilon(1e-9));
}

TEST_CASE("adam first step direction is -sign(g) regardless of scale") {
    for (double g : {1e-8, 1e-3, 1.0, 1e4}) {
        for (double sign : {1.0, -1.0}) {
            Tensor w = Tensor::from_data({1}, {0.0});
            Adam opt({ref("w", w)}, 1e-3);
            step_on(opt, [&] { return scale(reduce_sum(w), sign * g); });
            CHECK(w[0] * sign < 0.0);
            // magnitude never exceeds lr
            CHECK(std::abs(w[0]) <= 1e-3 * (1.0 + 1e-12));
        }
    }
}

TEST_CASE("adam converges on a shifted quadratic") {
    Tensor w = Tensor::from_data({1}, {0.0});
    Adam opt({ref("w", w)}, 0.05);
    for (int i = 0; i < 200; ++i) {
        step_on(opt, [&] {
            Tensor diff = add_scalar(w, -3.0);
            return reduce_sum(mul(diff, diff));
        });
    }
    CHECK(std::abs(w[0] - 3.0) < 0.05);
}

TEST_CASE("adam second step matches the closed form") {
    const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    Tensor w = Tensor::from_data({1}, {0.0});
    Adam opt({ref("w", w)}, lr);

    // constant gradient g = 2
    const double g = 2.0;
    double m = 0.0, v = 0.0, expected = 0.0;
    for (int t = 1; t <= 2; ++t) {
        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g * g;
        const double mhat = m / (1 - std::pow(b1, t));
        const double vhat = v / (1 - std::pow(b2, t));
        expected -= lr * mhat / (std::sqrt(vhat) + eps);
        step_on(opt, [&] { return scale(reduce_sum(w), g); });
    }
    CHECK(w[0] == Catch::Approx(expected).epsilon(1e-14));
}

TEST_CASE("optimizers update several parameters independently") {
    Tensor a = Tensor::from_data({2}, {1.0, 2.0});
    Tensor b = Tensor::from_data({1}, {5.0});
    SGD opt({ref("a", a), ref("b", b)}, 0.5);
    // loss = sum(a) + 3*b: grad a = [1,1], grad b = 3
    step_on(opt, [&] { return add(reduce_sum(a), scale(reduce_sum(b), 3.0)); });
    CHECK(a[0] == 0.5);
    CHECK(a[1] == 1.5);
    CHECK(b[0] == 3.5);
}

TEST_CASE("invalid optimizer settings are rejected") {
    Tensor w = Tensor::from_data({1}, {0.0});
    CHECK_THROWS_AS(SGD({ref("w", w)}, -1.0), ConfigError);
    CHECK_THROWS_AS(SGD({ref("w", w)}, 0.1, 1.0), ConfigError);
    CHECK_THROWS_AS(SGD({ref("w", w)}, 0.1, -0.1), ConfigError);
    CHECK_THROWS_AS(Adam({ref("w", w)}, 0.1, 1.0), ConfigError);
    CHECK_THROWS_AS(Adam({ref("w", w)}, 0.1, 0.9, 1.0), ConfigError);
    CHECK_THROWS_AS(Adam({ref("w", w)}, 0.1, 0.9, 0.999, 0.0), ConfigError);
}

TEST_CASE("zero learning rate leaves parameters bit-identical") {
    Tensor w = Tensor::from_data({3}, {0.25, -1.5, 4.0});
    const std::vector<double> before = w.values();
    SGD opt({ref("w", w)}, 0.0, 0.9);
    for (int i = 0; i < 5; ++i) {
        step_on(opt, [&] { return reduce_sum(mul(w, w)); });
    }
    CHECK(w.values() == before);
}

TEST_CASE("optimizer state entries expose every buffer by path") {
    Tensor w = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor b = Tensor::from_data({3}, {0, 0, 0});
    Adam opt({ref("fc.weight", w), ref("fc.bias", b)}, 0.1);
    auto entries = opt.state_entries();
    REQUIRE(entries.size() == 5);  // step + (m, v) x 2 params
    CHECK(entries[0].path == "opt.step");
    CHECK(entries[0].shape.empty());
    CHECK(entries[1].path == "opt.m.fc.weight");
    CHECK((entries[1].shape == Shape{2, 3}));
    CHECK(entries[1].values->size() == 6);
    CHECK(entries[2].path == "opt.m.fc.bias");
    CHECK(entries[3].path == "opt.v.fc.weight");
    CHECK(entries[4].path == "opt.v.fc.bias");

    step_on(opt, [&] { return add(reduce_sum(w), reduce_sum(b)); });
    CHECK((*entries[0].values)[0] == 1.0);
    CHECK((*entries[1].values)[0] == Catch::Approx(0.1).margin(1e-15));  // (1-b1)*g
}

TEST_CASE("restoring optimizer state resumes the exact trajectory") {
    auto run = [](int total_steps, int restore_at) {
        Tensor w = Tensor::from_data({1}, {0.0});
        Adam opt({ref("w", w)}, 0.05);
        std::vector<std::vector<double>> snapshot;
        double w_snapshot = 0.0;
        for (int i = 0; i < total_steps; ++i) {
            if (i == restore_at && restore_at >= 0) {
                // capture state mid-run
                for (auto& e : opt.state_entries()) snapshot.push_back(*e.values);
                w_snapshot = w[0];
            }
            step_on(opt, [&] {
                Tensor diff = add_scalar(w, -3.0);
                return reduce_sum(mul(diff, diff));
            });
        }
        return std::tuple{w[0], snapshot, w_snapshot};
    };

    auto [w_full, snapshot, w_mid] = run(20, 10);

    // rebuild a fresh optimizer, restore the snapshot, run the tail
    Tensor w = Tensor::from_data({1}, {w_mid});
    Adam opt({ref("w", w)}, 0.05);
    auto entries = opt.state_entries();
    REQUIRE(entries.size() == snapshot.size());
    for (std::size_t i = 0; i < entries.size(); ++i) *entries[i].values = snapshot[i];
    for (int i = 0; i < 10; ++i) {
        step_on(opt, [&] {
            Tensor diff = add_scalar(w, -3.0);
            return reduce_sum(mul(diff, diff));
        });
    }
    CHECK(w[0] == w_full);  // bitwise
}

TEST_CASE("constant schedule never changes the rate") {
    ConstantSchedule sched(0.3);
    for (std::size_t e : {0, 1, 5, 100}) CHECK(sched.lr_at(e) == 0.3);
}

TEST_CASE("step schedule decays at inclusive milestone boundaries") {
    StepSchedule sched(0.5, 0.1, {2, 4});
    CHECK(sched.lr_at(0) == Catch::Approx(0.5));
    CHECK(sched.lr_at(1) == Catch::Approx(0.5));
    CHECK(sched.lr_at(2) == Catch::Approx(0.05));
    CHECK(sched.lr_at(3) == Catch::Approx(0.05));
    CHECK(sched.lr_at(4) == Catch::Approx(0.005));
    CHECK(sched.lr_at(100) == Catch::Approx(0.005));
}

TEST_CASE("schedule applies onto the optimizer") {
    Tensor w = Tensor::from_data({1}, {1.0});
    SGD opt({ref("w", w)}, 0.5);
    StepSchedule sched(0.5, 0.1, {1});
    sched.apply(opt, 0);
    CHECK(opt.lr() == Catch::Approx(0.5));
    sched.apply(opt, 1);
    CHECK(opt.lr() == Catch::Approx(0.05));

    step_on(opt, [&] { return reduce_sum(w); });
    CHECK(w[0] == Catch::Approx(0.95).margin(1e-15));
}

TEST_CASE("invalid schedules are rejected") {
    CHECK_THROWS_AS(ConstantSchedule(-0.1), ConfigError);
    CHECK_THROWS_AS(StepSchedule(0.1, 0.0, {1}), ConfigError);
    CHECK_THROWS_AS(StepSchedule(0.1, 0.5, {3, 3}), ConfigError);
    CHECK_THROWS_AS(StepSchedule(0.1, 0.5, {4, 2}), ConfigError);
}

TEST_CASE("frozen parameters never enter the optimizer step") {
    // an optimizer built from trainable_parameters-style filtering only
    // sees unfrozen tensors; a frozen tensor passed directly would fail
    // the gradient check, which is the contract
    Tensor w = Tensor::from_data({1}, {1.0});
    Tensor frozen = Tensor::from_data({1}, {7.0});
    w.enable_grad();
    SGD opt({ParamRef{"w", &w}}, 0.1);
    step_on(opt, [&] { return add(reduce_sum(w), reduce_sum(frozen)); });
    CHECK(frozen[0] == 7.0);
    CHECK(w[0] == Catch::Approx(0.9).margin(1e-15));
}

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "kdkit/checkpoint.hpp"
#include "kdkit/nn.hpp"
#include "kdkit/optim.hpp"
#include "kdkit/ops.hpp"

using namespace kdkit;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::MessageMatches;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

std::string read_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_bytes(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    REQUIRE(out);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

CheckpointData sample_data() {
    CheckpointData data;
    data.seed = 20260816;
    data.epoch = 12;
    data.best_dev = 0.9375;
    data.params.push_back({"fc1.weight", {2, 3}, {0.5, -1.25, 3.0, 1e-300, -0.0, 42.0}});
    data.params.push_back({"fc1.bias", {3}, {-7.0, 0.1, 0.30000000000000004}});
    data.opt_state.push_back({"opt.step", {}, {4.0}});
    data.opt_state.push_back({"opt.momentum.fc1.weight", {2, 3}, {1, 2, 3, 4, 5, 6}});
    return data;
}

}  // namespace

TEST_CASE("checkpoint round trip preserves every field and value") {
    const std::string path = temp_path("ckpt_roundtrip.ckpt");
    CheckpointData data = sample_data();
    save_checkpoint(path, data);
    CheckpointData loaded = load_checkpoint(path);

    CHECK(loaded.seed == data.seed);
    CHECK(loaded.epoch == data.epoch);
    CHECK(loaded.best_dev == data.best_dev);
    REQUIRE(loaded.params.size() == data.params.size());
    for (std::size_t i = 0; i < data.params.size(); ++i) {
        CHECK(loaded.params[i].path == data.params[i].path);
        CHECK(loaded.params[i].shape == data.params[i].shape);
        CHECK(loaded.params[i].values == data.params[i].values);
    }
    REQUIRE(loaded.opt_state.size() == data.opt_state.size());
    CHECK(loaded.opt_state[0].path == "opt.step");
    CHECK(loaded.opt_state[0].shape.empty());
    CHECK(loaded.opt_state[1].values == data.opt_state[1].values);

    // signed zero survives exactly
    CHECK(std::signbit(loaded.params[0].values[4]));
}

TEST_CASE("best dev metric survives as NaN before any evaluation") {
    const std::string path = temp_path("ckpt_nan.ckpt");
    CheckpointData data = sample_data();
    data.best_dev = std::numeric_limits<double>::quiet_NaN();
    save_checkpoint(path, data);
    CHECK(std::isnan(load_checkpoint(path).best_dev));
}

TEST_CASE("save then load then save is byte-identical") {
    const std::string a = temp_path("ckpt_bytes_a.ckpt");
    const std::string b = temp_path("ckpt_bytes_b.ckpt");
    save_checkpoint(a, sample_data());
    save_checkpoint(b, load_checkpoint(a));
    CHECK(read_bytes(a) == read_bytes(b));
}

TEST_CASE("checkpoint files start with the format magic") {
    const std::string path = temp_path("ckpt_magic.ckpt");
    save_checkpoint(path, sample_data());
    CHECK(read_bytes(path).substr(0, 4) == "KDF1");
}

TEST_CASE("version and format mismatches are rejected with clear errors") {
    const std::string path = temp_path("ckpt_bad.ckpt");
    const std::string good = [&] {
        save_checkpoint(path, sample_data());
        return read_bytes(path);
    }();

    SECTION("future version byte") {
        std::string bumped = good;
        bumped[3] = '2';
        write_bytes(path, bumped);
        CHECK_THROWS_MATCHES(load_checkpoint(path), IoError,
                             MessageMatches(ContainsSubstring("unsupported checkpoint version")));
    }
    SECTION("not a checkpoint at all") {
        write_bytes(path, "seed: 7\nepochs: 3\n");
        CHECK_THROWS_MATCHES(load_checkpoint(path), IoError,
                             MessageMatches(ContainsSubstring("is not a checkpoint file")));
    }
    SECTION("nearly empty file") {
        write_bytes(path, "KD");
        CHECK_THROWS_MATCHES(load_checkpoint(path), IoError,
                             MessageMatches(ContainsSubstring("is not a checkpoint file")));
    }
    SECTION("truncated payload") {
        write_bytes(path, good.substr(0, good.size() / 2));
        CHECK_THROWS_MATCHES(load_checkpoint(path), IoError, MessageMatches(ContainsSubstring("truncated")));
    }
    SECTION("trailing bytes") {
        write_bytes(path, good + "x");
        CHECK_THROWS_MATCHES(load_checkpoint(path), IoError, MessageMatches(ContainsSubstring("corrupt")));
    }
    SECTION("missing file") {
        CHECK_THROWS_AS(load_checkpoint(temp_path("ckpt_never_written.ckpt")), IoError);
    }
}

TEST_CASE("snapshot and restore round-trips model parameters") {
    MLP model(3, {4}, 2);
    init_parameters(model, 99, "student");
    auto params = model.named_parameters();
    CheckpointData snap = snapshot_state(99, 5, 0.5, params, nullptr);
    REQUIRE(snap.params.size() == params.size());
    CHECK(snap.opt_state.empty());

    std::vector<std::vector<double>> before;
    for (auto& p : params) before.push_back(p.tensor->values());

    for (auto& p : params) {
        for (std::size_t i = 0; i < p.tensor->size(); ++i) (*p.tensor)[i] += 1.0;
    }
    restore_params(snap, params);
    for (std::size_t i = 0; i < params.size(); ++i) {
        CHECK(params[i].tensor->values() == before[i]);
    }
}

TEST_CASE("restoring into a mismatched model fails loudly") {
    MLP model(3, {4}, 2);
    init_parameters(model, 7, "student");
    CheckpointData snap = snapshot_state(7, 1, 0.0, model.named_parameters(), nullptr);

    SECTION("parameter missing from checkpoint") {
        CheckpointData partial = snap;
        partial.params.pop_back();
        CHECK_THROWS_MATCHES(restore_params(partial, model.named_parameters()), IoError,
                             MessageMatches(ContainsSubstring("has no parameter")));
    }
    SECTION("shape mismatch") {
        MLP wider(3, {8}, 2);
        init_parameters(wider, 7, "student");
        CHECK_THROWS_AS(restore_params(snap, wider.named_parameters()), ShapeError);
    }
}

TEST_CASE("optimizer state restore resumes a run bit-exactly") {
    // deterministic batch for step k
    auto batch_input = [](std::size_t k) {
        RngStream s(4242, "probe", k);
        std::vector<double> vals(6);
        for (auto& v : vals) v = s.gaussian();
        return Tensor::from_data({2, 3}, vals);
    };
    auto run_steps = [&](MLP& model, Optimizer& opt, std::size_t from, std::size_t to) {
        for (std::size_t k = from; k < to; ++k) {
            TapeScope scope;
            opt.zero_grad();
            Tensor x = batch_input(k);
            IOBundle in;
            in.set("input", x);
            Tensor out = model.forward_bundle(in).get("logits");
            backward(mse_mean(out, Tensor({2, 2}, 1.0)));
            opt.step();
        }
    };

    MLP uninterrupted(3, {4}, 2);
    init_parameters(uninterrupted, 11, "student");
    Adam opt_a(uninterrupted.named_parameters(), 0.01);
    run_steps(uninterrupted, opt_a, 0, 10);

    MLP first_half(3, {4}, 2);
    init_parameters(first_half, 11, "student");
    Adam opt_b(first_half.named_parameters(), 0.01);
    run_steps(first_half, opt_b, 0, 4);
    const std::string path = temp_path("ckpt_resume.ckpt");
    save_checkpoint(path, snapshot_state(11, 4, 0.25, first_half.named_parameters(), &opt_b));

    MLP resumed(3, {4}, 2);
    init_parameters(resumed, 123456, "student");  // wrong init, must be overwritten
    Adam opt_c(resumed.named_parameters(), 0.01);
    CheckpointData ckpt = load_checkpoint(path);
    CHECK(ckpt.epoch == 4);
    restore_params(ckpt, resumed.named_parameters());
    restore_optimizer(ckpt, opt_c);
    run_steps(resumed, opt_c, 4, 10);

    auto a = uninterrupted.named_parameters();
    auto c = resumed.named_parameters();
    REQUIRE(a.size() == c.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].tensor->values() == c[i].tensor->values());
    }
}

TEST_CASE("optimizer restore rejects mismatched state") {
    Tensor w = Tensor::from_data({2}, {1.0, 2.0});
    w.set_requires_grad(true);
    SGD opt({{"w", &w}}, 0.1, 0.9);
    CheckpointData snap = snapshot_state(1, 1, 0.0, {}, &opt);

    SECTION("different buffer count") {
        Adam other({{"w", &w}}, 0.1);
        CHECK_THROWS_MATCHES(restore_optimizer(snap, other), IoError,
                             MessageMatches(ContainsSubstring("does not match")));
    }
    SECTION("different parameter path") {
        Tensor v = Tensor::from_data({2}, {1.0, 2.0});
        v.set_requires_grad(true);
        SGD other({{"w2", &v}}, 0.1, 0.9);
        CHECK_THROWS_MATCHES(restore_optimizer(snap, other), IoError,
                             MessageMatches(ContainsSubstring("has no optimizer entry")));
    }
    SECTION("different shape") {
        Tensor v = Tensor::from_data({3}, {1.0, 2.0, 3.0});
        v.set_requires_grad(true);
        SGD other({{"w", &v}}, 0.1, 0.9);
        CHECK_THROWS_AS(restore_optimizer(snap, other), ShapeError);
    }
}

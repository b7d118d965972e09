#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "kdkit/nn.hpp"
#include "kdkit/rng.hpp"
#include "kdkit/tensor.hpp"

namespace kdkit {

struct DatasetSpec {
    std::string kind;  // blobs | rings | linear_regression
    std::size_t n_train = 0;
    std::size_t n_dev = 0;
    std::size_t n_test = 0;
    std::size_t dims = 2;
    std::size_t classes = 2;   // classification kinds
    std::size_t targets = 1;   // regression output width
    double noise = 0.1;        // sigma
    double separation = 2.0;   // blobs: centroid circumradius
    std::string stream_label = "data";
};

// One split: inputs plus either integer labels or regression targets.
struct Split {
    Tensor inputs;   // [n x d]
    Tensor labels;   // [n] (classification only)
    Tensor targets;  // [n x t] (regression only)
    bool regression = false;

    std::size_t size() const { return inputs.rank() > 0 ? inputs.dim(0) : 0; }

    IOBundle row_bundle(const std::vector<std::size_t>& rows) const {
        const std::size_t d = inputs.dim(1);
        Tensor x(Shape{rows.size(), d});
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (std::size_t j = 0; j < d; ++j) x[i * d + j] = inputs[rows[i] * d + j];
        IOBundle b;
        b.set("input", x);
        if (regression) {
            const std::size_t t = targets.dim(1);
            Tensor y(Shape{rows.size(), t});
            for (std::size_t i = 0; i < rows.size(); ++i)
                for (std::size_t j = 0; j < t; ++j) y[i * t + j] = targets[rows[i] * t + j];
            b.set("target", y);
        } else {
            Tensor y(Shape{rows.size()});
            for (std::size_t i = 0; i < rows.size(); ++i) y[i] = labels[rows[i]];
            b.set("label", y);
        }
        return b;
    }
};

struct Splits {
    Split train, dev, test;
};

namespace detail {

// Unit-circumradius regular simplex: vertex i of C, embedded in d >= C-1
// dims. Coordinates come from the Helmert basis of the sum-zero subspace.
inline std::vector<double> simplex_vertex(std::size_t i, std::size_t classes, std::size_t dims) {
    std::vector<double> w(classes, -1.0 / static_cast<double>(classes));
    w[i] += 1.0;
    std::vector<double> out(dims, 0.0);
    const double radius = std::sqrt(1.0 - 1.0 / static_cast<double>(classes));
    for (std::size_t k = 1; k < classes; ++k) {
        double sum = 0.0;
        for (std::size_t j = 0; j < k; ++j) sum += w[j];
        const double coord =
            (sum - static_cast<double>(k) * w[k]) / std::sqrt(static_cast<double>(k * (k + 1)));
        out[k - 1] = coord / radius;
    }
    return out;
}

inline void validate(const DatasetSpec& spec) {
    if (spec.kind != "blobs" && spec.kind != "rings" && spec.kind != "linear_regression") {
        throw ConfigError("unknown dataset kind '" + spec.kind + "'");
    }
    if (spec.n_train == 0 || spec.n_dev == 0 || spec.n_test == 0) {
        throw ConfigError("dataset split sizes must be positive");
    }
    if (spec.noise < 0.0) throw ConfigError("dataset noise must be >= 0");
    if (spec.kind == "linear_regression") {
        if (spec.dims == 0 || spec.targets == 0) {
            throw ConfigError("linear_regression needs dims >= 1 and targets >= 1");
        }
        return;
    }
    if (spec.classes < 2) throw ConfigError("classification datasets need >= 2 classes");
    for (std::size_t n : {spec.n_train, spec.n_dev, spec.n_test}) {
        if (n < spec.classes) {
            throw ConfigError("each split needs at least one sample per class");
        }
    }
    if (spec.kind == "blobs" && spec.dims + 1 < spec.classes) {
        throw ConfigError("blobs with " + std::to_string(spec.classes) + " classes need dims >= " +
                          std::to_string(spec.classes - 1));
    }
    if (spec.kind == "rings" && spec.dims != 2) {
        throw ConfigError("rings data is two-dimensional");
    }
}

}  // namespace detail

// Draws every sample from one counter-based stream and slices the sequence
// into train/dev/test, so splits are disjoint by construction and the whole
// dataset is a pure function of (seed, label). Classification labels go
// round-robin before feature sampling, keeping classes balanced within one.
inline Splits generate(const DatasetSpec& spec, std::uint64_t seed) {
    detail::validate(spec);
    const std::size_t total = spec.n_train + spec.n_dev + spec.n_test;
    RngStream stream(seed, spec.stream_label);

    const bool regression = spec.kind == "linear_regression";
    const std::size_t d = spec.dims;
    Tensor inputs(Shape{total, d});
    Tensor labels(Shape{regression ? 0 : total});
    Tensor targets(regression ? Shape{total, spec.targets} : Shape{0, 0});

    if (spec.kind == "blobs") {
        std::vector<std::vector<double>> centroids;
        for (std::size_t c = 0; c < spec.classes; ++c) {
            auto v = detail::simplex_vertex(c, spec.classes, d);
            for (double& x : v) x *= spec.separation;
            centroids.push_back(std::move(v));
        }
        for (std::size_t i = 0; i < total; ++i) {
            const std::size_t c = i % spec.classes;
            labels[i] = static_cast<double>(c);
            for (std::size_t j = 0; j < d; ++j) {
                inputs[i * d + j] = centroids[c][j] + spec.noise * stream.gaussian();
            }
        }
    } else if (spec.kind == "rings") {
        const double two_pi = 6.283185307179586476925286766559;
        for (std::size_t i = 0; i < total; ++i) {
            const std::size_t c = i % spec.classes;
            labels[i] = static_cast<double>(c);
            const double r = static_cast<double>(c + 1) + spec.noise * stream.gaussian();
            const double theta = stream.uniform(0.0, two_pi);
            inputs[i * d + 0] = r * std::cos(theta);
            inputs[i * d + 1] = r * std::sin(theta);
        }
    } else {
        // hidden ground-truth weights first, then the sample sequence
        std::vector<double> wstar(d * spec.targets);
        for (double& w : wstar) w = stream.gaussian();
        for (std::size_t i = 0; i < total; ++i) {
            for (std::size_t j = 0; j < d; ++j) inputs[i * d + j] = stream.gaussian();
            for (std::size_t t = 0; t < spec.targets; ++t) {
                double y = 0.0;
                for (std::size_t j = 0; j < d; ++j) y += inputs[i * d + j] * wstar[j * spec.targets + t];
                targets[i * spec.targets + t] = y + spec.noise * stream.gaussian();
            }
        }
    }

    auto slice = [&](std::size_t begin, std::size_t count) {
        Split s;
        s.regression = regression;
        s.inputs = Tensor(Shape{count, d});
        for (std::size_t i = 0; i < count; ++i)
            for (std::size_t j = 0; j < d; ++j) s.inputs[i * d + j] = inputs[(begin + i) * d + j];
        if (regression) {
            s.targets = Tensor(Shape{count, spec.targets});
            for (std::size_t i = 0; i < count * spec.targets; ++i)
                s.targets[i] = targets[begin * spec.targets + i];
        } else {
            s.labels = Tensor(Shape{count});
            for (std::size_t i = 0; i < count; ++i) s.labels[i] = labels[begin + i];
        }
        return s;
    };

    Splits out;
    out.train = slice(0, spec.n_train);
    out.dev = slice(spec.n_train, spec.n_dev);
    out.test = slice(spec.n_train + spec.n_dev, spec.n_test);
    return out;
}

// Fisher-Yates permutation of 0..n-1 driven by the given stream.
inline std::vector<std::size_t> permutation(std::size_t n, RngStream& stream) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(stream.uniform_int(i));
        std::swap(idx[i - 1], idx[j]);
    }
    return idx;
}

// Splits a (possibly shuffled) split into batches; the final partial batch
// is kept. Pass nullptr to keep natural order (evaluation).
inline std::vector<IOBundle> iterate_batches(const Split& split, std::size_t batch_size,
                                             RngStream* shuffle) {
    if (batch_size == 0) throw ConfigError("batch size must be >= 1");
    const std::size_t n = split.size();
    std::vector<std::size_t> order;
    if (shuffle) {
        order = permutation(n, *shuffle);
    } else {
        order.resize(n);
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
    }
    std::vector<IOBundle> batches;
    for (std::size_t start = 0; start < n; start += batch_size) {
        const std::size_t count = std::min(batch_size, n - start);
        std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(start),
                                      order.begin() + static_cast<std::ptrdiff_t>(start + count));
        batches.push_back(split.row_bundle(rows));
    }
    return batches;
}

// ---------------------------------------------------------------------------
// CSV round trip (external inspection)
// ---------------------------------------------------------------------------

inline void export_split_csv(const Split& split, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    const std::size_t n = split.size(), d = split.inputs.dim(1);
    for (std::size_t j = 0; j < d; ++j) out << "x" << j << ",";
    if (split.regression) {
        const std::size_t t = split.targets.dim(1);
        for (std::size_t j = 0; j < t; ++j) out << "target" << j << (j + 1 < t ? "," : "");
    } else {
        out << "label";
    }
    out << "\n";
    char buf[64];
    auto emit = [&](double v) {
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        out << buf;
    };
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            emit(split.inputs[i * d + j]);
            out << ",";
        }
        if (split.regression) {
            const std::size_t t = split.targets.dim(1);
            for (std::size_t j = 0; j < t; ++j) {
                emit(split.targets[i * t + j]);
                if (j + 1 < t) out << ",";
            }
        } else {
            out << static_cast<long long>(split.labels[i]);
        }
        out << "\n";
    }
}

inline Split import_split_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path + "'");
    std::string header;
    if (!std::getline(in, header)) throw IoError("empty csv file '" + path + "'");

    std::vector<std::string> cols;
    {
        std::stringstream ss(header);
        std::string col;
        while (std::getline(ss, col, ',')) cols.push_back(col);
    }
    std::size_t d = 0;
    while (d < cols.size() && cols[d].rfind("x", 0) == 0) ++d;
    if (d == 0 || d == cols.size()) throw IoError("malformed csv header '" + header + "'");
    const bool regression = cols[d].rfind("target", 0) == 0;
    const std::size_t t = cols.size() - d;
    if (!regression && t != 1) throw IoError("malformed csv header '" + header + "'");

    std::vector<double> xs, ys;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::size_t k = 0;
        while (std::getline(ss, cell, ',')) {
            double v;
            try {
                v = std::stod(cell);
            } catch (const std::exception&) {
                throw IoError("bad numeric cell '" + cell + "' in '" + path + "'");
            }
            if (k < d) {
                xs.push_back(v);
            } else {
                ys.push_back(v);
            }
            ++k;
        }
        if (k != cols.size()) throw IoError("row with " + std::to_string(k) + " cells, expected " +
                                            std::to_string(cols.size()));
        ++n;
    }
    Split s;
    s.regression = regression;
    s.inputs = Tensor::from_data({n, d}, std::move(xs));
    if (regression) {
        s.targets = Tensor::from_data({n, t}, std::move(ys));
    } else {
        s.labels = Tensor::from_data({n}, std::move(ys));
    }
    return s;
}

}  // namespace kdkit

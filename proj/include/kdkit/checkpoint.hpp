#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "kdkit/nn.hpp"
#include "kdkit/optim.hpp"
#include "kdkit/tensor.hpp"

namespace kdkit {

// Checkpoint file: little-endian binary. Magic "KDF" plus a version digit,
// a fixed header (seed, epoch, best dev metric), then two record blocks:
// model parameters and optimizer state, each record being
// (path-length, path-utf8, rank, dims..., f64 values...).

struct ParamRecord {
    std::string path;
    Shape shape;
    std::vector<double> values;
};

struct CheckpointData {
    std::uint64_t seed = 0;
    std::uint64_t epoch = 0;  // completed epochs
    double best_dev = std::numeric_limits<double>::quiet_NaN();
    std::vector<ParamRecord> params;
    std::vector<ParamRecord> opt_state;
};

namespace detail {

constexpr char kCheckpointMagic[4] = {'K', 'D', 'F', '1'};

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f64(std::string& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    put_u64(out, bits);
}

class ByteReader {
public:
    ByteReader(const std::string& data, const std::string& path) : data_(data), path_(path) {}

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        }
        pos_ += 4;
        return v;
    }

    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        }
        pos_ += 8;
        return v;
    }

    double f64() {
        const std::uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, sizeof(v));
        return v;
    }

    std::string bytes(std::size_t n) {
        need(n);
        std::string s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    bool exhausted() const { return pos_ == data_.size(); }

private:
    void need(std::size_t n) {
        if (pos_ + n > data_.size()) {
            throw IoError("corrupt checkpoint '" + path_ + "': truncated");
        }
    }

    const std::string& data_;
    std::string path_;
    std::size_t pos_ = 0;
};

inline void put_record(std::string& out, const std::string& path, const Shape& shape,
                       const std::vector<double>& values) {
    put_u32(out, static_cast<std::uint32_t>(path.size()));
    out += path;
    put_u32(out, static_cast<std::uint32_t>(shape.size()));
    std::size_t expect = 1;
    for (std::size_t d : shape) {
        put_u64(out, d);
        expect *= d;
    }
    if (expect != values.size()) {
        throw Error("record '" + path + "' has " + std::to_string(values.size()) +
                    " values for a shape holding " + std::to_string(expect));
    }
    for (double v : values) put_f64(out, v);
}

inline ParamRecord read_record(ByteReader& r) {
    ParamRecord rec;
    const std::uint32_t path_len = r.u32();
    rec.path = r.bytes(path_len);
    const std::uint32_t rank = r.u32();
    std::size_t size = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        const std::uint64_t d = r.u64();
        rec.shape.push_back(static_cast<std::size_t>(d));
        size *= static_cast<std::size_t>(d);
    }
    rec.values.resize(size);
    for (std::size_t i = 0; i < size; ++i) rec.values[i] = r.f64();
    return rec;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const CheckpointData& data) {
    std::string out;
    out.append(detail::kCheckpointMagic, 4);
    detail::put_u64(out, data.seed);
    detail::put_u64(out, data.epoch);
    detail::put_f64(out, data.best_dev);
    detail::put_u64(out, data.params.size());
    for (const auto& rec : data.params) detail::put_record(out, rec.path, rec.shape, rec.values);
    detail::put_u64(out, data.opt_state.size());
    for (const auto& rec : data.opt_state) detail::put_record(out, rec.path, rec.shape, rec.values);

    std::ofstream file(path, std::ios::binary);
    if (!file) throw IoError("cannot open '" + path + "' for writing");
    file.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!file) throw IoError("failed writing checkpoint '" + path + "'");
}

inline CheckpointData load_checkpoint(const std::string& path) {
    std::ifstream file(path, std::ios::binary);
    if (!file) throw IoError("cannot open checkpoint '" + path + "'");
    std::string raw((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());

    if (raw.size() < 4 || raw.compare(0, 3, "KDF", 3) != 0) {
        throw IoError("'" + path + "' is not a checkpoint file");
    }
    if (raw[3] != detail::kCheckpointMagic[3]) {
        throw IoError("unsupported checkpoint version in '" + path + "' (expected KDF1, got KDF" +
                      std::string(1, raw[3]) + ")");
    }

    detail::ByteReader r(raw, path);
    r.bytes(4);
    CheckpointData data;
    data.seed = r.u64();
    data.epoch = r.u64();
    data.best_dev = r.f64();
    const std::uint64_t n_params = r.u64();
    for (std::uint64_t i = 0; i < n_params; ++i) data.params.push_back(detail::read_record(r));
    const std::uint64_t n_state = r.u64();
    for (std::uint64_t i = 0; i < n_state; ++i) data.opt_state.push_back(detail::read_record(r));
    if (!r.exhausted()) throw IoError("corrupt checkpoint '" + path + "': trailing bytes");
    return data;
}

// ---------------------------------------------------------------------------
// Bridging live training state to checkpoint records
// ---------------------------------------------------------------------------

inline CheckpointData snapshot_state(std::uint64_t seed, std::uint64_t epoch, double best_dev,
                                     const std::vector<ParamRef>& params, Optimizer* opt) {
    CheckpointData data;
    data.seed = seed;
    data.epoch = epoch;
    data.best_dev = best_dev;
    for (const auto& p : params) {
        data.params.push_back(ParamRecord{p.path, p.tensor->shape(), p.tensor->values()});
    }
    if (opt) {
        for (const auto& e : opt->state_entries()) {
            data.opt_state.push_back(ParamRecord{e.path, e.shape, *e.values});
        }
    }
    return data;
}

// Restores parameter values by path. Every live parameter must be present
// with a matching shape; silently ignoring a mismatch would make "resumed"
// runs diverge from what the file actually holds.
inline void restore_params(const CheckpointData& data, const std::vector<ParamRef>& params) {
    for (const auto& p : params) {
        const ParamRecord* rec = nullptr;
        for (const auto& r : data.params) {
            if (r.path == p.path) {
                rec = &r;
                break;
            }
        }
        if (!rec) throw IoError("checkpoint has no parameter '" + p.path + "'");
        if (rec->shape != p.tensor->shape()) {
            throw ShapeError("checkpoint parameter '" + p.path + "' has a different shape");
        }
        for (std::size_t i = 0; i < rec->values.size(); ++i) (*p.tensor)[i] = rec->values[i];
    }
}

inline void restore_optimizer(const CheckpointData& data, Optimizer& opt) {
    auto entries = opt.state_entries();
    if (entries.size() != data.opt_state.size()) {
        throw IoError("checkpoint optimizer state does not match this optimizer");
    }
    for (auto& e : entries) {
        const ParamRecord* rec = nullptr;
        for (const auto& r : data.opt_state) {
            if (r.path == e.path) {
                rec = &r;
                break;
            }
        }
        if (!rec) throw IoError("checkpoint has no optimizer entry '" + e.path + "'");
        if (rec->shape != e.shape || rec->values.size() != e.values->size()) {
            throw ShapeError("checkpoint optimizer entry '" + e.path + "' has a different shape");
        }
        *e.values = rec->values;
    }
}

}  // namespace kdkit

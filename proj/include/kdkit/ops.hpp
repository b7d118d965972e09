#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <vector>

#include "kdkit/tensor.hpp"

namespace kdkit {

namespace detail {

// Node id of an op input on the active tape: an intermediate keeps its node,
// a trainable leaf is registered lazily, everything else is a constant (-1).
inline int tracked_node(Tape* tape, const Tensor& t) {
    if (!tape) return -1;
    if (t.tape_id() == tape->id() && t.node() >= 0) return t.node();
    if (t.requires_grad()) return tape->leaf_node(t);
    return -1;
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    }
}

template <class Fwd, class Bwd>
Tensor unary_op(const Tensor& x, Shape out_shape, Fwd&& fwd, Bwd&& bwd) {
    Tensor out(std::move(out_shape));
    fwd(x.values(), out.values());
    Tape* tape = current_tape();
    const int nx = tracked_node(tape, x);
    if (nx >= 0) {
        Tensor xs = x.detach();
        out.set_node(tape->id(),
                     tape->add_node(out.size(), [nx, xs, bwd](const std::vector<double>& g, Tape& t) {
                         bwd(g, xs.values(), t.grad(nx));
                     }));
    }
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise suite
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
    Tape* tape = current_tape();
    const int na = detail::tracked_node(tape, a);
    const int nb = detail::tracked_node(tape, b);
    if (na >= 0 || nb >= 0) {
        out.set_node(tape->id(), tape->add_node(out.size(), [na, nb](const std::vector<double>& g, Tape& t) {
            if (na >= 0) {
                auto& ga = t.grad(na);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (nb >= 0) {
                auto& gb = t.grad(nb);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        }));
    }
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
    Tape* tape = current_tape();
    const int na = detail::tracked_node(tape, a);
    const int nb = detail::tracked_node(tape, b);
    if (na >= 0 || nb >= 0) {
        out.set_node(tape->id(), tape->add_node(out.size(), [na, nb](const std::vector<double>& g, Tape& t) {
            if (na >= 0) {
                auto& ga = t.grad(na);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (nb >= 0) {
                auto& gb = t.grad(nb);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        }));
    }
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
    Tape* tape = current_tape();
    const int na = detail::tracked_node(tape, a);
    const int nb = detail::tracked_node(tape, b);
    if (na >= 0 || nb >= 0) {
        Tensor as = a.detach(), bs = b.detach();
        out.set_node(tape->id(),
                     tape->add_node(out.size(), [na, nb, as, bs](const std::vector<double>& g, Tape& t) {
                         if (na >= 0) {
                             auto& ga = t.grad(na);
                             for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bs[i];
                         }
                         if (nb >= 0) {
                             auto& gb = t.grad(nb);
                             for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * as[i];
                         }
                     }));
    }
    return out;
}

// x * c (scalar broadcast)
inline Tensor scale(const Tensor& x, double c) {
    return detail::unary_op(
        x, x.shape(),
        [c](const std::vector<double>& in, std::vector<double>& out) {
            for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] * c;
        },
        [c](const std::vector<double>& g, const std::vector<double>&, std::vector<double>& gx) {
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * c;
        });
}

// x + c (scalar broadcast)
inline Tensor add_scalar(const Tensor& x, double c) {
    return detail::unary_op(
        x, x.shape(),
        [c](const std::vector<double>& in, std::vector<double>& out) {
            for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] + c;
        },
        [](const std::vector<double>& g, const std::vector<double>&, std::vector<double>& gx) {
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        });
}

// relu'(0) := 0 (tests avoid the kink on purpose)
inline Tensor relu(const Tensor& x) {
    return detail::unary_op(
        x, x.shape(),
        [](const std::vector<double>& in, std::vector<double>& out) {
            for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] > 0.0 ? in[i] : 0.0;
        },
        [](const std::vector<double>& g, const std::vector<double>& in, std::vector<double>& gx) {
            for (std::size_t i = 0; i < g.size(); ++i)
                if (in[i] > 0.0) gx[i] += g[i];
        });
}

inline Tensor exp(const Tensor& x) {
    return detail::unary_op(
        x, x.shape(),
        [](const std::vector<double>& in, std::vector<double>& out) {
            for (std::size_t i = 0; i < in.size(); ++i) out[i] = std::exp(in[i]);
        },
        [](const std::vector<double>& g, const std::vector<double>& in, std::vector<double>& gx) {
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * std::exp(in[i]);
        });
}

inline Tensor log(const Tensor& x) {
    return detail::unary_op(
        x, x.shape(),
        [](const std::vector<double>& in, std::vector<double>& out) {
            for (std::size_t i = 0; i < in.size(); ++i) out[i] = std::log(in[i]);
        },
        [](const std::vector<double>& g, const std::vector<double>& in, std::vector<double>& gx) {
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / in[i];
        });
}

inline Tensor reduce_sum(const Tensor& x) {
    Tensor out = Tensor::scalar(0.0);
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i];
    out[0] = s;
    Tape* tape = current_tape();
    const int nx = detail::tracked_node(tape, x);
    if (nx >= 0) {
        const std::size_t n = x.size();
        out.set_node(tape->id(), tape->add_node(1, [nx, n](const std::vector<double>& g, Tape& t) {
            auto& gx = t.grad(nx);
            for (std::size_t i = 0; i < n; ++i) gx[i] += g[0];
        }));
    }
    return out;
}

inline Tensor reduce_mean(const Tensor& x) {
    if (x.size() == 0) throw ShapeError("reduce_mean: empty tensor");
    Tensor out = Tensor::scalar(0.0);
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i];
    out[0] = s / static_cast<double>(x.size());
    Tape* tape = current_tape();
    const int nx = detail::tracked_node(tape, x);
    if (nx >= 0) {
        const std::size_t n = x.size();
        out.set_node(tape->id(), tape->add_node(1, [nx, n](const std::vector<double>& g, Tape& t) {
            auto& gx = t.grad(nx);
            const double gi = g[0] / static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) gx[i] += gi;
        }));
    }
    return out;
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw ShapeError("matmul: expected rank-2 tensors, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
    }
    if (a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out(Shape{m, n});
    const double* ap = a.data();
    const double* bp = b.data();
    double* cp = out.data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t l = 0; l < k; ++l) {
            const double av = ap[i * k + l];
            if (av == 0.0) continue;
            const double* brow = bp + l * n;
            double* crow = cp + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    Tape* tape = current_tape();
    const int na = detail::tracked_node(tape, a);
    const int nb = detail::tracked_node(tape, b);
    if (na >= 0 || nb >= 0) {
        Tensor as = a.detach(), bs = b.detach();
        out.set_node(tape->id(), tape->add_node(out.size(), [=](const std::vector<double>& g, Tape& t) {
            if (na >= 0) {
                // dA = dC * B^T
                auto& ga = t.grad(na);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t l = 0; l < k; ++l) {
                        double s = 0.0;
                        const double* grow = g.data() + i * n;
                        const double* brow = bs.data() + l * n;
                        for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
                        ga[i * k + l] += s;
                    }
            }
            if (nb >= 0) {
                // dB = A^T * dC
                auto& gb = t.grad(nb);
                for (std::size_t i = 0; i < m; ++i) {
                    const double* arow = as.data() + i * k;
                    const double* grow = g.data() + i * n;
                    for (std::size_t l = 0; l < k; ++l) {
                        const double av = arow[l];
                        if (av == 0.0) continue;
                        double* gbrow = gb.data() + l * n;
                        for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                    }
                }
            }
        }));
    }
    return out;
}

inline Tensor transpose2d(const Tensor& x) {
    if (x.rank() != 2) {
        throw ShapeError("transpose2d: expected rank-2 tensor, got " + shape_str(x.shape()));
    }
    const std::size_t m = x.dim(0), n = x.dim(1);
    Tensor out(Shape{n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
    Tape* tape = current_tape();
    const int nx = detail::tracked_node(tape, x);
    if (nx >= 0) {
        out.set_node(tape->id(), tape->add_node(out.size(), [=](const std::vector<double>& g, Tape& t) {
            auto& gx = t.grad(nx);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[j * m + i];
        }));
    }
    return out;
}

// rows of x get bias added: out[i,j] = x[i,j] + bias[j]
inline Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
    if (x.rank() != 2 || bias.rank() != 1 || bias.dim(0) != x.dim(1)) {
        throw ShapeError("add_row_bias: incompatible shapes " + shape_str(x.shape()) + " and " +
                         shape_str(bias.shape()));
    }
    const std::size_t m = x.dim(0), n = x.dim(1);
    Tensor out(x.shape());
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] + bias[j];
    Tape* tape = current_tape();
    const int nx = detail::tracked_node(tape, x);
    const int nb = detail::tracked_node(tape, bias);
    if (nx >= 0 || nb >= 0) {
        out.set_node(tape->id(), tape->add_node(out.size(), [=](const std::vector<double>& g, Tape& t) {
            if (nx >= 0) {
                auto& gx = t.grad(nx);
                for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
            }
            if (nb >= 0) {
                auto& gb = t.grad(nb);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
            }
        }));
    }
    return out;
}

// ---------------------------------------------------------------------------
// convolution (cross-correlation, zero padding)
// ---------------------------------------------------------------------------

inline Tensor conv2d(const Tensor& x, const Tensor& kernel, std::size_t stride = 1,
                     std::size_t padding = 0) {
    if (x.rank() != 4 || kernel.rank() != 4) {
        throw ShapeError("conv2d: expected input [b,c,h,w] and kernel [o,c,kh,kw], got " +
                         shape_str(x.shape()) + " and " + shape_str(kernel.shape()));
    }
    if (x.dim(1) != kernel.dim(1)) {
        throw ShapeError("conv2d: channel mismatch, input " + shape_str(x.shape()) +
                         " vs kernel " + shape_str(kernel.shape()));
    }
    if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
    const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t o = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
    if (kh > h + 2 * padding || kw > w + 2 * padding) {
        throw ShapeError("conv2d: kernel larger than padded input");
    }
    const std::size_t oh = (h + 2 * padding - kh) / stride + 1;
    const std::size_t ow = (w + 2 * padding - kw) / stride + 1;
    Tensor out(Shape{b, o, oh, ow});

    // captured by value below; the backward closure outlives this frame
    const auto xi = [=](std::size_t bb, std::size_t cc, std::size_t yy, std::size_t xx) {
        return ((bb * c + cc) * h + yy) * w + xx;
    };
    const auto ki = [=](std::size_t oo, std::size_t cc, std::size_t u, std::size_t v) {
        return ((oo * c + cc) * kh + u) * kw + v;
    };
    const auto oi = [=](std::size_t bb, std::size_t oo, std::size_t i, std::size_t j) {
        return ((bb * o + oo) * oh + i) * ow + j;
    };

    const long p = static_cast<long>(padding);
    for (std::size_t bb = 0; bb < b; ++bb)
        for (std::size_t oo = 0; oo < o; ++oo)
            for (std::size_t i = 0; i < oh; ++i)
                for (std::size_t j = 0; j < ow; ++j) {
                    double s = 0.0;
                    for (std::size_t cc = 0; cc < c; ++cc)
                        for (std::size_t u = 0; u < kh; ++u) {
                            const long yy = static_cast<long>(i * stride + u) - p;
                            if (yy < 0 || yy >= static_cast<long>(h)) continue;
                            for (std::size_t v = 0; v < kw; ++v) {
                                const long xx = static_cast<long>(j * stride + v) - p;
                                if (xx < 0 || xx >= static_cast<long>(w)) continue;
                                s += x[xi(bb, cc, static_cast<std::size_t>(yy),
                                          static_cast<std::size_t>(xx))] *
                                     kernel[ki(oo, cc, u, v)];
                            }
                        }
                    out[oi(bb, oo, i, j)] = s;
                }

    Tape* tape = current_tape();
    const int nx = detail::tracked_node(tape, x);
    const int nk = detail::tracked_node(tape, kernel);
    if (nx >= 0 || nk >= 0) {
        Tensor xs = x.detach(), ks = kernel.detach();
        out.set_node(tape->id(), tape->add_node(out.size(), [=](const std::vector<double>& g, Tape& t) {
            std::vector<double>* gx = nx >= 0 ? &t.grad(nx) : nullptr;
            std::vector<double>* gk = nk >= 0 ? &t.grad(nk) : nullptr;
            for (std::size_t bb = 0; bb < b; ++bb)
                for (std::size_t oo = 0; oo < o; ++oo)
                    for (std::size_t i = 0; i < oh; ++i)
                        for (std::size_t j = 0; j < ow; ++j) {
                            const double go = g[oi(bb, oo, i, j)];
                            if (go == 0.0) continue;
                            for (std::size_t cc = 0; cc < c; ++cc)
                                for (std::size_t u = 0; u < kh; ++u) {
                                    const long yy = static_cast<long>(i * stride + u) - p;
                                    if (yy < 0 || yy >= static_cast<long>(h)) continue;
                                    for (std::size_t v = 0; v < kw; ++v) {
                                        const long xx = static_cast<long>(j * stride + v) - p;
                                        if (xx < 0 || xx >= static_cast<long>(w)) continue;
                                        const std::size_t xidx =
                                            xi(bb, cc, static_cast<std::size_t>(yy),
                                               static_cast<std::size_t>(xx));
                                        if (gx) (*gx)[xidx] += go * ks[ki(oo, cc, u, v)];
                                        if (gk) (*gk)[ki(oo, cc, u, v)] += go * xs[xidx];
                                    }
                                }
                        }
        }));
    }
    return out;
}

// out[b,c,h,w] = x[b,c,h,w] + bias[c]
inline Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
    if (x.rank() != 4 || bias.rank() != 1 || bias.dim(0) != x.dim(1)) {
        throw ShapeError("add_channel_bias: incompatible shapes " + shape_str(x.shape()) +
                         " and " + shape_str(bias.shape()));
    }
    const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor out(x.shape());
    for (std::size_t bb = 0; bb < b; ++bb)
        for (std::size_t cc = 0; cc < c; ++cc) {
            const std::size_t base = (bb * c + cc) * hw;
            for (std::size_t i = 0; i < hw; ++i) out[base + i] = x[base + i] + bias[cc];
        }
    Tape* tape = current_tape();
    const int nx = detail::tracked_node(tape, x);
    const int nb = detail::tracked_node(tape, bias);
    if (nx >= 0 || nb >= 0) {
        out.set_node(tape->id(), tape->add_node(out.size(), [=](const std::vector<double>& g, Tape& t) {
            if (nx >= 0) {
                auto& gx = t.grad(nx);
                for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
            }
            if (nb >= 0) {
                auto& gb = t.grad(nb);
                for (std::size_t bb = 0; bb < b; ++bb)
                    for (std::size_t cc = 0; cc < c; ++cc) {
                        const std::size_t base = (bb * c + cc) * hw;
                        for (std::size_t i = 0; i < hw; ++i) gb[cc] += g[base + i];
                    }
            }
        }));
    }
    return out;
}

// [b,c,h,w] -> [b,c], mean over the spatial grid
inline Tensor global_avg_pool(const Tensor& x) {
    if (x.rank() != 4) {
        throw ShapeError("global_avg_pool: expected [b,c,h,w], got " + shape_str(x.shape()));
    }
    const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    if (hw == 0) throw ShapeError("global_avg_pool: empty spatial grid");
    Tensor out(Shape{b, c});
    for (std::size_t bb = 0; bb < b; ++bb)
        for (std::size_t cc = 0; cc < c; ++cc) {
            const std::size_t base = (bb * c + cc) * hw;
            double s = 0.0;
            for (std::size_t i = 0; i < hw; ++i) s += x[base + i];
            out[bb * c + cc] = s / static_cast<double>(hw);
        }
    Tape* tape = current_tape();
    const int nx = detail::tracked_node(tape, x);
    if (nx >= 0) {
        out.set_node(tape->id(), tape->add_node(out.size(), [=](const std::vector<double>& g, Tape& t) {
            auto& gx = t.grad(nx);
            const double inv = 1.0 / static_cast<double>(hw);
            for (std::size_t bb = 0; bb < b; ++bb)
                for (std::size_t cc = 0; cc < c; ++cc) {
                    const double gi = g[bb * c + cc] * inv;
                    const std::size_t base = (bb * c + cc) * hw;
                    for (std::size_t i = 0; i < hw; ++i) gx[base + i] += gi;
                }
        }));
    }
    return out;
}

// [d0, d1, ..., dk] -> [d0, d1*...*dk]; underlying order unchanged
inline Tensor flatten2d(const Tensor& x) {
    if (x.rank() < 1) throw ShapeError("flatten2d: scalar input");
    const std::size_t d0 = x.dim(0);
    const std::size_t rest = d0 == 0 ? 0 : x.size() / d0;
    Tensor out = Tensor::from_data({d0, rest}, x.values());
    Tape* tape = current_tape();
    const int nx = detail::tracked_node(tape, x);
    if (nx >= 0) {
        out.set_node(tape->id(), tape->add_node(out.size(), [nx](const std::vector<double>& g, Tape& t) {
            auto& gx = t.grad(nx);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }));
    }
    return out;
}

// ---------------------------------------------------------------------------
// softmax family (max-subtracted for stability)
// ---------------------------------------------------------------------------

namespace detail {

// probs[r,:] = softmax(logits[r,:] / tau); plain softmax for tau = 1
inline void softmax_rows_into(const double* logits, std::size_t rows, std::size_t cols,
                              double tau, double* probs) {
    for (std::size_t r = 0; r < rows; ++r) {
        const double* z = logits + r * cols;
        double* p = probs + r * cols;
        double zmax = z[0];
        for (std::size_t j = 1; j < cols; ++j) zmax = std::max(zmax, z[j]);
        double denom = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            p[j] = std::exp((z[j] - zmax) / tau);
            denom += p[j];
        }
        for (std::size_t j = 0; j < cols; ++j) p[j] /= denom;
    }
}

}  // namespace detail

// Rowwise softmax of x / tau.
inline Tensor softmax_rows(const Tensor& x, double tau = 1.0) {
    if (x.rank() != 2) {
        throw ShapeError("softmax_rows: expected rank-2 logits, got " + shape_str(x.shape()));
    }
    if (x.dim(1) == 0) throw ShapeError("softmax_rows: empty class axis");
    if (!(tau > 0.0)) throw Error("softmax_rows: temperature must be positive");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    Tensor out(x.shape());
    detail::softmax_rows_into(x.data(), rows, cols, tau, out.data());
    Tape* tape = current_tape();
    const int nx = detail::tracked_node(tape, x);
    if (nx >= 0) {
        Tensor ys = out.detach();
        out.set_node(tape->id(), tape->add_node(out.size(), [=](const std::vector<double>& g, Tape& t) {
            auto& gx = t.grad(nx);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* y = ys.data() + r * cols;
                const double* gr = g.data() + r * cols;
                double dot = 0.0;
                for (std::size_t j = 0; j < cols; ++j) dot += gr[j] * y[j];
                for (std::size_t j = 0; j < cols; ++j)
                    gx[r * cols + j] += y[j] * (gr[j] - dot) / tau;
            }
        }));
    }
    return out;
}

namespace detail {

inline void check_labels(const Tensor& labels, std::size_t rows, std::size_t cols,
                         const char* op) {
    if (labels.rank() != 1 || labels.dim(0) != rows) {
        throw ShapeError(std::string(op) + ": labels must be rank-1 of length " +
                         std::to_string(rows) + ", got " + shape_str(labels.shape()));
    }
    for (std::size_t r = 0; r < rows; ++r) {
        const double v = labels[r];
        if (v != std::floor(v) || v < 0.0 || v >= static_cast<double>(cols)) {
            throw Error(std::string(op) + ": label " + std::to_string(v) + " at row " +
                        std::to_string(r) + " out of range [0, " + std::to_string(cols) + ")");
        }
    }
}

}  // namespace detail

// Batch-mean cross entropy of logits against integer labels (natural log).
inline Tensor cross_entropy_mean(const Tensor& logits, const Tensor& labels) {
    if (logits.rank() != 2) {
        throw ShapeError("cross_entropy_mean: expected rank-2 logits, got " +
                         shape_str(logits.shape()));
    }
    const std::size_t rows = logits.dim(0), cols = logits.dim(1);
    if (rows == 0 || cols == 0) throw ShapeError("cross_entropy_mean: empty batch or class axis");
    detail::check_labels(labels, rows, cols, "cross_entropy_mean");

    auto probs = std::make_shared<std::vector<double>>(rows * cols);
    detail::softmax_rows_into(logits.data(), rows, cols, 1.0, probs->data());

    double loss = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        const double* z = logits.data() + r * cols;
        double zmax = z[0];
        for (std::size_t j = 1; j < cols; ++j) zmax = std::max(zmax, z[j]);
        double denom = 0.0;
        for (std::size_t j = 0; j < cols; ++j) denom += std::exp(z[j] - zmax);
        const auto y = static_cast<std::size_t>(labels[r]);
        loss += std::log(denom) + zmax - z[y];
    }
    Tensor out = Tensor::scalar(loss / static_cast<double>(rows));

    Tape* tape = current_tape();
    const int nz = detail::tracked_node(tape, logits);
    if (nz >= 0) {
        Tensor ls = labels.detach();
        out.set_node(tape->id(), tape->add_node(1, [=](const std::vector<double>& g, Tape& t) {
            auto& gz = t.grad(nz);
            const double gi = g[0] / static_cast<double>(rows);
            for (std::size_t r = 0; r < rows; ++r) {
                const auto y = static_cast<std::size_t>(ls[r]);
                for (std::size_t j = 0; j < cols; ++j) {
                    double d = (*probs)[r * cols + j];
                    if (j == y) d -= 1.0;
                    gz[r * cols + j] += gi * d;
                }
            }
        }));
    }
    return out;
}

// Batch-mean KL(p || q) between softened distributions, where p comes from
// teacher logits (always treated as constant) and q from student logits.
// Gradient wrt a student logit is (q_i - p_i) / (tau * batch).
inline Tensor kl_softened_mean(const Tensor& teacher_logits, const Tensor& student_logits,
                               double tau) {
    if (teacher_logits.rank() != 2 || student_logits.rank() != 2 ||
        teacher_logits.shape() != student_logits.shape()) {
        throw ShapeError("kl_softened_mean: logit shapes differ, " +
                         shape_str(teacher_logits.shape()) + " vs " +
                         shape_str(student_logits.shape()));
    }
    if (!(tau > 0.0)) throw Error("kl_softened_mean: temperature must be positive");
    const std::size_t rows = teacher_logits.dim(0), cols = teacher_logits.dim(1);
    if (rows == 0 || cols < 2) throw ShapeError("kl_softened_mean: need a batch and >= 2 classes");

    auto p = std::make_shared<std::vector<double>>(rows * cols);
    auto q = std::make_shared<std::vector<double>>(rows * cols);
    detail::softmax_rows_into(teacher_logits.data(), rows, cols, tau, p->data());
    detail::softmax_rows_into(student_logits.data(), rows, cols, tau, q->data());

    // sum p * (log p - log q) accumulated via the stable log-softmax form
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < cols; ++j) {
            const double pj = (*p)[r * cols + j];
            if (pj > 0.0) total += pj * (std::log(pj) - std::log((*q)[r * cols + j]));
        }
    }
    Tensor out = Tensor::scalar(total / static_cast<double>(rows));

    Tape* tape = current_tape();
    const int nq = detail::tracked_node(tape, student_logits);
    if (nq >= 0) {
        out.set_node(tape->id(), tape->add_node(1, [=](const std::vector<double>& g, Tape& t) {
            auto& gz = t.grad(nq);
            const double gi = g[0] / (tau * static_cast<double>(rows));
            for (std::size_t i = 0; i < rows * cols; ++i) gz[i] += gi * ((*q)[i] - (*p)[i]);
        }));
    }
    return out;
}

// Mean over all elements of (a - b)^2.
inline Tensor mse_mean(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mse_mean");
    if (a.size() == 0) throw ShapeError("mse_mean: empty tensors");
    const std::size_t n = a.size();
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    Tensor out = Tensor::scalar(s / static_cast<double>(n));
    Tape* tape = current_tape();
    const int na = detail::tracked_node(tape, a);
    const int nb = detail::tracked_node(tape, b);
    if (na >= 0 || nb >= 0) {
        Tensor as = a.detach(), bs = b.detach();
        out.set_node(tape->id(), tape->add_node(1, [=](const std::vector<double>& g, Tape& t) {
            const double gi = 2.0 * g[0] / static_cast<double>(n);
            if (na >= 0) {
                auto& ga = t.grad(na);
                for (std::size_t i = 0; i < n; ++i) ga[i] += gi * (as[i] - bs[i]);
            }
            if (nb >= 0) {
                auto& gb = t.grad(nb);
                for (std::size_t i = 0; i < n; ++i) gb[i] -= gi * (as[i] - bs[i]);
            }
        }));
    }
    return out;
}

}  // namespace kdkit

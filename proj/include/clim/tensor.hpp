#pragma once

// Dense float64 tensors with reverse-mode automatic differentiation.
// Each recorded operation stores its parents and a backward closure; calling
// backward() on a scalar walks the graph in reverse topological order and
// accumulates gradients additively. No broadcasting beyond the explicit
// scalar/row helpers below; shape mismatches throw.

#include <algorithm>
#include <cblas.h>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <unordered_set>
#include <vector>

#include "clim/common.hpp"

namespace clim {

using Shape = std::vector<long>;

inline long numel(const Shape& s) {
    long n = 1;
    for (long d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

namespace detail {

struct Node {
    std::vector<double> values;
    std::vector<double> grad;  // allocated lazily, same size as values
    Shape shape;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Pulls from this node's grad and accumulates into parents' grads.
    std::function<void(Node&)> backward_fn;

    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
    }
};

inline thread_local bool grad_enabled = true;

}  // namespace detail

// Disables tape recording in scope (pure evaluation).
struct NoGradGuard {
    NoGradGuard() : prev_(detail::grad_enabled) { detail::grad_enabled = false; }
    ~NoGradGuard() { detail::grad_enabled = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape) { return make(std::move(shape), 0.0); }
    static Tensor full(Shape shape, double v) { return make(std::move(shape), v); }
    static Tensor scalar(double v) { return make(Shape{1}, v); }
    static Tensor from(Shape shape, std::vector<double> values) {
        if (long(values.size()) != numel(shape))
            throw DimensionError("tensor data size " + std::to_string(values.size()) +
                                 " does not match shape " + shape_str(shape));
        auto n = std::make_shared<detail::Node>();
        n->shape = std::move(shape);
        n->values = std::move(values);
        return Tensor(std::move(n));
    }
    // Leaf parameter: participates in gradient computation.
    static Tensor param(Shape shape, std::vector<double> values) {
        Tensor t = from(std::move(shape), std::move(values));
        t.node_->requires_grad = true;
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    long size() const { return long(node_->values.size()); }
    long dim(int i) const { return node_->shape[std::size_t(i)]; }
    int ndim() const { return int(node_->shape.size()); }

    std::vector<double>& values() { return node_->values; }
    const std::vector<double>& values() const { return node_->values; }
    double item() const {
        if (node_->values.size() != 1)
            throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
        return node_->values[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    bool has_grad() const { return node_->grad.size() == node_->values.size(); }
    const std::vector<double>& grad() const {
        if (!has_grad()) throw ContractError("gradient not allocated");
        return node_->grad;
    }
    std::vector<double>& grad_mut() {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() { node_->grad.assign(node_->values.size(), 0.0); }
    void drop_grad() { node_->grad.clear(); }

    std::shared_ptr<detail::Node> node() const { return node_; }

    explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

  private:
    static Tensor make(Shape shape, double fill) {
        auto n = std::make_shared<detail::Node>();
        n->values.assign(std::size_t(numel(shape)), fill);
        n->shape = std::move(shape);
        return Tensor(std::move(n));
    }

    std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline Tensor record(Shape shape, std::vector<double> values,
                     std::vector<Tensor> parents,
                     std::function<void(Node&)> backward_fn) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->values = std::move(values);
    if (grad_enabled) {
        bool need = false;
        for (const auto& p : parents) need = need || p.node()->requires_grad;
        if (need) {
            n->requires_grad = true;
            n->parents.reserve(parents.size());
            for (auto& p : parents) n->parents.push_back(p.node());
            n->backward_fn = std::move(backward_fn);
        }
    }
    return Tensor(std::move(n));
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " +
                             shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<double> out(a.values());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.values()[i];
    auto an = a.node(), bn = b.node();
    return detail::record(a.shape(), std::move(out), {a, b}, [an, bn](detail::Node& n) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) bn->grad[i] += n.grad[i];
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    std::vector<double> out(a.values());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.values()[i];
    auto an = a.node(), bn = b.node();
    return detail::record(a.shape(), std::move(out), {a, b}, [an, bn](detail::Node& n) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) bn->grad[i] -= n.grad[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<double> out(a.values());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.values()[i];
    auto an = a.node(), bn = b.node();
    return detail::record(a.shape(), std::move(out), {a, b}, [an, bn](detail::Node& n) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                an->grad[i] += n.grad[i] * bn->values[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                bn->grad[i] += n.grad[i] * an->values[i];
        }
    });
}

inline Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.values());
    for (auto& v : out) v *= c;
    auto an = a.node();
    return detail::record(a.shape(), std::move(out), {a}, [an, c](detail::Node& n) {
        an->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += c * n.grad[i];
    });
}

inline Tensor add_const(const Tensor& a, double c) {
    std::vector<double> out(a.values());
    for (auto& v : out) v += c;
    auto an = a.node();
    return detail::record(a.shape(), std::move(out), {a}, [an](detail::Node& n) {
        an->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i];
    });
}

inline Tensor tanh(const Tensor& a) {
    std::vector<double> out(a.values());
    for (auto& v : out) v = std::tanh(v);
    auto an = a.node();
    return detail::record(a.shape(), std::move(out), {a}, [an](detail::Node& n) {
        an->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i)
            an->grad[i] += n.grad[i] * (1.0 - n.values[i] * n.values[i]);
    });
}

inline Tensor sigmoid(const Tensor& a) {
    std::vector<double> out(a.values());
    for (auto& v : out) v = 1.0 / (1.0 + std::exp(-v));
    auto an = a.node();
    return detail::record(a.shape(), std::move(out), {a}, [an](detail::Node& n) {
        an->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i)
            an->grad[i] += n.grad[i] * n.values[i] * (1.0 - n.values[i]);
    });
}

inline Tensor relu(const Tensor& a) {
    std::vector<double> out(a.values());
    for (auto& v : out) v = v > 0.0 ? v : 0.0;
    auto an = a.node();
    return detail::record(a.shape(), std::move(out), {a}, [an](detail::Node& n) {
        an->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i)
            if (an->values[i] > 0.0) an->grad[i] += n.grad[i];
    });
}

// ---------------------------------------------------------------------------
// matrix products (BLAS-backed)

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
    const long m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(std::size_t(m * n), 0.0);
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, int(m), int(n), int(k),
                1.0, a.values().data(), int(k), b.values().data(), int(n), 0.0,
                out.data(), int(n));
    auto an = a.node(), bn = b.node();
    return detail::record({m, n}, std::move(out), {a, b},
                          [an, bn, m, k, n](detail::Node& nd) {
        if (an->requires_grad) {
            an->ensure_grad();
            // dA += dC * B^T
            cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, int(m), int(k),
                        int(n), 1.0, nd.grad.data(), int(n), bn->values.data(),
                        int(n), 1.0, an->grad.data(), int(k));
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            // dB += A^T * dC
            cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, int(k), int(n),
                        int(m), 1.0, an->values.data(), int(k), nd.grad.data(),
                        int(n), 1.0, bn->grad.data(), int(n));
        }
    });
}

// Batched matmul: [B,m,k] x [B,k,n] -> [B,m,n]; with transpose_b,
// [B,m,k] x [B,n,k] -> [B,m,n].
inline Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false) {
    if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0))
        throw DimensionError("bmm: incompatible shapes " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
    const long B = a.dim(0), m = a.dim(1), k = a.dim(2);
    const long n = transpose_b ? b.dim(1) : b.dim(2);
    if ((transpose_b ? b.dim(2) : b.dim(1)) != k)
        throw DimensionError("bmm: incompatible shapes " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
    const long bstride = b.dim(1) * b.dim(2);
    const long ldb = b.dim(2);
    std::vector<double> out(std::size_t(B * m * n), 0.0);
    for (long i = 0; i < B; ++i) {
        cblas_dgemm(CblasRowMajor, CblasNoTrans,
                    transpose_b ? CblasTrans : CblasNoTrans, int(m), int(n),
                    int(k), 1.0, a.values().data() + i * m * k, int(k),
                    b.values().data() + i * bstride, int(ldb), 0.0,
                    out.data() + i * m * n, int(n));
    }
    auto an = a.node(), bn = b.node();
    return detail::record({B, m, n}, std::move(out), {a, b},
                          [an, bn, B, m, k, n, bstride, ldb,
                           transpose_b](detail::Node& nd) {
        if (an->requires_grad) an->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        for (long i = 0; i < B; ++i) {
            const double* dc = nd.grad.data() + i * m * n;
            if (an->requires_grad) {
                // dA = dC * Bop^T; Bop^T is B when b was transposed, B^T else
                cblas_dgemm(CblasRowMajor, CblasNoTrans,
                            transpose_b ? CblasNoTrans : CblasTrans, int(m),
                            int(k), int(n), 1.0, dc, int(n),
                            bn->values.data() + i * bstride, int(ldb), 1.0,
                            an->grad.data() + i * m * k, int(k));
            }
            if (bn->requires_grad) {
                if (!transpose_b) {
                    // dB = A^T * dC   ([k,n])
                    cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, int(k),
                                int(n), int(m), 1.0,
                                an->values.data() + i * m * k, int(k), dc,
                                int(n), 1.0, bn->grad.data() + i * bstride,
                                int(ldb));
                } else {
                    // C = A * B^T  =>  dB = dC^T * A   ([n,k])
                    cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, int(n),
                                int(k), int(m), 1.0, dc, int(n),
                                an->values.data() + i * m * k, int(k), 1.0,
                                bn->grad.data() + i * bstride, int(ldb));
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// shape ops

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (numel(shape) != a.size())
        throw DimensionError("reshape: cannot view " + shape_str(a.shape()) +
                             " as " + shape_str(shape));
    std::vector<double> out(a.values());
    auto an = a.node();
    return detail::record(std::move(shape), std::move(out), {a},
                          [an](detail::Node& n) {
        an->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i];
    });
}

namespace detail {
// Decomposes a shape around `axis` into (outer, axis_dim, inner).
inline void axis_split(const Shape& s, int axis, long& outer, long& ad, long& inner) {
    outer = 1;
    inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[std::size_t(i)];
    ad = s[std::size_t(axis)];
    for (std::size_t i = std::size_t(axis) + 1; i < s.size(); ++i) inner *= s[i];
}
}  // namespace detail

inline Tensor concat(const std::vector<Tensor>& ts, int axis) {
    if (ts.empty()) throw ContractError("concat: empty tensor list");
    const int nd = ts[0].ndim();
    if (axis < 0 || axis >= nd)
        throw DimensionError("concat: axis " + std::to_string(axis) +
                             " out of range for " + shape_str(ts[0].shape()));
    Shape out_shape = ts[0].shape();
    long axis_total = 0;
    for (const auto& t : ts) {
        if (t.ndim() != nd)
            throw DimensionError("concat: rank mismatch " + shape_str(t.shape()) +
                                 " vs " + shape_str(ts[0].shape()));
        for (int i = 0; i < nd; ++i)
            if (i != axis && t.dim(i) != ts[0].dim(i))
                throw DimensionError("concat: non-axis dims differ " +
                                     shape_str(t.shape()) + " vs " +
                                     shape_str(ts[0].shape()));
        axis_total += t.dim(axis);
    }
    out_shape[std::size_t(axis)] = axis_total;

    long outer, ad_out, inner;
    detail::axis_split(out_shape, axis, outer, ad_out, inner);
    std::vector<double> out(std::size_t(outer * ad_out * inner));
    std::vector<long> offsets;  // axis offset of each input
    long off = 0;
    for (const auto& t : ts) {
        offsets.push_back(off);
        const long ad = t.dim(axis);
        for (long o = 0; o < outer; ++o)
            std::copy_n(t.values().data() + o * ad * inner, ad * inner,
                        out.data() + (o * ad_out + off) * inner);
        off += ad;
    }
    std::vector<std::shared_ptr<detail::Node>> pn;
    for (const auto& t : ts) pn.push_back(t.node());
    return detail::record(out_shape, std::move(out), ts,
                          [pn, offsets, outer, ad_out, inner, axis](detail::Node& n) {
        for (std::size_t pi = 0; pi < pn.size(); ++pi) {
            if (!pn[pi]->requires_grad) continue;
            pn[pi]->ensure_grad();
            const long ad = pn[pi]->shape[std::size_t(axis)];
            const long off2 = offsets[pi];
            for (long o = 0; o < outer; ++o) {
                const double* src = n.grad.data() + (o * ad_out + off2) * inner;
                double* dst = pn[pi]->grad.data() + o * ad * inner;
                for (long j = 0; j < ad * inner; ++j) dst[j] += src[j];
            }
        }
    });
}

inline Tensor slice(const Tensor& a, int axis, long begin, long end) {
    if (axis < 0 || axis >= a.ndim())
        throw DimensionError("slice: axis out of range for " + shape_str(a.shape()));
    if (begin < 0 || end > a.dim(axis) || begin >= end)
        throw DimensionError("slice: range [" + std::to_string(begin) + "," +
                             std::to_string(end) + ") invalid for " +
                             shape_str(a.shape()));
    long outer, ad, inner;
    detail::axis_split(a.shape(), axis, outer, ad, inner);
    const long w = end - begin;
    Shape out_shape = a.shape();
    out_shape[std::size_t(axis)] = w;
    std::vector<double> out(std::size_t(outer * w * inner));
    for (long o = 0; o < outer; ++o)
        std::copy_n(a.values().data() + (o * ad + begin) * inner, w * inner,
                    out.data() + o * w * inner);
    auto an = a.node();
    return detail::record(out_shape, std::move(out), {a},
                          [an, outer, ad, inner, begin, w](detail::Node& n) {
        an->ensure_grad();
        for (long o = 0; o < outer; ++o) {
            const double* src = n.grad.data() + o * w * inner;
            double* dst = an->grad.data() + (o * ad + begin) * inner;
            for (long j = 0; j < w * inner; ++j) dst[j] += src[j];
        }
    });
}

// ---------------------------------------------------------------------------
// reductions

inline Tensor sum(const Tensor& a) {
    double s = std::accumulate(a.values().begin(), a.values().end(), 0.0);
    auto an = a.node();
    return detail::record({1}, {s}, {a}, [an](detail::Node& n) {
        an->ensure_grad();
        for (auto& g : an->grad) g += n.grad[0];
    });
}

inline Tensor mean(const Tensor& a) {
    const double inv = 1.0 / double(a.size());
    double s = std::accumulate(a.values().begin(), a.values().end(), 0.0) * inv;
    auto an = a.node();
    return detail::record({1}, {s}, {a}, [an, inv](detail::Node& n) {
        an->ensure_grad();
        for (auto& g : an->grad) g += n.grad[0] * inv;
    });
}

// ---------------------------------------------------------------------------
// row/column broadcasting helpers

// x: [R,C], s: [R] (or [R,1]) -> x with row r scaled by s[r]. s is typically a
// constant mask; gradient flows to s as well when it is a parameter.
inline Tensor scale_rows(const Tensor& x, const Tensor& s) {
    if (x.ndim() != 2 || long(s.size()) != x.dim(0))
        throw DimensionError("scale_rows: " + shape_str(x.shape()) + " vs " +
                             shape_str(s.shape()));
    const long R = x.dim(0), C = x.dim(1);
    std::vector<double> out(x.values());
    for (long r = 0; r < R; ++r)
        for (long c = 0; c < C; ++c) out[std::size_t(r * C + c)] *= s.values()[std::size_t(r)];
    auto xn = x.node(), sn = s.node();
    return detail::record(x.shape(), std::move(out), {x, s},
                          [xn, sn, R, C](detail::Node& n) {
        if (xn->requires_grad) {
            xn->ensure_grad();
            for (long r = 0; r < R; ++r)
                for (long c = 0; c < C; ++c)
                    xn->grad[std::size_t(r * C + c)] +=
                        n.grad[std::size_t(r * C + c)] * sn->values[std::size_t(r)];
        }
        if (sn->requires_grad) {
            sn->ensure_grad();
            for (long r = 0; r < R; ++r) {
                double acc = 0.0;
                for (long c = 0; c < C; ++c)
                    acc += n.grad[std::size_t(r * C + c)] * xn->values[std::size_t(r * C + c)];
                sn->grad[std::size_t(r)] += acc;
            }
        }
    });
}

// x: [R,C], v: [C] -> x + v per row (bias add).
inline Tensor add_rows(const Tensor& x, const Tensor& v) {
    if (x.ndim() != 2 || v.size() != x.dim(1))
        throw DimensionError("add_rows: " + shape_str(x.shape()) + " vs " +
                             shape_str(v.shape()));
    const long R = x.dim(0), C = x.dim(1);
    std::vector<double> out(x.values());
    for (long r = 0; r < R; ++r)
        for (long c = 0; c < C; ++c) out[std::size_t(r * C + c)] += v.values()[std::size_t(c)];
    auto xn = x.node(), vn = v.node();
    return detail::record(x.shape(), std::move(out), {x, v},
                          [xn, vn, R, C](detail::Node& n) {
        if (xn->requires_grad) {
            xn->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) xn->grad[i] += n.grad[i];
        }
        if (vn->requires_grad) {
            vn->ensure_grad();
            for (long r = 0; r < R; ++r)
                for (long c = 0; c < C; ++c)
                    vn->grad[std::size_t(c)] += n.grad[std::size_t(r * C + c)];
        }
    });
}

// ---------------------------------------------------------------------------
// softmax family

inline Tensor softmax(const Tensor& a, int axis) {
    if (axis < 0 || axis >= a.ndim())
        throw DimensionError("softmax: axis " + std::to_string(axis) +
                             " out of range for " + shape_str(a.shape()));
    long outer, ad, inner;
    detail::axis_split(a.shape(), axis, outer, ad, inner);
    std::vector<double> out(a.values().size());
    for (long o = 0; o < outer; ++o) {
        for (long in = 0; in < inner; ++in) {
            double mx = -HUGE_VAL;
            for (long j = 0; j < ad; ++j)
                mx = std::max(mx, a.values()[std::size_t((o * ad + j) * inner + in)]);
            double z = 0.0;
            for (long j = 0; j < ad; ++j) {
                double e = std::exp(a.values()[std::size_t((o * ad + j) * inner + in)] - mx);
                out[std::size_t((o * ad + j) * inner + in)] = e;
                z += e;
            }
            for (long j = 0; j < ad; ++j)
                out[std::size_t((o * ad + j) * inner + in)] /= z;
        }
    }
    auto an = a.node();
    return detail::record(a.shape(), std::move(out), {a},
                          [an, outer, ad, inner](detail::Node& n) {
        an->ensure_grad();
        for (long o = 0; o < outer; ++o) {
            for (long in = 0; in < inner; ++in) {
                double dot = 0.0;
                for (long j = 0; j < ad; ++j) {
                    const auto idx = std::size_t((o * ad + j) * inner + in);
                    dot += n.grad[idx] * n.values[idx];
                }
                for (long j = 0; j < ad; ++j) {
                    const auto idx = std::size_t((o * ad + j) * inner + in);
                    an->grad[idx] += n.values[idx] * (n.grad[idx] - dot);
                }
            }
        }
    });
}

// scores: [B,Tq,Tk], key_mask: [B,Tk] of 0/1. Softmax over the last axis
// restricted to unmasked keys; fully-masked rows are a contract violation.
inline Tensor masked_softmax(const Tensor& scores, const Tensor& key_mask) {
    if (scores.ndim() != 3 || key_mask.ndim() != 2 ||
        scores.dim(0) != key_mask.dim(0) || scores.dim(2) != key_mask.dim(1))
        throw DimensionError("masked_softmax: " + shape_str(scores.shape()) +
                             " vs mask " + shape_str(key_mask.shape()));
    const long B = scores.dim(0), Tq = scores.dim(1), Tk = scores.dim(2);
    std::vector<double> out(scores.values().size(), 0.0);
    for (long b = 0; b < B; ++b) {
        const double* m = key_mask.values().data() + b * Tk;
        bool any = false;
        for (long k = 0; k < Tk; ++k) any = any || m[k] > 0.5;
        if (!any) throw ContractError("masked_softmax: all key positions masked");
        for (long q = 0; q < Tq; ++q) {
            const double* row = scores.values().data() + (b * Tq + q) * Tk;
            double* orow = out.data() + (b * Tq + q) * Tk;
            double mx = -HUGE_VAL;
            for (long k = 0; k < Tk; ++k)
                if (m[k] > 0.5) mx = std::max(mx, row[k]);
            double z = 0.0;
            for (long k = 0; k < Tk; ++k) {
                if (m[k] > 0.5) {
                    orow[k] = std::exp(row[k] - mx);
                    z += orow[k];
                }
            }
            for (long k = 0; k < Tk; ++k) orow[k] /= z;
        }
    }
    auto sn = scores.node(), mn = key_mask.node();
    return detail::record(scores.shape(), std::move(out), {scores, key_mask},
                          [sn, mn, B, Tq, Tk](detail::Node& n) {
        if (!sn->requires_grad) return;
        sn->ensure_grad();
        for (long b = 0; b < B; ++b) {
            for (long q = 0; q < Tq; ++q) {
                const double* y = n.values.data() + (b * Tq + q) * Tk;
                const double* dy = n.grad.data() + (b * Tq + q) * Tk;
                double* dx = sn->grad.data() + (b * Tq + q) * Tk;
                double dot = 0.0;
                for (long k = 0; k < Tk; ++k) dot += dy[k] * y[k];
                for (long k = 0; k < Tk; ++k) dx[k] += y[k] * (dy[k] - dot);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// sequence helpers

// x: [B,T,D], mask: [B,T] -> masked mean over time: [B,D].
inline Tensor masked_mean_time(const Tensor& x, const Tensor& mask) {
    if (x.ndim() != 3 || mask.ndim() != 2 || x.dim(0) != mask.dim(0) ||
        x.dim(1) != mask.dim(1))
        throw DimensionError("masked_mean_time: " + shape_str(x.shape()) +
                             " vs mask " + shape_str(mask.shape()));
    const long B = x.dim(0), T = x.dim(1), D = x.dim(2);
    std::vector<double> out(std::size_t(B * D), 0.0);
    std::vector<double> counts(std::size_t(B), 0.0);
    for (long b = 0; b < B; ++b) {
        double cnt = 0.0;
        for (long t = 0; t < T; ++t) {
            const double m = mask.values()[std::size_t(b * T + t)];
            if (m > 0.5) {
                cnt += 1.0;
                const double* row = x.values().data() + (b * T + t) * D;
                for (long d = 0; d < D; ++d) out[std::size_t(b * D + d)] += row[d];
            }
        }
        if (cnt == 0.0)
            throw ContractError("masked_mean_time: utterance " + std::to_string(b) +
                                " has no unmasked positions");
        counts[std::size_t(b)] = cnt;
        for (long d = 0; d < D; ++d) out[std::size_t(b * D + d)] /= cnt;
    }
    auto xn = x.node(), mn = mask.node();
    return detail::record({B, D}, std::move(out), {x, mask},
                          [xn, mn, counts, B, T, D](detail::Node& n) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (long b = 0; b < B; ++b) {
            const double inv = 1.0 / counts[std::size_t(b)];
            for (long t = 0; t < T; ++t) {
                if (mn->values[std::size_t(b * T + t)] <= 0.5) continue;
                double* dst = xn->grad.data() + (b * T + t) * D;
                const double* src = n.grad.data() + b * D;
                for (long d = 0; d < D; ++d) dst[d] += src[d] * inv;
            }
        }
    });
}

// g: [B,D] -> [B,T,D], copying each utterance vector to all T positions.
inline Tensor tile_time(const Tensor& g, long T) {
    if (g.ndim() != 2) throw DimensionError("tile_time: want [B,D], got " + shape_str(g.shape()));
    const long B = g.dim(0), D = g.dim(1);
    std::vector<double> out(std::size_t(B * T * D));
    for (long b = 0; b < B; ++b)
        for (long t = 0; t < T; ++t)
            std::copy_n(g.values().data() + b * D, D, out.data() + (b * T + t) * D);
    auto gn = g.node();
    return detail::record({B, T, D}, std::move(out), {g},
                          [gn, B, T, D](detail::Node& n) {
        gn->ensure_grad();
        for (long b = 0; b < B; ++b)
            for (long t = 0; t < T; ++t) {
                const double* src = n.grad.data() + (b * T + t) * D;
                double* dst = gn->grad.data() + b * D;
                for (long d = 0; d < D; ++d) dst[d] += src[d];
            }
    });
}

// Additive attention scores: s[b,i,j] = sum_a v[a] * tanh(P[b,i,a] + K[b,j,a]).
inline Tensor additive_scores(const Tensor& P, const Tensor& K, const Tensor& v) {
    if (P.ndim() != 3 || K.ndim() != 3 || P.dim(0) != K.dim(0) ||
        P.dim(2) != K.dim(2) || v.size() != P.dim(2))
        throw DimensionError("additive_scores: " + shape_str(P.shape()) + " vs " +
                             shape_str(K.shape()) + " vs " + shape_str(v.shape()));
    const long B = P.dim(0), Tq = P.dim(1), Tk = K.dim(1), A = P.dim(2);
    std::vector<double> out(std::size_t(B * Tq * Tk), 0.0);
    for (long b = 0; b < B; ++b)
        for (long i = 0; i < Tq; ++i)
            for (long j = 0; j < Tk; ++j) {
                const double* p = P.values().data() + (b * Tq + i) * A;
                const double* k = K.values().data() + (b * Tk + j) * A;
                double s = 0.0;
                for (long a = 0; a < A; ++a)
                    s += v.values()[std::size_t(a)] * std::tanh(p[a] + k[a]);
                out[std::size_t((b * Tq + i) * Tk + j)] = s;
            }
    auto pn = P.node(), kn = K.node(), vn = v.node();
    return detail::record({B, Tq, Tk}, std::move(out), {P, K, v},
                          [pn, kn, vn, B, Tq, Tk, A](detail::Node& n) {
        if (pn->requires_grad) pn->ensure_grad();
        if (kn->requires_grad) kn->ensure_grad();
        if (vn->requires_grad) vn->ensure_grad();
        for (long b = 0; b < B; ++b)
            for (long i = 0; i < Tq; ++i)
                for (long j = 0; j < Tk; ++j) {
                    const double ds = n.grad[std::size_t((b * Tq + i) * Tk + j)];
                    if (ds == 0.0) continue;
                    const double* p = pn->values.data() + (b * Tq + i) * A;
                    const double* k = kn->values.data() + (b * Tk + j) * A;
                    for (long a = 0; a < A; ++a) {
                        const double t = std::tanh(p[a] + k[a]);
                        const double dpre = ds * vn->values[std::size_t(a)] * (1.0 - t * t);
                        if (pn->requires_grad) pn->grad[(b * Tq + i) * A + a] += dpre;
                        if (kn->requires_grad) kn->grad[(b * Tk + j) * A + a] += dpre;
                        if (vn->requires_grad) vn->grad[std::size_t(a)] += ds * t;
                    }
                }
    });
}

// ---------------------------------------------------------------------------
// layer normalization over the last dimension of a 2-D tensor

inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
    if (x.ndim() != 2 || gain.size() != x.dim(1) || bias.size() != x.dim(1))
        throw DimensionError("layer_norm: " + shape_str(x.shape()) + " with gain " +
                             shape_str(gain.shape()));
    const long R = x.dim(0), C = x.dim(1);
    std::vector<double> out(std::size_t(R * C));
    std::vector<double> inv_std(std::size_t(R), 0.0);
    std::vector<double> xhat(std::size_t(R * C), 0.0);
    for (long r = 0; r < R; ++r) {
        const double* row = x.values().data() + r * C;
        double mu = 0.0;
        for (long c = 0; c < C; ++c) mu += row[c];
        mu /= double(C);
        double var = 0.0;
        for (long c = 0; c < C; ++c) var += (row[c] - mu) * (row[c] - mu);
        var /= double(C);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[std::size_t(r)] = is;
        for (long c = 0; c < C; ++c) {
            const double h = (row[c] - mu) * is;
            xhat[std::size_t(r * C + c)] = h;
            out[std::size_t(r * C + c)] =
                gain.values()[std::size_t(c)] * h + bias.values()[std::size_t(c)];
        }
    }
    auto xn = x.node(), gn = gain.node(), bn = bias.node();
    return detail::record({R, C}, std::move(out), {x, gain, bias},
                          [xn, gn, bn, inv_std, xhat, R, C](detail::Node& n) {
        for (long r = 0; r < R; ++r) {
            const double* dy = n.grad.data() + r * C;
            const double* h = xhat.data() + r * C;
            if (gn->requires_grad) {
                gn->ensure_grad();
                for (long c = 0; c < C; ++c) gn->grad[std::size_t(c)] += dy[c] * h[c];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (long c = 0; c < C; ++c) bn->grad[std::size_t(c)] += dy[c];
            }
            if (xn->requires_grad) {
                xn->ensure_grad();
                double m1 = 0.0, m2 = 0.0;  // mean(dh), mean(dh*h)
                for (long c = 0; c < C; ++c) {
                    const double dh = dy[c] * gn->values[std::size_t(c)];
                    m1 += dh;
                    m2 += dh * h[c];
                }
                m1 /= double(C);
                m2 /= double(C);
                const double is = inv_std[std::size_t(r)];
                double* dx = xn->grad.data() + r * C;
                for (long c = 0; c < C; ++c) {
                    const double dh = dy[c] * gn->values[std::size_t(c)];
                    dx[c] += is * (dh - m1 - h[c] * m2);
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// 1-D convolution, same-length zero padding. x: [B,T,Cin],
// kernel: [W,Cin,Cout] (W odd), bias: [Cout] -> [B,T,Cout].

inline Tensor conv1d_same(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
    if (x.ndim() != 3 || kernel.ndim() != 3)
        throw DimensionError("conv1d: want [B,T,Cin] and [W,Cin,Cout], got " +
                             shape_str(x.shape()) + " and " + shape_str(kernel.shape()));
    const long B = x.dim(0), T = x.dim(1), Cin = x.dim(2);
    const long W = kernel.dim(0), Cout = kernel.dim(2);
    if (kernel.dim(1) != Cin)
        throw DimensionError("conv1d: channel mismatch " + shape_str(x.shape()) +
                             " vs " + shape_str(kernel.shape()));
    if (W % 2 == 0)
        throw ConfigError("conv1d: kernel width must be odd, got " + std::to_string(W));
    if (bias.size() != Cout)
        throw DimensionError("conv1d: bias " + shape_str(bias.shape()) +
                             " vs Cout " + std::to_string(Cout));
    const long pad = W / 2;
    // im2col: [B*T, W*Cin], zero-filled outside the sequence.
    std::vector<double> col(std::size_t(B * T * W * Cin), 0.0);
    for (long b = 0; b < B; ++b)
        for (long t = 0; t < T; ++t)
            for (long w = 0; w < W; ++w) {
                const long src_t = t + w - pad;
                if (src_t < 0 || src_t >= T) continue;
                std::copy_n(x.values().data() + (b * T + src_t) * Cin, Cin,
                            col.data() + ((b * T + t) * W + w) * Cin);
            }
    std::vector<double> out(std::size_t(B * T * Cout));
    for (long i = 0; i < B * T; ++i)
        std::copy_n(bias.values().data(), Cout, out.data() + i * Cout);
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, int(B * T), int(Cout),
                int(W * Cin), 1.0, col.data(), int(W * Cin),
                kernel.values().data(), int(Cout), 1.0, out.data(), int(Cout));
    auto xn = x.node(), kn = kernel.node(), bn = bias.node();
    auto col_shared = std::make_shared<std::vector<double>>(std::move(col));
    return detail::record({B, T, Cout}, std::move(out), {x, kernel, bias},
                          [xn, kn, bn, col_shared, B, T, Cin, W, Cout,
                           pad](detail::Node& n) {
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (long i = 0; i < B * T; ++i)
                for (long c = 0; c < Cout; ++c)
                    bn->grad[std::size_t(c)] += n.grad[std::size_t(i * Cout + c)];
        }
        if (kn->requires_grad) {
            kn->ensure_grad();
            // dK += col^T * dY
            cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, int(W * Cin),
                        int(Cout), int(B * T), 1.0, col_shared->data(),
                        int(W * Cin), n.grad.data(), int(Cout), 1.0,
                        kn->grad.data(), int(Cout));
        }
        if (xn->requires_grad) {
            xn->ensure_grad();
            // dcol = dY * K^T, then scatter back to dX
            std::vector<double> dcol(std::size_t(B * T * W * Cin), 0.0);
            cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, int(B * T),
                        int(W * Cin), int(Cout), 1.0, n.grad.data(), int(Cout),
                        kn->values.data(), int(Cout), 0.0, dcol.data(),
                        int(W * Cin));
            for (long b = 0; b < B; ++b)
                for (long t = 0; t < T; ++t)
                    for (long w = 0; w < W; ++w) {
                        const long src_t = t + w - pad;
                        if (src_t < 0 || src_t >= T) continue;
                        const double* src = dcol.data() + ((b * T + t) * W + w) * Cin;
                        double* dst = xn->grad.data() + (b * T + src_t) * Cin;
                        for (long c = 0; c < Cin; ++c) dst[c] += src[c];
                    }
        }
    });
}

// ---------------------------------------------------------------------------
// embedding lookup. table: [V,E]; ids laid out as B rows of T; out-of-range
// ids are data errors. When frozen, no gradient reaches the table.

inline Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids,
                               long B, long T, bool frozen = false) {
    if (table.ndim() != 2)
        throw DimensionError("embedding_lookup: table must be 2-D, got " +
                             shape_str(table.shape()));
    if (long(ids.size()) != B * T)
        throw DimensionError("embedding_lookup: ids size " + std::to_string(ids.size()) +
                             " vs B*T " + std::to_string(B * T));
    const long V = table.dim(0), E = table.dim(1);
    for (std::size_t i = 0; i < ids.size(); ++i)
        if (ids[i] < 0 || long(ids[i]) >= V)
            throw DataError("embedding_lookup: id " + std::to_string(ids[i]) +
                            " at position " + std::to_string(i) +
                            " outside vocabulary of size " + std::to_string(V));
    std::vector<double> out(std::size_t(B * T * E));
    for (long i = 0; i < B * T; ++i)
        std::copy_n(table.values().data() + long(ids[std::size_t(i)]) * E, E,
                    out.data() + i * E);
    auto tn = table.node();
    if (frozen) {
        // not recorded: the table gets no gradient
        return Tensor::from({B, T, E}, std::move(out));
    }
    return detail::record({B, T, E}, std::move(out), {table},
                          [tn, ids, B, T, E](detail::Node& n) {
        tn->ensure_grad();
        for (long i = 0; i < B * T; ++i) {
            const double* src = n.grad.data() + i * E;
            double* dst = tn->grad.data() + long(ids[std::size_t(i)]) * E;
            for (long e = 0; e < E; ++e) dst[e] += src[e];
        }
    });
}

// ---------------------------------------------------------------------------
// inverted dropout

inline Tensor dropout_apply(const Tensor& x, double rate, bool training, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0)
        throw ConfigError("dropout rate must be in [0,1), got " + std::to_string(rate));
    if (!training || rate == 0.0) return x;
    const double keep = 1.0 - rate;
    auto mask = std::make_shared<std::vector<double>>(x.values().size());
    std::vector<double> out(x.values().size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double m = rng.uniform() < rate ? 0.0 : 1.0 / keep;
        (*mask)[i] = m;
        out[i] = x.values()[i] * m;
    }
    auto xn = x.node();
    return detail::record(x.shape(), std::move(out), {x}, [xn, mask](detail::Node& n) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i)
            xn->grad[i] += n.grad[i] * (*mask)[i];
    });
}

// ---------------------------------------------------------------------------
// cross entropy with per-row weights. logits: [N,C]; loss =
// sum_i w_i * NLL_i / sum_i w_i. Rows with w_i == 0 contribute nothing.

inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                            const std::vector<double>& row_weights) {
    if (logits.ndim() != 2)
        throw DimensionError("cross_entropy: logits must be 2-D, got " +
                             shape_str(logits.shape()));
    const long N = logits.dim(0), C = logits.dim(1);
    if (long(targets.size()) != N || long(row_weights.size()) != N)
        throw DimensionError("cross_entropy: " + std::to_string(targets.size()) +
                             " targets / " + std::to_string(row_weights.size()) +
                             " weights for " + std::to_string(N) + " rows");
    double wsum = 0.0;
    for (double w : row_weights) wsum += w;
    if (wsum <= 0.0) throw ContractError("cross_entropy: all rows have zero weight");
    auto probs = std::make_shared<std::vector<double>>(std::size_t(N * C));
    double loss = 0.0;
    for (long i = 0; i < N; ++i) {
        const double w = row_weights[std::size_t(i)];
        const double* row = logits.values().data() + i * C;
        double mx = -HUGE_VAL;
        for (long c = 0; c < C; ++c) mx = std::max(mx, row[c]);
        double z = 0.0;
        for (long c = 0; c < C; ++c) z += std::exp(row[c] - mx);
        const double logz = std::log(z) + mx;
        for (long c = 0; c < C; ++c)
            (*probs)[std::size_t(i * C + c)] = std::exp(row[c] - logz);
        const int t = targets[std::size_t(i)];
        if (t < 0 || long(t) >= C)
            throw DataError("cross_entropy: target " + std::to_string(t) +
                            " outside [0," + std::to_string(C) + ") at row " +
                            std::to_string(i));
        loss += w * (logz - row[t]);
    }
    loss /= wsum;
    auto ln = logits.node();
    return detail::record({1}, {loss}, {logits},
                          [ln, probs, targets, row_weights, wsum, N, C](detail::Node& n) {
        ln->ensure_grad();
        const double d = n.grad[0] / wsum;
        for (long i = 0; i < N; ++i) {
            const double w = row_weights[std::size_t(i)];
            if (w == 0.0) continue;
            double* dst = ln->grad.data() + i * C;
            const double* p = probs->data() + i * C;
            for (long c = 0; c < C; ++c) dst[c] += d * w * p[c];
            dst[targets[std::size_t(i)]] -= d * w;
        }
    });
}

// ---------------------------------------------------------------------------
// reverse-mode sweep

inline void backward(const Tensor& loss) {
    if (loss.size() != 1)
        throw ContractError("backward: loss must be scalar, got " +
                            shape_str(loss.shape()));
    if (!loss.requires_grad()) return;  // nothing reachable needs gradients

    // Deterministic post-order DFS over the recorded graph.
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            detail::Node* p = node->parents[idx++].get();
            if (p->requires_grad && seen.insert(p).second)
                stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    loss.node()->ensure_grad();
    loss.node()->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* nd = *it;
        if (nd->backward_fn) {
            nd->ensure_grad();
            nd->backward_fn(*nd);
        }
    }
}

}  // namespace clim

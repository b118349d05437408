#pragma once

// Minimal reverse-mode differentiation over dense row-major float64 tensors.
//
// A Tensor is a handle to a graph node. Operations executed while gradient
// recording is enabled (the default) and with at least one input that requires
// a gradient produce a node that remembers its parents and a backward closure.
// `backward(loss)` walks the graph in reverse topological order.
//
// Leaf gradients are accumulated by backward() and must be reset with
// zero_grad() before the next backward() that reaches the same leaf; a second
// backward into an unreset leaf is a ContractError.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <mutex>
#include <numbers>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <cblas.h>

#include "earlybird/error.hpp"
#include "earlybird/rng.hpp"

namespace earlybird {

using Shape = std::vector<std::size_t>;
using Mask = std::span<const std::uint8_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "x" : "") << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {

inline constexpr double kInvSqrt2 = 0.70710678118654752440;

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    bool leaf = true;
    bool grad_pending = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    void ensure_grad() {
        if (grad.size() != value.size()) {
            grad.assign(value.size(), 0.0);
        }
    }
};

inline bool& grad_enabled_flag() {
    thread_local bool enabled = true;
    return enabled;
}

} // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
    ~NoGradGuard() { detail::grad_enabled_flag() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
        : node_(std::make_shared<detail::Node>()) {
        if (shape.empty()) {
            shape = {1};
        }
        for (auto d : shape) {
            if (d == 0) {
                throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
            }
        }
        if (shape_numel(shape) != values.size()) {
            throw DimensionError("shape " + shape_str(shape) + " does not match " +
                                 std::to_string(values.size()) + " values");
        }
        node_->shape = std::move(shape);
        node_->value = std::move(values);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }

    static Tensor full(Shape shape, double v, bool requires_grad = false) {
        const auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, v), requires_grad);
    }

    static Tensor scalar(double v, bool requires_grad = false) { return Tensor({1}, {v}, requires_grad); }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t numel() const { return node_->value.size(); }

    std::span<const double> values() const { return node_->value; }
    /// Direct write access; intended for leaves (parameter updates, test setup).
    std::span<double> mutable_values() { return node_->value; }
    double item() const {
        if (numel() != 1) {
            throw ContractError("item() on tensor of shape " + shape_str(shape()));
        }
        return node_->value[0];
    }
    double operator[](std::size_t i) const { return node_->value[i]; }

    bool requires_grad() const { return node_->requires_grad; }
    bool is_leaf() const { return node_->leaf; }

    /// Empty until a backward pass reaches this tensor.
    std::span<const double> grad() const { return node_->grad; }
    bool has_grad() const { return node_->grad.size() == node_->value.size(); }

    void zero_grad() {
        if (node_->requires_grad) {
            node_->grad.assign(node_->value.size(), 0.0);
        }
        node_->grad_pending = false;
    }

    /// Copy of the values with no graph attached.
    Tensor detach() const { return Tensor(shape(), node_->value, false); }

    const std::shared_ptr<detail::Node>& node() const { return node_; }

    /// Builds the output of an operation and, when recording, attaches it to
    /// the graph. `backward` receives the output node; its grad is populated.
    static Tensor from_op(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                          std::function<void(detail::Node&)> backward) {
        Tensor out(std::move(shape), std::move(values), false);
        if (!grad_enabled()) {
            return out;
        }
        const bool any = std::any_of(inputs.begin(), inputs.end(),
                                     [](const Tensor& t) { return t.defined() && t.requires_grad(); });
        if (!any) {
            return out;
        }
        out.node_->requires_grad = true;
        out.node_->leaf = false;
        out.node_->parents.reserve(inputs.size());
        for (auto& t : inputs) {
            out.node_->parents.push_back(t.node_);
        }
        out.node_->backward = std::move(backward);
        return out;
    }

private:
    std::shared_ptr<detail::Node> node_;
};

namespace detail {

/// Gradient buffer of parent `i` if it participates, else nullptr.
inline double* parent_grad(Node& out, std::size_t i) {
    auto& p = out.parents[i];
    if (!p || !p->requires_grad) {
        return nullptr;
    }
    p->ensure_grad();
    return p->grad.data();
}

struct AxisSplit {
    std::size_t outer;
    std::size_t n;
    std::size_t inner;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
    if (axis >= shape.size()) {
        throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for shape " +
                             shape_str(shape));
    }
    AxisSplit s{1, shape[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) {
        s.outer *= shape[i];
    }
    for (std::size_t i = axis + 1; i < shape.size(); ++i) {
        s.inner *= shape[i];
    }
    return s;
}

inline Shape drop_axis(const Shape& shape, std::size_t axis) {
    Shape out;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i != axis) {
            out.push_back(shape[i]);
        }
    }
    if (out.empty()) {
        out.push_back(1);
    }
    return out;
}

/// A mask over a reduced axis is either shared by every outer row (length n)
/// or given per outer row (length outer*n).
inline std::vector<std::uint8_t> expand_mask(Mask mask, const AxisSplit& s, const char* op) {
    std::vector<std::uint8_t> full;
    if (mask.empty()) {
        return full;
    }
    if (mask.size() == s.n) {
        full.reserve(s.outer * s.n);
        for (std::size_t o = 0; o < s.outer; ++o) {
            full.insert(full.end(), mask.begin(), mask.end());
        }
    } else if (mask.size() == s.outer * s.n) {
        full.assign(mask.begin(), mask.end());
    } else {
        throw DimensionError(std::string(op) + ": mask length " + std::to_string(mask.size()) +
                             " matches neither axis length " + std::to_string(s.n) + " nor " +
                             std::to_string(s.outer * s.n));
    }
    return full;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError("add: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
    }
    std::vector<double> out(a.numel());
    const auto av = a.values();
    const auto bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = av[i] + bv[i];
    }
    return Tensor::from_op(a.shape(), std::move(out), {a, b}, [](detail::Node& o) {
        for (std::size_t p = 0; p < 2; ++p) {
            if (double* g = detail::parent_grad(o, p)) {
                for (std::size_t i = 0; i < o.grad.size(); ++i) {
                    g[i] += o.grad[i];
                }
            }
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError("mul: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
    }
    std::vector<double> out(a.numel());
    const auto av = a.values();
    const auto bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = av[i] * bv[i];
    }
    return Tensor::from_op(a.shape(), std::move(out), {a, b}, [](detail::Node& o) {
        const auto& av = o.parents[0]->value;
        const auto& bv = o.parents[1]->value;
        if (double* g = detail::parent_grad(o, 0)) {
            for (std::size_t i = 0; i < o.grad.size(); ++i) {
                g[i] += o.grad[i] * bv[i];
            }
        }
        if (double* g = detail::parent_grad(o, 1)) {
            for (std::size_t i = 0; i < o.grad.size(); ++i) {
                g[i] += o.grad[i] * av[i];
            }
        }
    });
}

inline Tensor scale(const Tensor& x, double c) {
    std::vector<double> out(x.values().begin(), x.values().end());
    for (auto& v : out) {
        v *= c;
    }
    return Tensor::from_op(x.shape(), std::move(out), {x}, [c](detail::Node& o) {
        if (double* g = detail::parent_grad(o, 0)) {
            for (std::size_t i = 0; i < o.grad.size(); ++i) {
                g[i] += c * o.grad[i];
            }
        }
    });
}

inline Tensor neg(const Tensor& x) { return scale(x, -1.0); }

inline Tensor sum(const Tensor& x) {
    const auto xv = x.values();
    const double s = std::accumulate(xv.begin(), xv.end(), 0.0);
    return Tensor::from_op({1}, {s}, {x}, [](detail::Node& o) {
        if (double* g = detail::parent_grad(o, 0)) {
            const auto n = o.parents[0]->value.size();
            for (std::size_t i = 0; i < n; ++i) {
                g[i] += o.grad[0];
            }
        }
    });
}

/// Gaussian error linear unit, exact erf form.
inline Tensor gelu(const Tensor& x) {
    std::vector<double> out(x.numel());
    const auto xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * detail::kInvSqrt2));
    }
    return Tensor::from_op(x.shape(), std::move(out), {x}, [](detail::Node& o) {
        if (double* g = detail::parent_grad(o, 0)) {
            const auto& xv = o.parents[0]->value;
            constexpr double inv_sqrt_2pi = 0.3989422804014327;
            for (std::size_t i = 0; i < o.grad.size(); ++i) {
                const double cdf = 0.5 * (1.0 + std::erf(xv[i] * detail::kInvSqrt2));
                const double pdf = inv_sqrt_2pi * std::exp(-0.5 * xv[i] * xv[i]);
                g[i] += o.grad[i] * (cdf + xv[i] * pdf);
            }
        }
    });
}

/// Inverted dropout. Identity when `training` is false or p == 0.
inline Tensor dropout(const Tensor& x, double p, Rng& rng, bool training) {
    if (!training || p <= 0.0) {
        return x;
    }
    if (p >= 1.0) {
        throw ContractError("dropout probability must be < 1");
    }
    const double keep_scale = 1.0 / (1.0 - p);
    auto keep = std::make_shared<std::vector<double>>(x.numel());
    std::vector<double> out(x.numel());
    const auto xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        (*keep)[i] = rng.uniform() < p ? 0.0 : keep_scale;
        out[i] = xv[i] * (*keep)[i];
    }
    return Tensor::from_op(x.shape(), std::move(out), {x}, [keep](detail::Node& o) {
        if (double* g = detail::parent_grad(o, 0)) {
            for (std::size_t i = 0; i < o.grad.size(); ++i) {
                g[i] += o.grad[i] * (*keep)[i];
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    std::vector<double> out(x.values().begin(), x.values().end());
    return Tensor::from_op(std::move(shape), std::move(out), {x}, [](detail::Node& o) {
        if (double* g = detail::parent_grad(o, 0)) {
            for (std::size_t i = 0; i < o.grad.size(); ++i) {
                g[i] += o.grad[i];
            }
        }
    });
}

/// Picks index `index` along `axis`, removing that axis.
inline Tensor select(const Tensor& x, std::size_t axis, std::size_t index) {
    const auto s = detail::split_axis(x.shape(), axis, "select");
    if (index >= s.n) {
        throw DimensionError("select: index " + std::to_string(index) + " out of range for axis of length " +
                             std::to_string(s.n));
    }
    std::vector<double> out(s.outer * s.inner);
    const auto xv = x.values();
    for (std::size_t o = 0; o < s.outer; ++o) {
        std::copy_n(xv.data() + (o * s.n + index) * s.inner, s.inner, out.data() + o * s.inner);
    }
    return Tensor::from_op(detail::drop_axis(x.shape(), axis), std::move(out), {x}, [s, index](detail::Node& o) {
        if (double* g = detail::parent_grad(o, 0)) {
            for (std::size_t r = 0; r < s.outer; ++r) {
                double* dst = g + (r * s.n + index) * s.inner;
                const double* src = o.grad.data() + r * s.inner;
                for (std::size_t i = 0; i < s.inner; ++i) {
                    dst[i] += src[i];
                }
            }
        }
    });
}

/// Stacks equally shaped tensors along a new axis inserted at `axis`.
inline Tensor stack(const std::vector<Tensor>& xs, std::size_t axis) {
    if (xs.empty()) {
        throw DimensionError("stack: no inputs");
    }
    const Shape& base = xs.front().shape();
    if (axis > base.size()) {
        throw DimensionError("stack: axis " + std::to_string(axis) + " invalid for shape " + shape_str(base));
    }
    for (const auto& t : xs) {
        if (t.shape() != base) {
            throw DimensionError("stack: shapes " + shape_str(base) + " and " + shape_str(t.shape()) + " differ");
        }
    }
    std::size_t outer = 1;
    for (std::size_t i = 0; i < axis; ++i) {
        outer *= base[i];
    }
    const std::size_t inner = shape_numel(base) / outer;
    const std::size_t count = xs.size();
    Shape shape = base;
    shape.insert(shape.begin() + static_cast<std::ptrdiff_t>(axis), count);
    std::vector<double> out(outer * count * inner);
    for (std::size_t t = 0; t < count; ++t) {
        const auto xv = xs[t].values();
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(xv.data() + o * inner, inner, out.data() + (o * count + t) * inner);
        }
    }
    return Tensor::from_op(std::move(shape), std::move(out), xs, [outer, inner, count](detail::Node& o) {
        for (std::size_t t = 0; t < count; ++t) {
            if (double* g = detail::parent_grad(o, t)) {
                for (std::size_t r = 0; r < outer; ++r) {
                    const double* src = o.grad.data() + (r * count + t) * inner;
                    double* dst = g + r * inner;
                    for (std::size_t i = 0; i < inner; ++i) {
                        dst[i] += src[i];
                    }
                }
            }
        }
    });
}

/// Rows of a 2-D table addressed by `rows`: result is [rows.size() x cols].
inline Tensor gather_rows(const Tensor& table, std::span<const std::size_t> rows) {
    if (table.rank() != 2) {
        throw DimensionError("gather_rows: table must be 2-D, got " + shape_str(table.shape()));
    }
    if (rows.empty()) {
        throw DimensionError("gather_rows: no rows requested");
    }
    const std::size_t n_rows = table.dim(0);
    const std::size_t cols = table.dim(1);
    std::vector<double> out(rows.size() * cols);
    const auto tv = table.values();
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] >= n_rows) {
            throw VocabularyError("gather_rows: row " + std::to_string(rows[r]) + " out of range for table with " +
                                  std::to_string(n_rows) + " rows");
        }
        std::copy_n(tv.data() + rows[r] * cols, cols, out.data() + r * cols);
    }
    auto idx = std::make_shared<std::vector<std::size_t>>(rows.begin(), rows.end());
    return Tensor::from_op({rows.size(), cols}, std::move(out), {table}, [idx, cols](detail::Node& o) {
        if (double* g = detail::parent_grad(o, 0)) {
            for (std::size_t r = 0; r < idx->size(); ++r) {
                double* dst = g + (*idx)[r] * cols;
                const double* src = o.grad.data() + r * cols;
                for (std::size_t c = 0; c < cols; ++c) {
                    dst[c] += src[c];
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Linear algebra

namespace detail {

// One BLAS thread per caller keeps results reproducible and lets grid
// workers run side by side.
inline void blas_single_thread() {
    static std::once_flag once;
    std::call_once(once, [] { openblas_set_num_threads(1); });
}

// c[m x n] += a[m x k] * b[k x n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    blas_single_thread();
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
                static_cast<int>(k), 1.0, a, static_cast<int>(k), b, static_cast<int>(n), 1.0, c,
                static_cast<int>(n));
}

// c[m x k] += a[m x n] * b[k x n]^T
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k) {
    blas_single_thread();
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, static_cast<int>(m), static_cast<int>(k),
                static_cast<int>(n), 1.0, a, static_cast<int>(n), b, static_cast<int>(n), 1.0, c,
                static_cast<int>(k));
}

// c[k x n] += a[m x k]^T * b[m x n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    blas_single_thread();
    cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, static_cast<int>(k), static_cast<int>(n),
                static_cast<int>(m), 1.0, a, static_cast<int>(k), b, static_cast<int>(n), 1.0, c,
                static_cast<int>(n));
}

} // namespace detail

/// Matrix product of [m x k] and [k x n].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0);
    const std::size_t k = a.dim(1);
    const std::size_t n = b.dim(1);
    std::vector<double> out(m * n, 0.0);
    detail::gemm_nn(a.values().data(), b.values().data(), out.data(), m, k, n);
    return Tensor::from_op({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& o) {
        const double* av = o.parents[0]->value.data();
        const double* bv = o.parents[1]->value.data();
        if (double* g = detail::parent_grad(o, 0)) {
            detail::gemm_nt(o.grad.data(), bv, g, m, n, k);
        }
        if (double* g = detail::parent_grad(o, 1)) {
            detail::gemm_tn(av, o.grad.data(), g, m, k, n);
        }
    });
}

/// x[N x in] * w[in x out] + bias[out].
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
    if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(0)) {
        throw DimensionError("linear: incompatible shapes " + shape_str(x.shape()) + " and " + shape_str(w.shape()));
    }
    const std::size_t m = x.dim(0);
    const std::size_t k = x.dim(1);
    const std::size_t n = w.dim(1);
    if (bias.numel() != n) {
        throw DimensionError("linear: bias " + shape_str(bias.shape()) + " does not match output width " +
                             std::to_string(n));
    }
    std::vector<double> out(m * n);
    const auto bv = bias.values();
    for (std::size_t i = 0; i < m; ++i) {
        std::copy(bv.begin(), bv.end(), out.begin() + static_cast<std::ptrdiff_t>(i * n));
    }
    detail::gemm_nn(x.values().data(), w.values().data(), out.data(), m, k, n);
    return Tensor::from_op({m, n}, std::move(out), {x, w, bias}, [m, k, n](detail::Node& o) {
        const double* xv = o.parents[0]->value.data();
        const double* wv = o.parents[1]->value.data();
        if (double* g = detail::parent_grad(o, 0)) {
            detail::gemm_nt(o.grad.data(), wv, g, m, n, k);
        }
        if (double* g = detail::parent_grad(o, 1)) {
            detail::gemm_tn(xv, o.grad.data(), g, m, k, n);
        }
        if (double* g = detail::parent_grad(o, 2)) {
            for (std::size_t i = 0; i < m; ++i) {
                const double* src = o.grad.data() + i * n;
                for (std::size_t j = 0; j < n; ++j) {
                    g[j] += src[j];
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Normalization

/// Numerically stable softmax along `axis`.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
    const auto s = detail::split_axis(x.shape(), axis, "softmax");
    std::vector<double> out(x.numel());
    const auto xv = x.values();
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t base = o * s.n * s.inner + i;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t t = 0; t < s.n; ++t) {
                mx = std::max(mx, xv[base + t * s.inner]);
            }
            double z = 0.0;
            for (std::size_t t = 0; t < s.n; ++t) {
                const double e = std::exp(xv[base + t * s.inner] - mx);
                out[base + t * s.inner] = e;
                z += e;
            }
            for (std::size_t t = 0; t < s.n; ++t) {
                out[base + t * s.inner] /= z;
            }
        }
    }
    return Tensor::from_op(x.shape(), std::move(out), {x}, [s](detail::Node& o) {
        if (double* g = detail::parent_grad(o, 0)) {
            const auto& y = o.value;
            for (std::size_t r = 0; r < s.outer; ++r) {
                for (std::size_t i = 0; i < s.inner; ++i) {
                    const std::size_t base = r * s.n * s.inner + i;
                    double dot = 0.0;
                    for (std::size_t t = 0; t < s.n; ++t) {
                        dot += o.grad[base + t * s.inner] * y[base + t * s.inner];
                    }
                    for (std::size_t t = 0; t < s.n; ++t) {
                        const std::size_t k = base + t * s.inner;
                        g[k] += y[k] * (o.grad[k] - dot);
                    }
                }
            }
        }
    });
}

/// Normalizes over the last dimension, then applies gamma * x + beta.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-12) {
    const std::size_t h = x.shape().back();
    if (gamma.numel() != h || beta.numel() != h) {
        throw DimensionError("layer_norm: last dimension " + std::to_string(h) + " does not match gamma " +
                             shape_str(gamma.shape()) + " / beta " + shape_str(beta.shape()));
    }
    const std::size_t rows = x.numel() / h;
    std::vector<double> out(x.numel());
    auto normed = std::make_shared<std::vector<double>>(x.numel());
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    const auto xv = x.values();
    const auto gv = gamma.values();
    const auto bv = beta.values();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = xv.data() + r * h;
        double mean = 0.0;
        for (std::size_t j = 0; j < h; ++j) {
            mean += row[j];
        }
        mean /= static_cast<double>(h);
        double var = 0.0;
        for (std::size_t j = 0; j < h; ++j) {
            const double d = row[j] - mean;
            var += d * d;
        }
        var /= static_cast<double>(h);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (std::size_t j = 0; j < h; ++j) {
            const double n = (row[j] - mean) * is;
            (*normed)[r * h + j] = n;
            out[r * h + j] = n * gv[j] + bv[j];
        }
    }
    return Tensor::from_op(x.shape(), std::move(out), {x, gamma, beta}, [normed, inv_std, rows, h](detail::Node& o) {
        const auto& gv = o.parents[1]->value;
        if (double* g = detail::parent_grad(o, 1)) {
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t j = 0; j < h; ++j) {
                    g[j] += o.grad[r * h + j] * (*normed)[r * h + j];
                }
            }
        }
        if (double* g = detail::parent_grad(o, 2)) {
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t j = 0; j < h; ++j) {
                    g[j] += o.grad[r * h + j];
                }
            }
        }
        if (double* g = detail::parent_grad(o, 0)) {
            const double inv_h = 1.0 / static_cast<double>(h);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* dy = o.grad.data() + r * h;
                const double* nr = normed->data() + r * h;
                double mean_dn = 0.0;
                double mean_dn_n = 0.0;
                for (std::size_t j = 0; j < h; ++j) {
                    const double dn = dy[j] * gv[j];
                    mean_dn += dn;
                    mean_dn_n += dn * nr[j];
                }
                mean_dn *= inv_h;
                mean_dn_n *= inv_h;
                for (std::size_t j = 0; j < h; ++j) {
                    g[r * h + j] += (*inv_std)[r] * (dy[j] * gv[j] - mean_dn - nr[j] * mean_dn_n);
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Reductions

/// Maximum along `axis` over positions where `mask` is set (all positions when
/// the mask is empty). Ties route the subgradient to the first maximal position.
inline Tensor max_reduce(const Tensor& x, std::size_t axis, Mask mask = {}) {
    const auto s = detail::split_axis(x.shape(), axis, "max_reduce");
    const auto full = detail::expand_mask(mask, s, "max_reduce");
    std::vector<double> out(s.outer * s.inner);
    auto argmax = std::make_shared<std::vector<std::size_t>>(s.outer * s.inner);
    const auto xv = x.values();
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
            double best = -std::numeric_limits<double>::infinity();
            std::size_t best_t = s.n;
            for (std::size_t t = 0; t < s.n; ++t) {
                if (!full.empty() && !full[o * s.n + t]) {
                    continue;
                }
                const double v = xv[(o * s.n + t) * s.inner + i];
                if (best_t == s.n || v > best) {
                    best = v;
                    best_t = t;
                }
            }
            if (best_t == s.n) {
                throw InvalidMaskError("max_reduce: mask excludes every position of row " + std::to_string(o));
            }
            out[o * s.inner + i] = best;
            (*argmax)[o * s.inner + i] = (o * s.n + best_t) * s.inner + i;
        }
    }
    return Tensor::from_op(detail::drop_axis(x.shape(), axis), std::move(out), {x}, [argmax](detail::Node& o) {
        if (double* g = detail::parent_grad(o, 0)) {
            for (std::size_t k = 0; k < o.grad.size(); ++k) {
                g[(*argmax)[k]] += o.grad[k];
            }
        }
    });
}

/// Minimum along `axis`, expressed through max_reduce on the negation.
inline Tensor min_reduce(const Tensor& x, std::size_t axis, Mask mask = {}) {
    return neg(max_reduce(neg(x), axis, mask));
}

/// Sum over `axis` of weights[t] * x[..., t, ...]. Masked-out positions
/// contribute zero; the remaining weights are not renormalized.
inline Tensor weighted_reduce(const Tensor& x, const Tensor& weights, std::size_t axis, Mask mask = {}) {
    const auto s = detail::split_axis(x.shape(), axis, "weighted_reduce");
    if (weights.numel() != s.n) {
        throw DimensionError("weighted_reduce: " + std::to_string(weights.numel()) +
                             " weights for axis of length " + std::to_string(s.n));
    }
    auto full = std::make_shared<std::vector<std::uint8_t>>(detail::expand_mask(mask, s, "weighted_reduce"));
    std::vector<double> out(s.outer * s.inner, 0.0);
    const auto xv = x.values();
    const auto wv = weights.values();
    for (std::size_t o = 0; o < s.outer; ++o) {
        double* dst = out.data() + o * s.inner;
        for (std::size_t t = 0; t < s.n; ++t) {
            if (!full->empty() && !(*full)[o * s.n + t]) {
                continue;
            }
            const double w = wv[t];
            const double* src = xv.data() + (o * s.n + t) * s.inner;
            for (std::size_t i = 0; i < s.inner; ++i) {
                dst[i] += w * src[i];
            }
        }
    }
    return Tensor::from_op(detail::drop_axis(x.shape(), axis), std::move(out), {x, weights}, [s, full](detail::Node& o) {
        const auto& xv = o.parents[0]->value;
        const auto& wv = o.parents[1]->value;
        double* gx = detail::parent_grad(o, 0);
        double* gw = detail::parent_grad(o, 1);
        for (std::size_t r = 0; r < s.outer; ++r) {
            const double* dy = o.grad.data() + r * s.inner;
            for (std::size_t t = 0; t < s.n; ++t) {
                if (!full->empty() && !(*full)[r * s.n + t]) {
                    continue;
                }
                const std::size_t base = (r * s.n + t) * s.inner;
                if (gx) {
                    for (std::size_t i = 0; i < s.inner; ++i) {
                        gx[base + i] += wv[t] * dy[i];
                    }
                }
                if (gw) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < s.inner; ++i) {
                        acc += xv[base + i] * dy[i];
                    }
                    gw[t] += acc;
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Losses and attention

/// Mean cross-entropy of logits [N x C] against integer labels.
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
    if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
        throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) + " for " +
                             std::to_string(labels.size()) + " labels");
    }
    const std::size_t n = logits.dim(0);
    const std::size_t c = logits.dim(1);
    auto probs = std::make_shared<std::vector<double>>(n * c);
    auto lab = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
    const auto lv = logits.values();
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const int y = labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= c) {
            throw ContractError("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(c) + ")");
        }
        const double* row = lv.data() + i * c;
        const double mx = *std::max_element(row, row + c);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            z += std::exp(row[j] - mx);
        }
        const double log_z = mx + std::log(z);
        for (std::size_t j = 0; j < c; ++j) {
            (*probs)[i * c + j] = std::exp(row[j] - log_z);
        }
        loss += log_z - row[y];
    }
    loss /= static_cast<double>(n);
    return Tensor::from_op({1}, {loss}, {logits}, [probs, lab, n, c](detail::Node& o) {
        if (double* g = detail::parent_grad(o, 0)) {
            const double scale = o.grad[0] / static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < c; ++j) {
                    const double target = static_cast<int>(j) == (*lab)[i] ? 1.0 : 0.0;
                    g[i * c + j] += scale * ((*probs)[i * c + j] - target);
                }
            }
        }
    });
}

/// Scaled dot-product self-attention over packed projections.
///
/// `qkv` is [batch*seq x 3H] holding the query, key and value projections side
/// by side; heads are contiguous column blocks of width H/heads. `key_mask`
/// (batch*seq) marks positions that may be attended to; every query position,
/// masked or not, still produces an output. Returns [batch*seq x H].
inline Tensor multi_head_attention(const Tensor& qkv, Mask key_mask, std::size_t batch, std::size_t seq,
                                   std::size_t heads) {
    if (qkv.rank() != 2 || qkv.dim(0) != batch * seq || qkv.dim(1) % (3 * heads) != 0) {
        throw DimensionError("multi_head_attention: qkv " + shape_str(qkv.shape()) + " incompatible with batch " +
                             std::to_string(batch) + ", seq " + std::to_string(seq) + ", heads " +
                             std::to_string(heads));
    }
    if (key_mask.size() != batch * seq) {
        throw DimensionError("multi_head_attention: key mask length " + std::to_string(key_mask.size()) +
                             " != " + std::to_string(batch * seq));
    }
    const std::size_t h = qkv.dim(1) / 3;
    const std::size_t d = h / heads;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    const std::size_t row = 3 * h;
    // Keys past the last attendable position of a sequence are skipped.
    auto key_end = std::make_shared<std::vector<std::size_t>>(batch, 0);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t j = 0; j < seq; ++j) {
            if (key_mask[b * seq + j]) {
                (*key_end)[b] = j + 1;
            }
        }
        if ((*key_end)[b] == 0) {
            throw InvalidMaskError("multi_head_attention: sequence " + std::to_string(b) + " has no attendable key");
        }
    }
    auto probs = std::make_shared<std::vector<double>>(batch * heads * seq * seq, 0.0);
    auto mask = std::make_shared<std::vector<std::uint8_t>>(key_mask.begin(), key_mask.end());
    std::vector<double> out(batch * seq * h, 0.0);
    const double* qv = qkv.values().data();
    const int S = static_cast<int>(seq), D = static_cast<int>(d), ld_qkv = static_cast<int>(row),
              ld_out = static_cast<int>(h);
    detail::blas_single_thread();
    for (std::size_t b = 0; b < batch; ++b) {
        const std::uint8_t* km = mask->data() + b * seq;
        const std::size_t n = (*key_end)[b];
        const int N = static_cast<int>(n);
        for (std::size_t a = 0; a < heads; ++a) {
            double* p = probs->data() + (b * heads + a) * seq * seq;
            const double* q = qv + b * seq * row + a * d;
            const double* k = q + h;
            const double* v = q + 2 * h;
            // scores[i, j] = q_i . k_j / sqrt(d), stored with row stride seq
            cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, S, N, D, inv_sqrt_d, q, ld_qkv, k, ld_qkv, 0.0, p,
                        S);
            for (std::size_t i = 0; i < seq; ++i) {
                double* pr = p + i * seq;
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < n; ++j) {
                    if (km[j]) {
                        mx = std::max(mx, pr[j]);
                    }
                }
                double z = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    pr[j] = km[j] ? std::exp(pr[j] - mx) : 0.0;
                    z += pr[j];
                }
                for (std::size_t j = 0; j < n; ++j) {
                    pr[j] /= z;
                }
            }
            cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, S, D, N, 1.0, p, S, v, ld_qkv, 0.0,
                        out.data() + b * seq * h + a * d, ld_out);
        }
    }
    return Tensor::from_op({batch * seq, h}, std::move(out), {qkv},
                           [probs, key_end, batch, seq, heads, h, d, inv_sqrt_d, row](detail::Node& o) {
        double* g = detail::parent_grad(o, 0);
        if (!g) {
            return;
        }
        detail::blas_single_thread();
        const double* qv = o.parents[0]->value.data();
        const int S = static_cast<int>(seq), D = static_cast<int>(d), ld_qkv = static_cast<int>(row),
                  ld_out = static_cast<int>(h);
        std::vector<double> ds(seq * seq);
        for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t n = (*key_end)[b];
            const int N = static_cast<int>(n);
            for (std::size_t a = 0; a < heads; ++a) {
                const double* p = probs->data() + (b * heads + a) * seq * seq;
                const std::size_t off = b * seq * row + a * d;
                const double* q = qv + off;
                const double* k = q + h;
                const double* v = q + 2 * h;
                double* gq = g + off;
                double* gk = gq + h;
                double* gv = gq + 2 * h;
                const double* dctx = o.grad.data() + b * seq * h + a * d;
                // dV += P^T dctx
                cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, N, D, S, 1.0, p, S, dctx, ld_out, 1.0, gv,
                            ld_qkv);
                // dP = dctx V^T, then the softmax Jacobian
                cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, S, N, D, 1.0, dctx, ld_out, v, ld_qkv, 0.0,
                            ds.data(), S);
                for (std::size_t i = 0; i < seq; ++i) {
                    const double* pr = p + i * seq;
                    double* dr = ds.data() + i * seq;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        dot += pr[j] * dr[j];
                    }
                    for (std::size_t j = 0; j < n; ++j) {
                        dr[j] = pr[j] * (dr[j] - dot) * inv_sqrt_d;
                    }
                }
                // dQ += dS K, dK += dS^T Q
                cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, S, D, N, 1.0, ds.data(), S, k, ld_qkv, 1.0,
                            gq, ld_qkv);
                cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, N, D, S, 1.0, ds.data(), S, q, ld_qkv, 1.0, gk,
                            ld_qkv);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Backward pass

/// Back-propagates from a scalar loss into every reachable tensor that
/// requires a gradient. Leaf gradients are added to; the caller must
/// zero_grad() them between passes.
inline void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw ContractError("backward: loss must be a scalar, got shape " +
                            (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    }
    if (!loss.requires_grad()) {
        return;
    }
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack{{loss.node().get(), 0}};
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            detail::Node* p = node->parents[next++].get();
            if (p && p->requires_grad && seen.insert(p).second) {
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    for (detail::Node* n : order) {
        if (n->leaf && n->grad_pending) {
            throw ContractError("backward: a parameter gradient was not zeroed since the previous backward pass");
        }
    }
    for (detail::Node* n : order) {
        if (!n->leaf) {
            n->grad.assign(n->value.size(), 0.0);
        } else {
            n->ensure_grad();
        }
    }
    loss.node()->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* n = *it;
        if (!n->leaf && n->backward) {
            n->backward(*n);
        }
    }
    for (detail::Node* n : order) {
        if (n->leaf) {
            n->grad_pending = true;
        }
    }
}

// ---------------------------------------------------------------------------
// Parameters and optimization

struct Parameter {
    std::string name;
    Tensor tensor;
};

/// Ordered collection of uniquely named trainable tensors.
class ParameterSet {
public:
    void add(std::string name, Tensor tensor) {
        if (index_.contains(name)) {
            throw ContractError("duplicate parameter name '" + name + "'");
        }
        if (!tensor.requires_grad() || !tensor.is_leaf()) {
            throw ContractError("parameter '" + name + "' must be a leaf tensor requiring grad");
        }
        index_.emplace(name, params_.size());
        params_.push_back({std::move(name), std::move(tensor)});
    }

    void extend(const ParameterSet& other) {
        for (const auto& p : other) {
            add(p.name, p.tensor);
        }
    }

    std::size_t size() const { return params_.size(); }
    bool empty() const { return params_.empty(); }
    bool contains(const std::string& name) const { return index_.contains(name); }

    const Tensor& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) {
            throw ContractError("no parameter named '" + name + "'");
        }
        return params_[it->second].tensor;
    }
    Tensor& at(const std::string& name) {
        return const_cast<Tensor&>(static_cast<const ParameterSet&>(*this).at(name));
    }

    const Parameter& operator[](std::size_t i) const { return params_[i]; }
    Parameter& operator[](std::size_t i) { return params_[i]; }
    std::vector<Parameter>::const_iterator begin() const { return params_.begin(); }
    std::vector<Parameter>::const_iterator end() const { return params_.end(); }
    std::vector<Parameter>::iterator begin() { return params_.begin(); }
    std::vector<Parameter>::iterator end() { return params_.end(); }

    std::size_t total_elements() const {
        std::size_t n = 0;
        for (const auto& p : params_) {
            n += p.tensor.numel();
        }
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) {
            p.tensor.zero_grad();
        }
    }

    std::vector<std::vector<double>> snapshot() const {
        std::vector<std::vector<double>> out;
        out.reserve(params_.size());
        for (const auto& p : params_) {
            out.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
        }
        return out;
    }

    void restore(const std::vector<std::vector<double>>& values) {
        if (values.size() != params_.size()) {
            throw ContractError("restore: snapshot has " + std::to_string(values.size()) + " entries, expected " +
                                std::to_string(params_.size()));
        }
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto dst = params_[i].tensor.mutable_values();
            if (values[i].size() != dst.size()) {
                throw ContractError("restore: size mismatch for '" + params_[i].name + "'");
            }
            std::copy(values[i].begin(), values[i].end(), dst.begin());
        }
    }

private:
    std::vector<Parameter> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

struct AdamOptions {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::size_t step = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
};

/// One bias-corrected Adam update of every parameter from its current
/// gradient. Parameters that received no gradient are treated as having a
/// zero gradient. An empty state is initialized on first use.
inline void adam_step(ParameterSet& params, AdamState& state, const AdamOptions& opt) {
    if (state.step == 0 && state.m.empty() && state.v.empty()) {
        for (const auto& p : params) {
            state.m.emplace_back(p.tensor.numel(), 0.0);
            state.v.emplace_back(p.tensor.numel(), 0.0);
        }
    }
    if (state.m.size() != params.size() || state.v.size() != params.size()) {
        throw ContractError("adam_step: optimizer state holds " + std::to_string(state.m.size()) +
                            " entries for " + std::to_string(params.size()) + " parameters");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (state.m[i].size() != params[i].tensor.numel() || state.v[i].size() != params[i].tensor.numel()) {
            throw ContractError("adam_step: state misaligned with parameter '" + params[i].name + "'");
        }
    }
    state.step += 1;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(opt.beta1, t);
    const double c2 = 1.0 - std::pow(opt.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& w = params[i].tensor;
        auto wv = w.mutable_values();
        const auto g = w.grad();
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t k = 0; k < wv.size(); ++k) {
            const double gk = g.empty() ? 0.0 : g[k];
            m[k] = opt.beta1 * m[k] + (1.0 - opt.beta1) * gk;
            v[k] = opt.beta2 * v[k] + (1.0 - opt.beta2) * gk * gk;
            const double mhat = m[k] / c1;
            const double vhat = v[k] / c2;
            wv[k] -= opt.lr * mhat / (std::sqrt(vhat) + opt.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Gradient checking

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::string worst_parameter;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    std::size_t checked = 0;
    std::size_t kinks = 0; ///< elements skipped because a max switched inside the step
};

/// Compares backward() gradients of `loss_fn` against central differences for
/// every element of every parameter. The relative error of one element is
/// |analytic - numeric| / max(|analytic|, |numeric|, floor), so gradients
/// near zero are compared in absolute terms. `loss_fn` must be deterministic
/// (dropout disabled); nondeterminism is not detected. Parameter values are
/// restored exactly and gradients are left zeroed.
///
/// A max that switches inside the step spoils the central difference, so the
/// step is shrunk by 10 up to three times and the best agreement is kept.
/// Elements that never agree to 1e-6 and whose forward and backward slopes
/// disagree by more than 1e-3 (same relative measure) at every step are
/// counted in `kinks` and left out of the maximum.
inline GradCheckResult finite_difference_check(const std::function<Tensor()>& loss_fn, ParameterSet& params,
                                               double eps = 1e-5, double floor = 1e-4) {
    params.zero_grad();
    {
        Tensor loss = loss_fn();
        backward(loss);
    }
    std::vector<std::vector<double>> analytic;
    for (const auto& p : params) {
        const auto g = p.tensor.grad();
        analytic.emplace_back(p.tensor.numel(), 0.0);
        if (!g.empty()) {
            std::copy(g.begin(), g.end(), analytic.back().begin());
        }
    }
    params.zero_grad();

    GradCheckResult result;
    NoGradGuard no_grad;
    const double base = loss_fn().item();
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto values = params[i].tensor.mutable_values();
        for (std::size_t k = 0; k < values.size(); ++k) {
            const double original = values[k];
            const double a = analytic[i][k];
            double numeric = 0.0;
            double err = std::numeric_limits<double>::infinity();
            bool smooth = false;
            for (double h = eps; h >= eps * 1e-3 && err > 1e-6; h *= 0.1) {
                values[k] = original + h;
                const double up = loss_fn().item();
                values[k] = original - h;
                const double down = loss_fn().item();
                values[k] = original;
                const double c = (up - down) / (2.0 * h);
                const double denom = std::max({std::abs(a), std::abs(c), floor});
                const double fwd = (up - base) / h;
                const double bwd = (base - down) / h;
                smooth = smooth || std::abs(fwd - bwd) / denom <= 1e-3;
                if (std::abs(a - c) / denom < err) {
                    err = std::abs(a - c) / denom;
                    numeric = c;
                }
            }
            ++result.checked;
            if (!smooth && err > 1e-6) {
                ++result.kinks;
                continue;
            }
            if (err > result.max_relative_error) {
                result.max_relative_error = err;
                result.worst_parameter = params[i].name;
                result.worst_index = k;
                result.analytic = a;
                result.numeric = numeric;
            }
        }
    }
    return result;
}

} // namespace earlybird

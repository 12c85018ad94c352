#pragma once

// Dense n-dimensional double tensors with reverse-mode automatic
// differentiation through an explicit computation tape.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace tfm {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream oss;
    oss << "(";
    for (std::size_t i = 0; i < s.size(); ++i) oss << (i ? "," : "") << s[i];
    oss << ")";
    return oss.str();
}

class TensorError : public std::runtime_error {
public:
    explicit TensorError(const std::string& msg) : std::runtime_error(msg) {}
};

// High-water mark of the largest single buffer allocated, in elements.
// Used by tests to assert that linear-complexity paths never materialize
// quadratic intermediates.
struct AllocStats {
    static std::size_t& max_elems() {
        static std::size_t v = 0;
        return v;
    }
    static void reset() { max_elems() = 0; }
    static void note(std::size_t n) {
        if (n > max_elems()) max_elems() = n;
    }
};

class Tape;

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;   // empty until first accumulation
    Tape* producer = nullptr;   // tape that recorded this tensor, null for leaves

    std::vector<double>& ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
        return grad;
    }
};

class Tensor {
public:
    Tensor() : impl_(std::make_shared<TensorImpl>()) {}

    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
        : impl_(std::make_shared<TensorImpl>()) {
        if (numel(shape) != data.size())
            throw TensorError("tensor data length " + std::to_string(data.size()) +
                              " does not match shape " + shape_str(shape));
        AllocStats::note(data.size());
        impl_->shape = std::move(shape);
        impl_->data = std::move(data);
        impl_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::size_t n = numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }

    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        std::size_t n = numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
    }

    static Tensor scalar(double value, bool requires_grad = false) {
        return Tensor({1}, {value}, requires_grad);
    }

    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t size() const { return impl_->data.size(); }
    std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }

    std::vector<double>& data() { return impl_->data; }
    const std::vector<double>& data() const { return impl_->data; }
    double& at(std::size_t i) { return impl_->data[i]; }
    double at(std::size_t i) const { return impl_->data[i]; }
    double item() const {
        if (size() != 1) throw TensorError("item() on non-scalar tensor " + shape_str(shape()));
        return impl_->data[0];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool v) { impl_->requires_grad = v; }
    const std::vector<double>& grad() const { return impl_->grad; }
    // grad mutators are const: the handle is shared and grads live on the
    // implementation, like the data itself
    std::vector<double>& ensure_grad() const { return impl_->ensure_grad(); }
    void zero_grad() const { impl_->grad.clear(); }

    std::shared_ptr<TensorImpl> impl() const { return impl_; }

    bool all_finite() const {
        for (double v : impl_->data)
            if (!std::isfinite(v)) return false;
        return true;
    }

private:
    std::shared_ptr<TensorImpl> impl_;
};

// Ordered record of executed operations. Backward replays the record in
// reverse, visiting each node exactly once; execution order is the
// topological order. A tape belongs to one logical training context.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // RAII activation scope; ops record on the innermost active tape.
    class Scope {
    public:
        explicit Scope(Tape& t) : prev_(active_ptr()) { active_ptr() = &t; }
        ~Scope() { active_ptr() = prev_; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Tape* prev_;
    };

    static Tape* active() { return active_ptr(); }
    static Tape* exchange_active(Tape* t) {
        Tape* prev = active_ptr();
        active_ptr() = t;
        return prev;
    }

    void record(Tensor out, std::function<void()> backward_fn) {
        out.impl()->producer = this;
        nodes_.push_back({std::move(out), std::move(backward_fn)});
    }

    std::size_t node_count() const { return nodes_.size(); }

    // Populates grad on every requires_grad tensor reachable from loss.
    // Grads accumulate across calls until zero_grad on the leaves.
    void backward(const Tensor& loss) {
        if (loss.size() != 1)
            throw TensorError("backward: loss must be scalar, got " + shape_str(loss.shape()));
        if (loss.impl()->producer != this)
            throw TensorError("backward: loss was not produced through this tape");
        loss.impl()->ensure_grad()[0] += 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            if (!it->out.impl()->grad.empty()) it->backward_fn();
        }
    }

    void clear() { nodes_.clear(); }

private:
    struct Node {
        Tensor out;
        std::function<void()> backward_fn;
    };

    static Tape*& active_ptr() {
        thread_local Tape* p = nullptr;
        return p;
    }

    std::vector<Node> nodes_;
};

// Suspends recording within a scope (forward-only evaluation).
class NoGrad {
public:
    NoGrad() : prev_(Tape::exchange_active(nullptr)) {}
    ~NoGrad() { Tape::exchange_active(prev_); }
    NoGrad(const NoGrad&) = delete;
    NoGrad& operator=(const NoGrad&) = delete;

private:
    Tape* prev_;
};

namespace detail {

inline bool should_record(std::initializer_list<const Tensor*> inputs) {
    if (!Tape::active()) return false;
    for (const Tensor* t : inputs)
        if ((*t).requires_grad() || (*t).impl()->producer == Tape::active()) return true;
    return false;
}

inline std::vector<std::size_t> row_major_strides(const Shape& s) {
    std::vector<std::size_t> st(s.size(), 1);
    for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}

// NumPy-style broadcast of two shapes, aligned at the trailing axes.
inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    Shape out(std::max(a.size(), b.size()));
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::size_t da = i < out.size() - a.size() ? 1 : a[i - (out.size() - a.size())];
        std::size_t db = i < out.size() - b.size() ? 1 : b[i - (out.size() - b.size())];
        if (da != db && da != 1 && db != 1)
            throw TensorError("broadcast mismatch between shapes " + shape_str(a) +
                              " and " + shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

// Strides of `s` viewed in a broadcast frame of rank `out_rank`; broadcast
// axes get stride 0.
inline std::vector<std::size_t> broadcast_strides(const Shape& s, const Shape& out) {
    auto st = row_major_strides(s);
    std::vector<std::size_t> r(out.size(), 0);
    std::size_t off = out.size() - s.size();
    for (std::size_t i = 0; i < s.size(); ++i)
        r[off + i] = (s[i] == 1 && out[off + i] != 1) ? 0 : st[i];
    return r;
}

}  // namespace detail

enum class EwKind { add, sub, mul, relu, exp, scale, gelu, sqrt, rsqrt };

inline EwKind ew_kind_from_string(const std::string& s) {
    if (s == "add") return EwKind::add;
    if (s == "sub") return EwKind::sub;
    if (s == "mul") return EwKind::mul;
    if (s == "relu") return EwKind::relu;
    if (s == "exp") return EwKind::exp;
    if (s == "scale") return EwKind::scale;
    if (s == "gelu") return EwKind::gelu;
    if (s == "sqrt") return EwKind::sqrt;
    if (s == "rsqrt") return EwKind::rsqrt;
    throw TensorError("unknown elementwise op kind '" + s + "'");
}

namespace detail {

// Iterates a broadcast binary op; fn(out_index, a_index, b_index).
template <typename Fn>
inline void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                               const std::vector<std::size_t>& sb, Fn&& fn) {
    std::size_t n = numel(out);
    std::vector<std::size_t> idx(out.size(), 0);
    std::size_t ia = 0, ib = 0;
    for (std::size_t i = 0; i < n; ++i) {
        fn(i, ia, ib);
        for (std::size_t d = out.size(); d-- > 0;) {
            idx[d]++;
            ia += sa[d];
            ib += sb[d];
            if (idx[d] < out[d]) break;
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

}  // namespace detail

inline Tensor binary_op(EwKind kind, const Tensor& a, const Tensor& b) {
    Shape os = detail::broadcast_shape(a.shape(), b.shape());
    auto sa = detail::broadcast_strides(a.shape(), os);
    auto sb = detail::broadcast_strides(b.shape(), os);
    Tensor out = Tensor::zeros(os);
    const auto& da = a.data();
    const auto& db = b.data();
    auto& dout = out.data();
    switch (kind) {
        case EwKind::add:
            detail::for_each_broadcast(os, sa, sb,
                [&](std::size_t o, std::size_t i, std::size_t j) { dout[o] = da[i] + db[j]; });
            break;
        case EwKind::sub:
            detail::for_each_broadcast(os, sa, sb,
                [&](std::size_t o, std::size_t i, std::size_t j) { dout[o] = da[i] - db[j]; });
            break;
        case EwKind::mul:
            detail::for_each_broadcast(os, sa, sb,
                [&](std::size_t o, std::size_t i, std::size_t j) { dout[o] = da[i] * db[j]; });
            break;
        default:
            throw TensorError("binary_op: op kind is not binary");
    }
    if (detail::should_record({&a, &b})) {
        Tape::active()->record(out, [kind, a, b, out, os, sa, sb]() {
            const auto& g = out.grad();
            auto acc_a = [&](std::size_t i, double v) { a.ensure_grad()[i] += v; };
            auto acc_b = [&](std::size_t j, double v) { b.ensure_grad()[j] += v; };
            switch (kind) {
                case EwKind::add:
                    detail::for_each_broadcast(os, sa, sb,
                        [&](std::size_t o, std::size_t i, std::size_t j) {
                            acc_a(i, g[o]);
                            acc_b(j, g[o]);
                        });
                    break;
                case EwKind::sub:
                    detail::for_each_broadcast(os, sa, sb,
                        [&](std::size_t o, std::size_t i, std::size_t j) {
                            acc_a(i, g[o]);
                            acc_b(j, -g[o]);
                        });
                    break;
                case EwKind::mul:
                    detail::for_each_broadcast(os, sa, sb,
                        [&](std::size_t o, std::size_t i, std::size_t j) {
                            acc_a(i, g[o] * b.data()[j]);
                            acc_b(j, g[o] * a.data()[i]);
                        });
                    break;
                default:
                    break;
            }
        });
    }
    return out;
}

inline Tensor unary_op(EwKind kind, const Tensor& a, double param = 0.0) {
    Tensor out = Tensor::zeros(a.shape());
    const auto& x = a.data();
    auto& y = out.data();
    const double kGeluC = std::sqrt(2.0 / M_PI);
    switch (kind) {
        case EwKind::relu:
            for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
            break;
        case EwKind::exp:
            for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::exp(x[i]);
            break;
        case EwKind::scale:
            for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * param;
            break;
        case EwKind::gelu:
            for (std::size_t i = 0; i < x.size(); ++i) {
                double t = std::tanh(kGeluC * (x[i] + 0.044715 * x[i] * x[i] * x[i]));
                y[i] = 0.5 * x[i] * (1.0 + t);
            }
            break;
        case EwKind::sqrt:
            for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::sqrt(x[i] + param);
            break;
        case EwKind::rsqrt:
            for (std::size_t i = 0; i < x.size(); ++i) y[i] = 1.0 / std::sqrt(x[i] + param);
            break;
        default:
            throw TensorError("unary_op: op kind is not unary");
    }
    if (detail::should_record({&a})) {
        Tape::active()->record(out, [kind, a, out, param, kGeluC]() {
            const auto& g = out.grad();
            const auto& x = a.data();
            auto& ga = a.ensure_grad();
            switch (kind) {
                case EwKind::relu:
                    for (std::size_t i = 0; i < x.size(); ++i)
                        if (x[i] > 0.0) ga[i] += g[i];
                    break;
                case EwKind::exp:
                    for (std::size_t i = 0; i < x.size(); ++i)
                        ga[i] += g[i] * std::exp(x[i]);
                    break;
                case EwKind::scale:
                    for (std::size_t i = 0; i < x.size(); ++i) ga[i] += g[i] * param;
                    break;
                case EwKind::gelu:
                    for (std::size_t i = 0; i < x.size(); ++i) {
                        double u = kGeluC * (x[i] + 0.044715 * x[i] * x[i] * x[i]);
                        double t = std::tanh(u);
                        double du = kGeluC * (1.0 + 3.0 * 0.044715 * x[i] * x[i]);
                        ga[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * x[i] * (1.0 - t * t) * du);
                    }
                    break;
                case EwKind::sqrt:
                    for (std::size_t i = 0; i < x.size(); ++i)
                        ga[i] += g[i] * 0.5 / std::sqrt(x[i] + param);
                    break;
                case EwKind::rsqrt:
                    for (std::size_t i = 0; i < x.size(); ++i) {
                        double r = 1.0 / std::sqrt(x[i] + param);
                        ga[i] += g[i] * (-0.5) * r * r * r;
                    }
                    break;
                default:
                    break;
            }
        });
    }
    return out;
}

// Spec-level elementwise dispatcher covering the documented kinds.
inline Tensor elementwise(const std::string& kind, const Tensor& a,
                          const Tensor* b = nullptr, double param = 0.0) {
    EwKind k = ew_kind_from_string(kind);
    switch (k) {
        case EwKind::add:
        case EwKind::sub:
        case EwKind::mul:
            if (!b) throw TensorError("elementwise '" + kind + "' needs two operands");
            return binary_op(k, a, *b);
        default:
            return unary_op(k, a, param);
    }
}

inline Tensor add(const Tensor& a, const Tensor& b) { return binary_op(EwKind::add, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(EwKind::sub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(EwKind::mul, a, b); }
inline Tensor relu(const Tensor& a) { return unary_op(EwKind::relu, a); }
inline Tensor exp(const Tensor& a) { return unary_op(EwKind::exp, a); }
inline Tensor scale(const Tensor& a, double c) { return unary_op(EwKind::scale, a, c); }
inline Tensor gelu(const Tensor& a) { return unary_op(EwKind::gelu, a); }
inline Tensor sqrt_eps(const Tensor& a, double eps) { return unary_op(EwKind::sqrt, a, eps); }
inline Tensor rsqrt_eps(const Tensor& a, double eps) { return unary_op(EwKind::rsqrt, a, eps); }

namespace detail {

// C(m,n) += or = A(m,k)·B(k,n) over raw buffers, ikj order.
inline void matmul_raw(const double* A, const double* B, double* C, std::size_t m,
                       std::size_t k, std::size_t n, bool accumulate) {
    if (!accumulate) std::fill(C, C + m * n, 0.0);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (m * k * n > (std::size_t)1 << 16)
#endif
    for (long long ii = 0; ii < (long long)m; ++ii) {
        std::size_t i = (std::size_t)ii;
        for (std::size_t p = 0; p < k; ++p) {
            double av = A[i * k + p];
            if (av == 0.0) continue;
            const double* brow = B + p * n;
            double* crow = C + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C(m,n) += Aᵀ·B with A(k,m), B(k,n).
inline void matmul_tn_raw(const double* A, const double* B, double* C, std::size_t k,
                          std::size_t m, std::size_t n) {
    for (std::size_t p = 0; p < k; ++p)
        for (std::size_t i = 0; i < m; ++i) {
            double av = A[p * m + i];
            if (av == 0.0) continue;
            const double* brow = B + p * n;
            double* crow = C + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
}

// C(m,n) += A·Bᵀ with A(m,k), B(n,k).
inline void matmul_nt_raw(const double* A, const double* B, double* C, std::size_t m,
                          std::size_t k, std::size_t n) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (m * k * n > (std::size_t)1 << 16)
#endif
    for (long long ii = 0; ii < (long long)m; ++ii) {
        std::size_t i = (std::size_t)ii;
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            const double* arow = A + i * k;
            const double* brow = B + j * k;
            for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
            C[i * n + j] += s;
        }
    }
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw TensorError("matmul expects rank-2 tensors, got " + shape_str(a.shape()) +
                          " and " + shape_str(b.shape()));
    if (a.dim(1) != b.dim(0))
        throw TensorError("matmul inner dimension mismatch: " + shape_str(a.shape()) +
                          " vs " + shape_str(b.shape()));
    std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = Tensor::zeros({m, n});
    detail::matmul_raw(a.data().data(), b.data().data(), out.data().data(), m, k, n, false);
    if (detail::should_record({&a, &b})) {
        Tape::active()->record(out, [a, b, out, m, k, n]() {
            const auto& g = out.grad();
            if (a.requires_grad() || a.impl()->producer)
                detail::matmul_nt_raw(g.data(), b.data().data(), a.ensure_grad().data(), m, n, k);
            if (b.requires_grad() || b.impl()->producer)
                detail::matmul_tn_raw(a.data().data(), g.data(), b.ensure_grad().data(), m, k, n);
        });
    }
    return out;
}

inline Tensor transpose(const Tensor& a) {
    if (a.rank() != 2)
        throw TensorError("transpose expects rank-2, got " + shape_str(a.shape()));
    std::size_t m = a.dim(0), n = a.dim(1);
    Tensor out = Tensor::zeros({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.data()[j * m + i] = a.data()[i * n + j];
    if (detail::should_record({&a})) {
        Tape::active()->record(out, [a, out, m, n]() {
            const auto& g = out.grad();
            auto& ga = a.ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
        });
    }
    return out;
}

inline Tensor reshape(const Tensor& a, Shape new_shape) {
    if (numel(new_shape) != a.size())
        throw TensorError("reshape " + shape_str(a.shape()) + " -> " + shape_str(new_shape) +
                          " changes element count");
    Tensor out(new_shape, a.data());
    if (detail::should_record({&a})) {
        Tape::active()->record(out, [a, out]() {
            const auto& g = out.grad();
            auto& ga = a.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        });
    }
    return out;
}

inline Tensor softmax(const Tensor& a, std::size_t axis) {
    if (axis >= a.rank())
        throw TensorError("softmax axis " + std::to_string(axis) + " invalid for shape " +
                          shape_str(a.shape()));
    const Shape& s = a.shape();
    std::size_t axis_n = s[axis];
    std::size_t inner = 1, outer = 1;
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    Tensor out = Tensor::zeros(s);
    const auto& x = a.data();
    auto& y = out.data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
            std::size_t base = o * axis_n * inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < axis_n; ++j) mx = std::max(mx, x[base + j * inner]);
            double z = 0.0;
            for (std::size_t j = 0; j < axis_n; ++j) {
                double e = std::exp(x[base + j * inner] - mx);
                y[base + j * inner] = e;
                z += e;
            }
            for (std::size_t j = 0; j < axis_n; ++j) y[base + j * inner] /= z;
        }
    if (detail::should_record({&a})) {
        Tape::active()->record(out, [a, out, axis_n, inner, outer]() {
            const auto& g = out.grad();
            const auto& y = out.data();
            auto& ga = a.ensure_grad();
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t in = 0; in < inner; ++in) {
                    std::size_t base = o * axis_n * inner + in;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < axis_n; ++j)
                        dot += g[base + j * inner] * y[base + j * inner];
                    for (std::size_t j = 0; j < axis_n; ++j)
                        ga[base + j * inner] += y[base + j * inner] * (g[base + j * inner] - dot);
                }
        });
    }
    return out;
}

inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
    if (x.rank() != 2)
        throw TensorError("layer_norm expects (T, D) input, got " + shape_str(x.shape()));
    std::size_t T = x.dim(0), D = x.dim(1);
    if (gamma.size() != D || beta.size() != D)
        throw TensorError("layer_norm gamma/beta length must equal D=" + std::to_string(D));
    if (eps <= 0.0) throw TensorError("layer_norm eps must be positive");
    Tensor out = Tensor::zeros({T, D});
    std::vector<double> mean(T), rstd(T);
    const auto& xd = x.data();
    auto& y = out.data();
    for (std::size_t t = 0; t < T; ++t) {
        double mu = 0.0;
        for (std::size_t d = 0; d < D; ++d) mu += xd[t * D + d];
        mu /= (double)D;
        double var = 0.0;
        for (std::size_t d = 0; d < D; ++d) {
            double c = xd[t * D + d] - mu;
            var += c * c;
        }
        var /= (double)D;
        double rs = 1.0 / std::sqrt(var + eps);
        mean[t] = mu;
        rstd[t] = rs;
        for (std::size_t d = 0; d < D; ++d)
            y[t * D + d] = (xd[t * D + d] - mu) * rs * gamma.data()[d] + beta.data()[d];
    }
    if (detail::should_record({&x, &gamma, &beta})) {
        Tape::active()->record(out, [x, gamma, beta, out, mean, rstd, T, D]() {
            const auto& g = out.grad();
            const auto& xd = x.data();
            bool wx = x.requires_grad() || x.impl()->producer;
            bool wg = gamma.requires_grad() || gamma.impl()->producer;
            bool wb = beta.requires_grad() || beta.impl()->producer;
            for (std::size_t t = 0; t < T; ++t) {
                double s1 = 0.0, s2 = 0.0;
                for (std::size_t d = 0; d < D; ++d) {
                    double xhat = (xd[t * D + d] - mean[t]) * rstd[t];
                    double gy = g[t * D + d] * gamma.data()[d];
                    s1 += gy;
                    s2 += gy * xhat;
                    if (wg) gamma.ensure_grad()[d] += g[t * D + d] * xhat;
                    if (wb) beta.ensure_grad()[d] += g[t * D + d];
                }
                if (wx) {
                    auto& gx = x.ensure_grad();
                    for (std::size_t d = 0; d < D; ++d) {
                        double xhat = (xd[t * D + d] - mean[t]) * rstd[t];
                        double gy = g[t * D + d] * gamma.data()[d];
                        gx[t * D + d] +=
                            rstd[t] * (gy - s1 / (double)D - xhat * s2 / (double)D);
                    }
                }
            }
        });
    }
    return out;
}

inline Tensor sum_all(const Tensor& a) {
    double s = std::accumulate(a.data().begin(), a.data().end(), 0.0);
    Tensor out = Tensor::scalar(s);
    if (detail::should_record({&a})) {
        Tape::active()->record(out, [a, out]() {
            double g = out.grad()[0];
            auto& ga = a.ensure_grad();
            for (auto& v : ga) v += g;
        });
    }
    return out;
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw TensorError("concat: empty list");
    const Shape& s0 = parts[0].shape();
    if (axis >= s0.size()) throw TensorError("concat: axis out of range");
    Shape os = s0;
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != s0.size()) throw TensorError("concat: rank mismatch");
        for (std::size_t d = 0; d < s0.size(); ++d)
            if (d != axis && p.shape()[d] != s0[d])
                throw TensorError("concat: shape mismatch at axis " + std::to_string(d));
        total += p.shape()[axis];
    }
    os[axis] = total;
    std::size_t inner = 1, outer = 1;
    for (std::size_t i = axis + 1; i < os.size(); ++i) inner *= os[i];
    for (std::size_t i = 0; i < axis; ++i) outer *= os[i];
    Tensor out = Tensor::zeros(os);
    std::size_t offset = 0;
    for (const auto& p : parts) {
        std::size_t an = p.shape()[axis];
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t j = 0; j < an; ++j)
                std::copy_n(p.data().begin() + (o * an + j) * inner, inner,
                            out.data().begin() + (o * total + offset + j) * inner);
        offset += an;
    }
    bool rec = false;
    for (const auto& p : parts)
        if (detail::should_record({&p})) rec = true;
    if (rec) {
        Tape::active()->record(out, [parts, out, axis, inner, outer, total]() {
            const auto& g = out.grad();
            std::size_t offset = 0;
            for (const auto& p : parts) {
                std::size_t an = p.shape()[axis];
                if (p.requires_grad() || p.impl()->producer) {
                    auto& gp = p.ensure_grad();
                    for (std::size_t o = 0; o < outer; ++o)
                        for (std::size_t j = 0; j < an; ++j)
                            for (std::size_t i = 0; i < inner; ++i)
                                gp[(o * an + j) * inner + i] +=
                                    g[(o * total + offset + j) * inner + i];
                }
                offset += an;
            }
        });
    }
    return out;
}

// --- bilinear interpolation along chosen axes ------------------------------

namespace detail {

struct InterpWeight {
    std::size_t i0, i1;
    double w;  // out = (1-w)*x[i0] + w*x[i1]
};

// align-corners-false sample centers: src = (o + 0.5) * n_in / n_out - 0.5
inline std::vector<InterpWeight> interp_weights(std::size_t n_in, std::size_t n_out) {
    std::vector<InterpWeight> ws(n_out);
    for (std::size_t o = 0; o < n_out; ++o) {
        if (n_in == n_out) {
            ws[o] = {o, o, 0.0};
            continue;
        }
        double src = ((double)o + 0.5) * (double)n_in / (double)n_out - 0.5;
        if (src <= 0.0) {
            ws[o] = {0, 0, 0.0};
        } else if (src >= (double)(n_in - 1)) {
            ws[o] = {n_in - 1, n_in - 1, 0.0};
        } else {
            std::size_t i0 = (std::size_t)std::floor(src);
            ws[o] = {i0, i0 + 1, src - (double)i0};
        }
    }
    return ws;
}

}  // namespace detail

// Linear interpolation along one axis (the building block of separable
// bilinear resizing in 2D and 4D).
inline Tensor interp_axis(const Tensor& a, std::size_t axis, std::size_t target) {
    if (axis >= a.rank()) throw TensorError("interp_axis: axis out of range");
    if (target == 0) throw TensorError("interp_axis: non-positive target size");
    const Shape& s = a.shape();
    std::size_t n_in = s[axis];
    Shape os = s;
    os[axis] = target;
    std::size_t inner = 1, outer = 1;
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    auto ws = detail::interp_weights(n_in, target);
    Tensor out = Tensor::zeros(os);
    const auto& x = a.data();
    auto& y = out.data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < target; ++j) {
            const auto& w = ws[j];
            const double* r0 = x.data() + (o * n_in + w.i0) * inner;
            const double* r1 = x.data() + (o * n_in + w.i1) * inner;
            double* yo = y.data() + (o * target + j) * inner;
            for (std::size_t i = 0; i < inner; ++i)
                yo[i] = (1.0 - w.w) * r0[i] + w.w * r1[i];
        }
    if (detail::should_record({&a})) {
        Tape::active()->record(out, [a, out, ws, n_in, target, inner, outer]() {
            const auto& g = out.grad();
            auto& ga = a.ensure_grad();
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t j = 0; j < target; ++j) {
                    const auto& w = ws[j];
                    const double* go = g.data() + (o * target + j) * inner;
                    double* g0 = ga.data() + (o * n_in + w.i0) * inner;
                    double* g1 = ga.data() + (o * n_in + w.i1) * inner;
                    for (std::size_t i = 0; i < inner; ++i) {
                        g0[i] += (1.0 - w.w) * go[i];
                        g1[i] += w.w * go[i];
                    }
                }
        });
    }
    return out;
}

// Separable bilinear resize over the given axes (pairs or singletons are
// both expressed as a flat list of (axis, target) entries here; 4D
// upsampling is interpolation over the source pair then the target pair).
inline Tensor bilinear_resize(const Tensor& a, const std::vector<std::size_t>& axes,
                              const std::vector<std::size_t>& targets) {
    if (axes.size() != targets.size())
        throw TensorError("bilinear_resize: axes/targets length mismatch");
    for (std::size_t i = 0; i < axes.size(); ++i)
        for (std::size_t j = i + 1; j < axes.size(); ++j)
            if (axes[i] == axes[j]) throw TensorError("bilinear_resize: duplicate axis");
    Tensor cur = a;
    for (std::size_t i = 0; i < axes.size(); ++i) {
        if (targets[i] == 0) throw TensorError("bilinear_resize: non-positive target size");
        cur = interp_axis(cur, axes[i], targets[i]);
    }
    return cur;
}

// Spec-level backward entry point.
inline void backward(const Tensor& loss, Tape& tape) { tape.backward(loss); }

// --- deterministic RNG -----------------------------------------------------

// mt19937_64 is fully specified by the standard; the normal transform is
// hand-rolled so streams are reproducible across standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    double uniform() {  // [0, 1)
        return (double)(eng_() >> 11) * (1.0 / 9007199254740992.0);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    std::uint64_t next_u64() { return eng_(); }

    std::size_t uniform_index(std::size_t n) { return (std::size_t)(eng_() % n); }

    double normal() {  // Box-Muller
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform(), u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    Tensor normal_tensor(Shape shape, double stddev = 1.0, bool requires_grad = false) {
        std::size_t n = numel(shape);
        std::vector<double> d(n);
        for (auto& v : d) v = normal() * stddev;
        return Tensor(std::move(shape), std::move(d), requires_grad);
    }

private:
    std::mt19937_64 eng_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace tfm

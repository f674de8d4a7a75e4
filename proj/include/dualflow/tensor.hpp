#pragma once

// Dense 64-bit tensors with reverse-mode differentiation on a dynamically
// recorded graph. Small primitive set, correctness over speed; matmul is
// routed through Eigen, everything else is plain loops.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dualflow/rng.hpp"

namespace dualflow {

using Shape = std::vector<int>;

inline int64_t numel_of(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
    os << "]";
    return os.str();
}

[[noreturn]] inline void tensor_fail(const std::string& msg) {
    throw std::invalid_argument("tensor: " + msg);
}

/// Gradient recording switch. Disable around rollouts so forward passes
/// build no graph and intermediates are freed eagerly.
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
    ~NoGradGuard() { grad_mode() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

/// Backward callback: out-gradient plus one accumulation buffer per parent
/// (null when that parent does not require grad).
using BackwardFn =
    std::function<void(const std::vector<double>&, const std::vector<std::vector<double>*>&)>;

struct TensorNode {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // leaves only; sized lazily
    std::vector<NodePtr> parents;
    BackwardFn backward;
    const char* op = "leaf";

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    bool is_leaf() const { return !backward; }
};

inline void check_finite(const std::vector<double>& v, const char* op) {
    if (v.empty()) return;
    using CArr = Eigen::Map<const Eigen::Array<double, Eigen::Dynamic, 1>>;
    if (!CArr(v.data(), static_cast<Eigen::Index>(v.size())).allFinite())
        tensor_fail(std::string(op) + ": non-finite input value");
}

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(NodePtr n) : node_(std::move(n)) {}

    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false) {
        if (numel_of(shape) != static_cast<int64_t>(data.size()))
            tensor_fail("from_data: shape " + shape_str(shape) + " does not match data length " +
                        std::to_string(data.size()));
        check_finite(data, "from_data");
        auto n = std::make_shared<TensorNode>();
        n->shape = std::move(shape);
        n->data = std::move(data);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return full(std::move(shape), 0.0, requires_grad);
    }

    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        std::vector<double> d(static_cast<size_t>(numel_of(shape)), value);
        return from_data(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor ones(Shape shape, bool requires_grad = false) {
        return full(std::move(shape), 1.0, requires_grad);
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from_data({}, {v}, requires_grad);
    }

    static Tensor randn(Shape shape, SeededRng& rng, double stddev = 1.0, bool requires_grad = false) {
        std::vector<double> d(static_cast<size_t>(numel_of(shape)));
        for (auto& x : d) x = stddev * rng.normal();
        return from_data(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor rand_uniform(Shape shape, SeededRng& rng, double lo = 0.0, double hi = 1.0,
                               bool requires_grad = false) {
        std::vector<double> d(static_cast<size_t>(numel_of(shape)));
        for (auto& x : d) x = rng.uniform(lo, hi);
        return from_data(std::move(shape), std::move(d), requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int64_t numel() const { return node_->numel(); }
    bool requires_grad() const { return node_->requires_grad; }
    const std::vector<double>& data() const { return node_->data; }
    std::vector<double>& mutable_data() { return node_->data; }
    const char* op_name() const { return node_->op; }

    double value() const {
        if (numel() != 1) tensor_fail("value: tensor with shape " + shape_str(shape()) + " is not scalar");
        return node_->data[0];
    }

    double at(std::initializer_list<int> idx) const {
        const Shape& s = shape();
        if (idx.size() != s.size()) tensor_fail("at: rank mismatch");
        int64_t off = 0;
        auto it = idx.begin();
        for (size_t i = 0; i < s.size(); ++i, ++it) off = off * s[i] + *it;
        return node_->data[static_cast<size_t>(off)];
    }

    /// Leaf gradient accumulated by backward(); empty until then.
    const std::vector<double>& grad() const { return node_->grad; }

    void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

    void set_requires_grad(bool rg) {
        if (!node_->is_leaf()) tensor_fail("set_requires_grad: only valid on leaf tensors");
        node_->requires_grad = rg;
    }

    /// Deep copy with no graph history.
    Tensor detach(bool requires_grad = false) const {
        return from_data(shape(), data(), requires_grad);
    }

    NodePtr node() const { return node_; }

    void backward() const;

private:
    NodePtr node_;
};

/// Recorded operation graph reachable from one root, parents before children.
struct Graph {
    std::vector<TensorNode*> order;

    static Graph trace(const Tensor& root) {
        Graph g;
        std::unordered_set<TensorNode*> seen;
        // iterative post-order DFS over parents
        std::vector<std::pair<TensorNode*, size_t>> stack;
        stack.emplace_back(root.node().get(), 0);
        seen.insert(root.node().get());
        while (!stack.empty()) {
            auto& [n, i] = stack.back();
            if (i < n->parents.size()) {
                TensorNode* p = n->parents[i++].get();
                if (seen.insert(p).second) stack.emplace_back(p, 0);
            } else {
                g.order.push_back(n);
                stack.pop_back();
            }
        }
        return g;
    }

    std::vector<TensorNode*> leaves() const {
        std::vector<TensorNode*> out;
        for (auto* n : order)
            if (n->is_leaf() && n->requires_grad) out.push_back(n);
        return out;
    }
};

inline void Tensor::backward() const {
    if (numel() != 1) tensor_fail("backward: loss must be scalar, got shape " + shape_str(shape()));
    if (!node_->requires_grad)
        tensor_fail("backward: loss is not attached to a graph (requires_grad is false)");
    Graph g = Graph::trace(*this);
    std::unordered_map<TensorNode*, std::vector<double>> grads;
    grads.reserve(g.order.size());
    grads[node_.get()] = {1.0};
    for (auto it = g.order.rbegin(); it != g.order.rend(); ++it) {
        TensorNode* n = *it;
        auto git = grads.find(n);
        if (git == grads.end()) continue;
        if (n->backward) {
            std::vector<std::vector<double>*> pg(n->parents.size(), nullptr);
            for (size_t i = 0; i < n->parents.size(); ++i) {
                TensorNode* p = n->parents[i].get();
                if (!p->requires_grad) continue;
                auto& buf = grads[p];
                if (buf.empty()) buf.assign(static_cast<size_t>(p->numel()), 0.0);
                pg[i] = &buf;
            }
            n->backward(git->second, pg);
            grads.erase(git);  // interior grads are transient
        } else if (n->requires_grad) {
            if (n->grad.empty()) n->grad.assign(static_cast<size_t>(n->numel()), 0.0);
            const auto& src = git->second;
            for (size_t i = 0; i < src.size(); ++i) n->grad[i] += src[i];
            grads.erase(git);
        }
    }
}

// ---------------------------------------------------------------------------
// op construction helpers

namespace detail {

inline Tensor make_op(const char* op, Shape shape, std::vector<double> data,
                      std::vector<Tensor> inputs, BackwardFn fn) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->op = op;
    bool record = false;
    if (grad_mode()) {
        for (const auto& t : inputs)
            if (t.requires_grad()) record = true;
    }
    if (record) {
        n->requires_grad = true;
        n->parents.reserve(inputs.size());
        for (auto& t : inputs) n->parents.push_back(t.node());
        n->backward = std::move(fn);
    }
    return Tensor(std::move(n));
}

/// Variant for ops whose backward reads their own output: the factory gets
/// the created node (the lambda it returns may capture the raw pointer; the
/// node owns its backward, so the reference cannot dangle).
template <class BackwardFactory>
inline Tensor make_op_self(const char* op, Shape shape, std::vector<double> data,
                           std::vector<Tensor> inputs, BackwardFactory make_bw) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->op = op;
    bool record = false;
    if (grad_mode()) {
        for (const auto& t : inputs)
            if (t.requires_grad()) record = true;
    }
    if (record) {
        n->requires_grad = true;
        n->parents.reserve(inputs.size());
        for (auto& t : inputs) n->parents.push_back(t.node());
        n->backward = make_bw(n.get());
    }
    return Tensor(std::move(n));
}

// Row-major strides; 0 on axes being broadcast.
inline std::vector<int64_t> broadcast_strides(const Shape& in, const Shape& out) {
    std::vector<int64_t> st(out.size(), 0);
    int64_t stride = 1;
    int off = static_cast<int>(out.size()) - static_cast<int>(in.size());
    for (int i = static_cast<int>(in.size()) - 1; i >= 0; --i) {
        if (in[i] != 1) st[i + off] = stride;
        stride *= in[i];
    }
    return st;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    Shape out(std::max(a.size(), b.size()));
    for (int i = 0; i < static_cast<int>(out.size()); ++i) {
        int ia = static_cast<int>(a.size()) - 1 - i;
        int ib = static_cast<int>(b.size()) - 1 - i;
        int da = ia >= 0 ? a[ia] : 1;
        int db = ib >= 0 ? b[ib] : 1;
        if (da != db && da != 1 && db != 1)
            tensor_fail(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                        " are not broadcastable");
        out[out.size() - 1 - i] = std::max(da, db);
    }
    return out;
}

// Walks an output index space, yielding source offsets for two broadcast inputs.
template <class F>
inline void for_broadcast(const Shape& out, const std::vector<int64_t>& sa,
                          const std::vector<int64_t>& sb, F&& f) {
    const int rank = static_cast<int>(out.size());
    const int64_t n = numel_of(out);
    std::vector<int> idx(rank, 0);
    int64_t oa = 0, ob = 0;
    for (int64_t i = 0; i < n; ++i) {
        f(i, oa, ob);
        for (int d = rank - 1; d >= 0; --d) {
            oa += sa[d];
            ob += sb[d];
            if (++idx[d] < out[d]) break;
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise primitives

namespace detail {

template <class F, class DF>
inline Tensor unary_op(const char* name, const Tensor& x, F f, DF df, bool check_output = false) {
    check_finite(x.data(), name);
    const auto& xd = x.data();
    std::vector<double> out(xd.size());
    for (size_t i = 0; i < xd.size(); ++i) out[i] = f(xd[i]);
    if (check_output) {
        for (double v : out)
            if (!std::isfinite(v)) tensor_fail(std::string(name) + ": non-finite result");
    }
    TensorNode* xn = x.node().get();
    auto bw = [xn, df](const std::vector<double>& g, const std::vector<std::vector<double>*>& pg) {
        if (!pg[0]) return;
        auto& gx = *pg[0];
        for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xn->data[i], i);
    };
    return make_op(name, x.shape(), std::move(out), {x}, std::move(bw));
}

// dfa/dfb: (a, b) -> local derivative wrt that input.
template <class F, class DFA, class DFB>
inline Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, F f, DFA dfa, DFB dfb,
                        bool check_output = false) {
    check_finite(a.data(), name);
    check_finite(b.data(), name);
    const auto& ad = a.data();
    const auto& bd = b.data();
    if (a.shape() == b.shape()) {
        std::vector<double> out(ad.size());
        for (size_t i = 0; i < ad.size(); ++i) out[i] = f(ad[i], bd[i]);
        if (check_output) check_finite(out, name);
        TensorNode* an = a.node().get();
        TensorNode* bn = b.node().get();
        auto bw = [an, bn, dfa, dfb](const std::vector<double>& g,
                                     const std::vector<std::vector<double>*>& pg) {
            if (pg[0]) {
                auto& ga = *pg[0];
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfa(an->data[i], bn->data[i]);
            }
            if (pg[1]) {
                auto& gb = *pg[1];
                for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * dfb(an->data[i], bn->data[i]);
            }
        };
        return make_op(name, a.shape(), std::move(out), {a, b}, std::move(bw));
    }
    Shape oshape = broadcast_shape(a.shape(), b.shape(), name);
    auto sa = broadcast_strides(a.shape(), oshape);
    auto sb = broadcast_strides(b.shape(), oshape);
    std::vector<double> out(static_cast<size_t>(numel_of(oshape)));
    for_broadcast(oshape, sa, sb,
                  [&](int64_t i, int64_t oa, int64_t ob) { out[i] = f(ad[oa], bd[ob]); });
    if (check_output) check_finite(out, name);
    TensorNode* an = a.node().get();
    TensorNode* bn = b.node().get();
    auto bw = [an, bn, sa, sb, oshape, dfa, dfb](const std::vector<double>& g,
                                                 const std::vector<std::vector<double>*>& pg) {
        for_broadcast(oshape, sa, sb, [&](int64_t i, int64_t oa, int64_t ob) {
            if (pg[0]) (*pg[0])[oa] += g[i] * dfa(an->data[oa], bn->data[ob]);
            if (pg[1]) (*pg[1])[ob] += g[i] * dfb(an->data[oa], bn->data[ob]);
        });
    };
    return make_op(name, std::move(oshape), std::move(out), {a, b}, std::move(bw));
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        "div", a, b, [](double x, double y) { return x / y; },
        [](double, double y) { return 1.0 / y; },
        [](double x, double y) { return -x / (y * y); }, true);
}

inline Tensor minimum(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        "minimum", a, b, [](double x, double y) { return std::min(x, y); },
        [](double x, double y) { return x <= y ? 1.0 : 0.0; },
        [](double x, double y) { return x <= y ? 0.0 : 1.0; });
}

inline Tensor neg(const Tensor& x) {
    return detail::unary_op(
        "neg", x, [](double v) { return -v; }, [](double, size_t) { return -1.0; });
}

inline Tensor add_scalar(const Tensor& x, double s) {
    return detail::unary_op(
        "add_scalar", x, [s](double v) { return v + s; }, [](double, size_t) { return 1.0; });
}

inline Tensor mul_scalar(const Tensor& x, double s) {
    return detail::unary_op(
        "mul_scalar", x, [s](double v) { return v * s; }, [s](double, size_t) { return s; });
}

namespace detail {
using EArr = Eigen::Map<Eigen::Array<double, Eigen::Dynamic, 1>>;
using CEArr = Eigen::Map<const Eigen::Array<double, Eigen::Dynamic, 1>>;

// Bitwise-deterministic helpers for the hot paths. Libm and Eigen's packet
// transcendentals/reductions give alignment-dependent last-ulp results once
// vectorized; these evaluate the same arithmetic for every element and a
// fixed reduction tree, so results never depend on buffer addresses.

/// exp via range reduction and a degree-11 Taylor polynomial; absolute
/// relative error stays below ~1e-14 on the clamped range.
inline void fast_exp_inplace(double* p, int64_t n) {
    constexpr double kLog2e = 1.4426950408889634074;
    constexpr double kLn2Hi = 6.93147180369123816490e-01;
    constexpr double kLn2Lo = 1.90821492927058770002e-10;
    for (int64_t i = 0; i < n; ++i) {
        double x = p[i];
        x = x < -700.0 ? -700.0 : (x > 700.0 ? 700.0 : x);
        const double kd = std::floor(x * kLog2e + 0.5);
        const double r = (x - kd * kLn2Hi) - kd * kLn2Lo;
        double q = 1.0 / 39916800;
        q = q * r + 1.0 / 3628800;
        q = q * r + 1.0 / 362880;
        q = q * r + 1.0 / 40320;
        q = q * r + 1.0 / 5040;
        q = q * r + 1.0 / 720;
        q = q * r + 1.0 / 120;
        q = q * r + 1.0 / 24;
        q = q * r + 1.0 / 6;
        q = q * r + 0.5;
        q = q * r + 1.0;
        q = q * r + 1.0;
        const uint64_t bits = static_cast<uint64_t>(static_cast<int64_t>(kd) + 1023) << 52;
        double two_k;
        std::memcpy(&two_k, &bits, sizeof(two_k));
        p[i] = q * two_k;
    }
}

/// Sum with a fixed four-accumulator pattern (address-independent order).
inline double sum_det(const double* p, int64_t n) {
    double a0 = 0, a1 = 0, a2 = 0, a3 = 0;
    int64_t i = 0;
    for (; i + 4 <= n; i += 4) {
        a0 += p[i];
        a1 += p[i + 1];
        a2 += p[i + 2];
        a3 += p[i + 3];
    }
    for (; i < n; ++i) a0 += p[i];
    return (a0 + a1) + (a2 + a3);
}

inline double dot_det(const double* a, const double* b, int64_t n) {
    double a0 = 0, a1 = 0, a2 = 0, a3 = 0;
    int64_t i = 0;
    for (; i + 4 <= n; i += 4) {
        a0 += a[i] * b[i];
        a1 += a[i + 1] * b[i + 1];
        a2 += a[i + 2] * b[i + 2];
        a3 += a[i + 3] * b[i + 3];
    }
    for (; i < n; ++i) a0 += a[i] * b[i];
    return (a0 + a1) + (a2 + a3);
}

}  // namespace detail

inline Tensor exp_op(const Tensor& x) {
    check_finite(x.data(), "exp");
    std::vector<double> out(x.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(x.data()[i]);
    check_finite(out, "exp");
    return detail::make_op_self("exp", x.shape(), std::move(out), {x}, [](TensorNode* self) {
        return [self](const std::vector<double>& g, const std::vector<std::vector<double>*>& pg) {
            if (!pg[0]) return;
            auto& gx = *pg[0];
            for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * self->data[i];
        };
    });
}

inline Tensor log_op(const Tensor& x) {
    return detail::unary_op(
        "log", x, [](double v) { return std::log(v); }, [](double v, size_t) { return 1.0 / v; },
        true);
}

inline Tensor sqrt_op(const Tensor& x) {
    return detail::unary_op(
        "sqrt", x, [](double v) { return std::sqrt(v); },
        [](double v, size_t) { return 0.5 / std::sqrt(v); }, true);
}

inline double sigmoid_val(double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); }

inline Tensor sigmoid(const Tensor& x) {
    check_finite(x.data(), "sigmoid");
    const size_t n = x.data().size();
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = sigmoid_val(x.data()[i]);
    return detail::make_op_self("sigmoid", x.shape(), std::move(out), {x}, [](TensorNode* self) {
        return [self](const std::vector<double>& g, const std::vector<std::vector<double>*>& pg) {
            if (!pg[0]) return;
            auto& gx = *pg[0];
            for (size_t i = 0; i < g.size(); ++i)
                gx[i] += g[i] * self->data[i] * (1.0 - self->data[i]);
        };
    });
}

inline Tensor silu(const Tensor& x) {
    check_finite(x.data(), "silu");
    const size_t n = x.data().size();
    std::vector<double> sig(n), out(n);
    for (size_t i = 0; i < n; ++i) {
        sig[i] = sigmoid_val(x.data()[i]);
        out[i] = x.data()[i] * sig[i];
    }
    auto sptr = std::make_shared<std::vector<double>>(std::move(sig));
    TensorNode* xn = x.node().get();
    auto bw = [sptr, xn](const std::vector<double>& g, const std::vector<std::vector<double>*>& pg) {
        if (!pg[0]) return;
        auto& gx = *pg[0];
        const auto& s = *sptr;
        for (size_t i = 0; i < g.size(); ++i)
            gx[i] += g[i] * s[i] * (1.0 + xn->data[i] * (1.0 - s[i]));
    };
    return detail::make_op("silu", x.shape(), std::move(out), {x}, std::move(bw));
}

inline Tensor clamp(const Tensor& x, double lo, double hi) {
    return detail::unary_op(
        "clamp", x, [lo, hi](double v) { return std::min(hi, std::max(lo, v)); },
        [lo, hi](double v, size_t) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// shape primitives

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (numel_of(shape) != x.numel())
        tensor_fail("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    auto bw = [](const std::vector<double>& g, const std::vector<std::vector<double>*>& pg) {
        if (!pg[0]) return;
        auto& gx = *pg[0];
        for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    };
    return detail::make_op("reshape", std::move(shape), x.data(), {x}, std::move(bw));
}

inline Tensor transpose(const Tensor& x) {
    if (x.shape().size() != 2)
        tensor_fail("transpose: expected rank-2 tensor, got " + shape_str(x.shape()));
    const int r = x.shape()[0], c = x.shape()[1];
    std::vector<double> out(static_cast<size_t>(x.numel()));
    const auto& xd = x.data();
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out[static_cast<size_t>(j) * r + i] = xd[static_cast<size_t>(i) * c + j];
    auto bw = [r, c](const std::vector<double>& g, const std::vector<std::vector<double>*>& pg) {
        if (!pg[0]) return;
        auto& gx = *pg[0];
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j)
                gx[static_cast<size_t>(i) * c + j] += g[static_cast<size_t>(j) * r + i];
    };
    return detail::make_op("transpose", {c, r}, std::move(out), {x}, std::move(bw));
}

namespace detail {
// Collapse a shape around `axis` into [outer, n, inner].
inline void axis_split(const Shape& s, int axis, int64_t& outer, int64_t& n, int64_t& inner) {
    outer = 1;
    inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[i];
    n = s[axis];
    for (size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}
}  // namespace detail

inline Tensor slice(const Tensor& x, int axis, int start, int end) {
    const Shape& s = x.shape();
    if (axis < 0 || axis >= static_cast<int>(s.size()))
        tensor_fail("slice: axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    if (start < 0 || end > s[axis] || start >= end)
        tensor_fail("slice: range [" + std::to_string(start) + ", " + std::to_string(end) +
                    ") invalid for axis size " + std::to_string(s[axis]));
    int64_t outer, n, inner;
    detail::axis_split(s, axis, outer, n, inner);
    const int64_t m = end - start;
    std::vector<double> out(static_cast<size_t>(outer * m * inner));
    const auto& xd = x.data();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t k = 0; k < m; ++k)
            std::copy_n(xd.begin() + (o * n + start + k) * inner, inner,
                        out.begin() + (o * m + k) * inner);
    Shape oshape = s;
    oshape[axis] = static_cast<int>(m);
    auto bw = [outer, n, inner, m, start](const std::vector<double>& g,
                                          const std::vector<std::vector<double>*>& pg) {
        if (!pg[0]) return;
        auto& gx = *pg[0];
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t k = 0; k < m; ++k) {
                const double* gsrc = g.data() + (o * m + k) * inner;
                double* gdst = gx.data() + (o * n + start + k) * inner;
                for (int64_t i = 0; i < inner; ++i) gdst[i] += gsrc[i];
            }
    };
    return detail::make_op("slice", std::move(oshape), std::move(out), {x}, std::move(bw));
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) tensor_fail("concat: no inputs");
    const Shape& s0 = parts[0].shape();
    if (axis < 0 || axis >= static_cast<int>(s0.size()))
        tensor_fail("concat: axis " + std::to_string(axis) + " out of range for " + shape_str(s0));
    int total = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        if (s.size() != s0.size()) tensor_fail("concat: rank mismatch");
        for (size_t i = 0; i < s.size(); ++i)
            if (static_cast<int>(i) != axis && s[i] != s0[i])
                tensor_fail("concat: shapes " + shape_str(s0) + " and " + shape_str(s) +
                            " differ off-axis");
        total += s[axis];
    }
    Shape oshape = s0;
    oshape[axis] = total;
    int64_t outer, nout, inner;
    detail::axis_split(oshape, axis, outer, nout, inner);
    std::vector<double> out(static_cast<size_t>(numel_of(oshape)));
    std::vector<int64_t> sizes;
    int64_t off = 0;
    for (const auto& p : parts) {
        check_finite(p.data(), "concat");
        const int64_t np = p.shape()[axis];
        const auto& pd = p.data();
        for (int64_t o = 0; o < outer; ++o)
            std::copy_n(pd.begin() + o * np * inner, np * inner,
                        out.begin() + (o * nout + off) * inner);
        sizes.push_back(np);
        off += np;
    }
    auto bw = [outer, nout, inner, sizes](const std::vector<double>& g,
                                          const std::vector<std::vector<double>*>& pg) {
        int64_t off = 0;
        for (size_t p = 0; p < sizes.size(); ++p) {
            if (pg[p]) {
                auto& gx = *pg[p];
                for (int64_t o = 0; o < outer; ++o) {
                    const double* gsrc = g.data() + (o * nout + off) * inner;
                    double* gdst = gx.data() + o * sizes[p] * inner;
                    for (int64_t i = 0; i < sizes[p] * inner; ++i) gdst[i] += gsrc[i];
                }
            }
            off += sizes[p];
        }
    };
    return detail::make_op("concat", std::move(oshape), std::move(out), parts, std::move(bw));
}

// ---------------------------------------------------------------------------
// matmul (Eigen-backed)

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2)
        tensor_fail("matmul: expected rank-2 tensors, got " + shape_str(a.shape()) + " and " +
                    shape_str(b.shape()));
    if (a.shape()[1] != b.shape()[0])
        tensor_fail("matmul: inner dimensions differ, " + shape_str(a.shape()) + " vs " +
                    shape_str(b.shape()));
    check_finite(a.data(), "matmul");
    check_finite(b.data(), "matmul");
    using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using CMap = Eigen::Map<const Mat>;
    using MMap = Eigen::Map<Mat>;
    const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    std::vector<double> out(static_cast<size_t>(m) * n);
    MMap(out.data(), m, n).noalias() = CMap(a.data().data(), m, k) * CMap(b.data().data(), k, n);
    TensorNode* an = a.node().get();
    TensorNode* bn = b.node().get();
    auto bw = [an, bn, m, k, n](const std::vector<double>& g,
                                const std::vector<std::vector<double>*>& pg) {
        CMap gm(g.data(), m, n);
        if (pg[0])
            MMap(pg[0]->data(), m, k).noalias() += gm * CMap(bn->data.data(), k, n).transpose();
        if (pg[1])
            MMap(pg[1]->data(), k, n).noalias() += CMap(an->data.data(), m, k).transpose() * gm;
    };
    return detail::make_op("matmul", {m, n}, std::move(out), {a, b}, std::move(bw));
}

/// Fused multi-head scaled dot-product attention. q is [Nq, D], k and v are
/// [Nk, D]; head h occupies columns [h*D/heads, (h+1)*D/heads). Returns the
/// attended values, [Nq, D] (no output projection). Keeps the softmax
/// matrices for backward only while gradients are being recorded.
inline Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads) {
    const Shape &qs = q.shape(), &ks = k.shape(), &vs = v.shape();
    if (qs.size() != 2 || ks.size() != 2 || vs.size() != 2)
        tensor_fail("attention: expected rank-2 inputs");
    if (qs[1] != ks[1] || ks != vs)
        tensor_fail("attention: shapes " + shape_str(qs) + ", " + shape_str(ks) + ", " +
                    shape_str(vs) + " are inconsistent");
    if (heads < 1 || qs[1] % heads != 0)
        tensor_fail("attention: width " + std::to_string(qs[1]) + " not divisible into " +
                    std::to_string(heads) + " heads");
    check_finite(q.data(), "attention");
    check_finite(k.data(), "attention");
    check_finite(v.data(), "attention");
    const int nq = qs[0], nk = ks[0], d = qs[1], dh = d / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using Stride = Eigen::OuterStride<>;
    using CBlock = Eigen::Map<const Mat, 0, Stride>;
    using MBlock = Eigen::Map<Mat, 0, Stride>;
    using SMap = Eigen::Map<Mat>;

    const bool recording =
        grad_mode() && (q.requires_grad() || k.requires_grad() || v.requires_grad());
    std::vector<double> out(static_cast<size_t>(nq) * d);
    auto saved = recording ? std::make_shared<std::vector<double>>(
                                 static_cast<size_t>(heads) * nq * nk)
                           : nullptr;
    std::vector<double> scratch;
    if (!recording) scratch.resize(static_cast<size_t>(nq) * nk);
    for (int h = 0; h < heads; ++h) {
        double* sp = recording ? saved->data() + static_cast<size_t>(h) * nq * nk : scratch.data();
        SMap s(sp, nq, nk);
        CBlock qh(q.data().data() + h * dh, nq, dh, Stride(d));
        CBlock kh(k.data().data() + h * dh, nk, dh, Stride(d));
        CBlock vh(v.data().data() + h * dh, nk, dh, Stride(d));
        s.noalias() = (qh * kh.transpose()) * inv_sqrt;
        for (int r = 0; r < nq; ++r) {
            detail::EArr row(sp + static_cast<size_t>(r) * nk, nk);
            row = row - row.maxCoeff();
            detail::fast_exp_inplace(sp + static_cast<size_t>(r) * nk, nk);
            row *= 1.0 / detail::sum_det(sp + static_cast<size_t>(r) * nk, nk);
        }
        MBlock(out.data() + h * dh, nq, dh, Stride(d)).noalias() = s * vh;
    }
    TensorNode* qn = q.node().get();
    TensorNode* kn = k.node().get();
    TensorNode* vn = v.node().get();
    auto bw = [saved, qn, kn, vn, nq, nk, d, dh, heads, inv_sqrt](
                  const std::vector<double>& g, const std::vector<std::vector<double>*>& pg) {
        std::vector<double> dz(static_cast<size_t>(nq) * nk);
        for (int h = 0; h < heads; ++h) {
            const double* sp = saved->data() + static_cast<size_t>(h) * nq * nk;
            Eigen::Map<const Mat> s(sp, nq, nk);
            CBlock gh(g.data() + h * dh, nq, dh, Stride(d));
            CBlock qh(qn->data.data() + h * dh, nq, dh, Stride(d));
            CBlock kh(kn->data.data() + h * dh, nk, dh, Stride(d));
            CBlock vh(vn->data.data() + h * dh, nk, dh, Stride(d));
            if (pg[2]) {
                MBlock dvh(pg[2]->data() + h * dh, nk, dh, Stride(d));
                dvh.noalias() += s.transpose() * gh;
            }
            if (pg[0] || pg[1]) {
                SMap ds(dz.data(), nq, nk);
                ds.noalias() = gh * vh.transpose();
                for (int r = 0; r < nq; ++r) {
                    detail::EArr row(dz.data() + static_cast<size_t>(r) * nk, nk);
                    detail::CEArr srow(sp + static_cast<size_t>(r) * nk, nk);
                    const double dot = detail::dot_det(dz.data() + static_cast<size_t>(r) * nk,
                                                       sp + static_cast<size_t>(r) * nk, nk);
                    row = srow * (row - dot);
                }
                if (pg[0]) {
                    MBlock dqh(pg[0]->data() + h * dh, nq, dh, Stride(d));
                    dqh.noalias() += (ds * kh) * inv_sqrt;
                }
                if (pg[1]) {
                    MBlock dkh(pg[1]->data() + h * dh, nk, dh, Stride(d));
                    dkh.noalias() += (ds.transpose() * qh) * inv_sqrt;
                }
            }
        }
    };
    return detail::make_op("attention", {nq, d}, std::move(out), {q, k, v}, std::move(bw));
}

// ---------------------------------------------------------------------------
// reductions

inline Tensor sum_all(const Tensor& x) {
    check_finite(x.data(), "sum_all");
    double s = 0.0;
    for (double v : x.data()) s += v;
    auto bw = [](const std::vector<double>& g, const std::vector<std::vector<double>*>& pg) {
        if (!pg[0]) return;
        for (auto& v : *pg[0]) v += g[0];
    };
    return detail::make_op("sum_all", {}, {s}, {x}, std::move(bw));
}

inline Tensor mean_all(const Tensor& x) {
    check_finite(x.data(), "mean_all");
    double s = 0.0;
    for (double v : x.data()) s += v;
    const double inv = 1.0 / static_cast<double>(x.numel());
    auto bw = [inv](const std::vector<double>& g, const std::vector<std::vector<double>*>& pg) {
        if (!pg[0]) return;
        for (auto& v : *pg[0]) v += g[0] * inv;
    };
    return detail::make_op("mean_all", {}, {s * inv}, {x}, std::move(bw));
}

inline Tensor sum_axis(const Tensor& x, int axis) {
    const Shape& s = x.shape();
    if (axis < 0 || axis >= static_cast<int>(s.size()))
        tensor_fail("sum_axis: axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    check_finite(x.data(), "sum_axis");
    int64_t outer, n, inner;
    detail::axis_split(s, axis, outer, n, inner);
    Shape oshape;
    for (int i = 0; i < static_cast<int>(s.size()); ++i)
        if (i != axis) oshape.push_back(s[i]);
    std::vector<double> out(static_cast<size_t>(outer * inner), 0.0);
    const auto& xd = x.data();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t k = 0; k < n; ++k) {
            const double* src = xd.data() + (o * n + k) * inner;
            double* dst = out.data() + o * inner;
            for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    auto bw = [outer, n, inner](const std::vector<double>& g,
                                const std::vector<std::vector<double>*>& pg) {
        if (!pg[0]) return;
        auto& gx = *pg[0];
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t k = 0; k < n; ++k) {
                double* dst = gx.data() + (o * n + k) * inner;
                const double* src = g.data() + o * inner;
                for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
            }
    };
    return detail::make_op("sum_axis", std::move(oshape), std::move(out), {x}, std::move(bw));
}

inline Tensor mean_axis(const Tensor& x, int axis) {
    return mul_scalar(sum_axis(x, axis), 1.0 / static_cast<double>(x.shape()[axis]));
}

// ---------------------------------------------------------------------------
// softmax / layer norm over the last axis

inline Tensor softmax(const Tensor& x) {
    const Shape& s = x.shape();
    if (s.empty()) tensor_fail("softmax: scalar input");
    check_finite(x.data(), "softmax");
    const int64_t cols = s.back();
    const int64_t rows = x.numel() / cols;
    std::vector<double> out(static_cast<size_t>(x.numel()));
    const auto& xd = x.data();
    for (int64_t r = 0; r < rows; ++r) {
        detail::CEArr xr(xd.data() + r * cols, cols);
        detail::EArr yr(out.data() + r * cols, cols);
        yr = xr - xr.maxCoeff();
        detail::fast_exp_inplace(out.data() + r * cols, cols);
        yr *= 1.0 / detail::sum_det(out.data() + r * cols, cols);
    }
    return detail::make_op_self("softmax", s, std::move(out), {x}, [rows, cols](TensorNode* self) {
        return [self, rows, cols](const std::vector<double>& g,
                                  const std::vector<std::vector<double>*>& pg) {
            if (!pg[0]) return;
            auto& gx = *pg[0];
            for (int64_t r = 0; r < rows; ++r) {
                detail::CEArr yr(self->data.data() + r * cols, cols);
                detail::CEArr gr(g.data() + r * cols, cols);
                detail::EArr gxr(gx.data() + r * cols, cols);
                const double dot = detail::dot_det(g.data() + r * cols,
                                                   self->data.data() + r * cols, cols);
                gxr += yr * (gr - dot);
            }
        };
    });
}

/// Non-affine layer normalization over the last axis with population variance.
inline Tensor layer_norm(const Tensor& x, double eps = 1e-5) {
    const Shape& s = x.shape();
    if (s.empty()) tensor_fail("layer_norm: scalar input");
    check_finite(x.data(), "layer_norm");
    const int64_t cols = s.back();
    const int64_t rows = x.numel() / cols;
    std::vector<double> out(static_cast<size_t>(x.numel()));
    std::vector<double> inv_sigma(static_cast<size_t>(rows));
    const auto& xd = x.data();
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = xd.data() + r * cols;
        double mu = 0.0;
        for (int64_t c = 0; c < cols; ++c) mu += xr[c];
        mu /= static_cast<double>(cols);
        double var = 0.0;
        for (int64_t c = 0; c < cols; ++c) var += (xr[c] - mu) * (xr[c] - mu);
        var /= static_cast<double>(cols);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_sigma[r] = is;
        double* yr = out.data() + r * cols;
        for (int64_t c = 0; c < cols; ++c) yr[c] = (xr[c] - mu) * is;
    }
    auto isptr = std::make_shared<std::vector<double>>(std::move(inv_sigma));
    return detail::make_op_self("layer_norm", s, std::move(out), {x},
                                [isptr, rows, cols](TensorNode* self) {
        return [self, isptr, rows, cols](const std::vector<double>& g,
                                         const std::vector<std::vector<double>*>& pg) {
            if (!pg[0]) return;
            auto& gx = *pg[0];
            for (int64_t r = 0; r < rows; ++r) {
                detail::CEArr yr(self->data.data() + r * cols, cols);
                detail::CEArr gr(g.data() + r * cols, cols);
                detail::EArr gxr(gx.data() + r * cols, cols);
                const double gmean =
                    detail::sum_det(g.data() + r * cols, cols) / static_cast<double>(cols);
                const double gydot = detail::dot_det(g.data() + r * cols,
                                                     self->data.data() + r * cols, cols) /
                                     static_cast<double>(cols);
                gxr += (*isptr)[r] * (gr - gmean - yr * gydot);
            }
        };
    });
}

// ---------------------------------------------------------------------------
// operator sugar

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return add_scalar(a, -s); }
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// ---------------------------------------------------------------------------
// finite-difference oracle

/// Central-difference gradient estimate of a scalar-valued function. The
/// oracle never touches the recorded graph; it is the independent reference
/// for every gradient acceptance test.
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                               double h = 1e-5) {
    if (h <= 0.0) tensor_fail("finite_diff_grad: step size must be positive");
    std::vector<double> base = x.data();
    std::vector<double> g(base.size());
    NoGradGuard ng;
    for (size_t i = 0; i < base.size(); ++i) {
        std::vector<double> lo = base, hi = base;
        hi[i] += h;
        lo[i] -= h;
        const double fp = f(Tensor::from_data(x.shape(), std::move(hi)));
        const double fm = f(Tensor::from_data(x.shape(), std::move(lo)));
        g[i] = (fp - fm) / (2.0 * h);
    }
    return Tensor::from_data(x.shape(), std::move(g));
}

/// Max relative error; differences at or below the absolute floor count as
/// exact so that near-zero gradient entries are compared absolutely.
inline double grad_max_rel_err(const std::vector<double>& got, const std::vector<double>& want,
                               double abs_floor = 1e-8) {
    double worst = 0.0;
    for (size_t i = 0; i < got.size(); ++i) {
        const double diff = std::abs(got[i] - want[i]);
        if (diff <= abs_floor) continue;
        worst = std::max(worst, diff / std::max(std::abs(want[i]), abs_floor));
    }
    return worst;
}

}  // namespace dualflow

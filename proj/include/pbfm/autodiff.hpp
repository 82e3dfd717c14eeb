#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

// Reverse-mode autodiff on dense 64-bit tensors. Define-by-run: every op
// appends a node holding its value and a closure for the vector-Jacobian
// product; backward() topologically sorts the reachable subgraph and runs
// the closures once each. Graphs are rebuilt per training step.

namespace pbfm::ad {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel_of(const Shape& s) {
    std::int64_t n = 1;
    for (auto e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // sized by backward(), empty otherwise
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward_fn;
    const char* op = "leaf";
};

using NodePtr = std::shared_ptr<Node>;

inline bool& grad_mode() {
    thread_local bool on = true;
    return on;
}

}  // namespace detail

class Tensor {
  public:
    Tensor() = default;

    static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
        if (numel_of(shape) != static_cast<std::int64_t>(data.size()))
            throw ShapeError("tensor: data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        auto n = std::make_shared<detail::Node>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        auto count = numel_of(shape);
        return from(std::move(shape), std::vector<double>(count, 0.0), requires_grad);
    }

    static Tensor full(Shape shape, double v, bool requires_grad = false) {
        auto count = numel_of(shape);
        return from(std::move(shape), std::vector<double>(count, v), requires_grad);
    }

    static Tensor scalar(double v) { return from({1}, {v}); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::int64_t numel() const { return static_cast<std::int64_t>(node_->value.size()); }
    bool requires_grad() const { return node_->requires_grad; }

    const std::vector<double>& value() const { return node_->value; }
    // In-place value access; used by the optimizer on leaf parameters only.
    std::vector<double>& mutable_value() { return node_->value; }

    // Gradient after a backward() whose cone reached this tensor. Empty or
    // stale otherwise; callers that need "zero if untouched" should use
    // zero_grads() beforehand.
    const std::vector<double>& grad() const { return node_->grad; }

    double item() const {
        if (numel() != 1) throw ShapeError("item: tensor is not scalar, shape " + shape_str(shape()));
        return node_->value[0];
    }

    detail::NodePtr node() const { return node_; }

    explicit Tensor(detail::NodePtr n) : node_(std::move(n)) {}

  private:
    detail::NodePtr node_;
};

// Disables graph recording in scope; ops produce leaf results.
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

namespace detail {

inline Tensor make_op(const char* op, Shape shape, std::vector<double> value,
                      std::initializer_list<Tensor> ins, std::function<void(Node&)> backward) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->op = op;
    bool rg = false;
    for (const auto& t : ins) rg = rg || t.requires_grad();
    if (rg && grad_mode()) {
        n->requires_grad = true;
        n->inputs.reserve(ins.size());
        for (const auto& t : ins) n->inputs.push_back(t.node());
        n->backward_fn = std::move(backward);
    }
    return Tensor(std::move(n));
}

inline std::vector<double>& grad_of(const NodePtr& n) { return n->grad; }

}  // namespace detail

// Resets gradient buffers. Call on parameters before backward() when a loss
// may not reach all of them.
inline void zero_grads(const std::vector<Tensor>& ts) {
    for (const auto& t : ts) {
        auto n = t.node();
        n->grad.assign(n->value.size(), 0.0);
    }
}

// Reverse pass from a scalar loss. Zeroes gradients of every reachable node
// first, so repeated calls (e.g. two loss heads off one forward pass) are
// independent of each other.
inline void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw ShapeError("backward: loss must be a defined scalar");
    auto root = loss.node();
    if (!root->requires_grad) {
        root->grad.assign(1, 0.0);
        return;
    }

    // iterative postorder over requires_grad nodes
    std::vector<detail::Node*> topo;
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            detail::Node* in = node->inputs[next++].get();
            if (in->requires_grad && seen.insert(in).second) stack.emplace_back(in, 0);
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }

    for (auto* n : topo) n->grad.assign(n->value.size(), 0.0);
    root->grad[0] = 1.0;
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        detail::Node* n = *it;
        if (n->backward_fn) n->backward_fn(*n);
    }
}

// ---------------------------------------------------------------------------
// elementwise binary ops; operands must be same-shape, or one a scalar

namespace detail {

enum class BinKind { Same, ScalarLhs, ScalarRhs };

inline BinKind bin_kind(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() == b.shape()) return BinKind::Same;
    if (a.numel() == 1) return BinKind::ScalarLhs;
    if (b.numel() == 1) return BinKind::ScalarRhs;
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    const auto kind = detail::bin_kind("add", a, b);
    const auto& av = a.value();
    const auto& bv = b.value();
    const auto& big = (kind == detail::BinKind::ScalarLhs) ? bv : av;
    std::vector<double> out(big.size());
    switch (kind) {
        case detail::BinKind::Same:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
            break;
        case detail::BinKind::ScalarLhs:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[0] + bv[i];
            break;
        case detail::BinKind::ScalarRhs:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[0];
            break;
    }
    Shape shape = (kind == detail::BinKind::ScalarLhs) ? b.shape() : a.shape();
    auto an = a.node(), bn = b.node();
    return detail::make_op("add", std::move(shape), std::move(out), {a, b},
                           [an, bn, kind](detail::Node& self) {
                               const auto& g = self.grad;
                               if (an->requires_grad) {
                                   if (kind == detail::BinKind::ScalarLhs) {
                                       double s = 0;
                                       for (double gi : g) s += gi;
                                       an->grad[0] += s;
                                   } else {
                                       for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i];
                                   }
                               }
                               if (bn->requires_grad) {
                                   if (kind == detail::BinKind::ScalarRhs) {
                                       double s = 0;
                                       for (double gi : g) s += gi;
                                       bn->grad[0] += s;
                                   } else {
                                       for (std::size_t i = 0; i < g.size(); ++i) bn->grad[i] += g[i];
                                   }
                               }
                           });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    const auto kind = detail::bin_kind("sub", a, b);
    const auto& av = a.value();
    const auto& bv = b.value();
    const auto& big = (kind == detail::BinKind::ScalarLhs) ? bv : av;
    std::vector<double> out(big.size());
    switch (kind) {
        case detail::BinKind::Same:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
            break;
        case detail::BinKind::ScalarLhs:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[0] - bv[i];
            break;
        case detail::BinKind::ScalarRhs:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[0];
            break;
    }
    Shape shape = (kind == detail::BinKind::ScalarLhs) ? b.shape() : a.shape();
    auto an = a.node(), bn = b.node();
    return detail::make_op("sub", std::move(shape), std::move(out), {a, b},
                           [an, bn, kind](detail::Node& self) {
                               const auto& g = self.grad;
                               if (an->requires_grad) {
                                   if (kind == detail::BinKind::ScalarLhs) {
                                       double s = 0;
                                       for (double gi : g) s += gi;
                                       an->grad[0] += s;
                                   } else {
                                       for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i];
                                   }
                               }
                               if (bn->requires_grad) {
                                   if (kind == detail::BinKind::ScalarRhs) {
                                       double s = 0;
                                       for (double gi : g) s += gi;
                                       bn->grad[0] -= s;
                                   } else {
                                       for (std::size_t i = 0; i < g.size(); ++i) bn->grad[i] -= g[i];
                                   }
                               }
                           });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    const auto kind = detail::bin_kind("mul", a, b);
    const auto& av = a.value();
    const auto& bv = b.value();
    const auto& big = (kind == detail::BinKind::ScalarLhs) ? bv : av;
    std::vector<double> out(big.size());
    switch (kind) {
        case detail::BinKind::Same:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
            break;
        case detail::BinKind::ScalarLhs:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[0] * bv[i];
            break;
        case detail::BinKind::ScalarRhs:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[0];
            break;
    }
    Shape shape = (kind == detail::BinKind::ScalarLhs) ? b.shape() : a.shape();
    auto an = a.node(), bn = b.node();
    return detail::make_op(
        "mul", std::move(shape), std::move(out), {a, b}, [an, bn, kind](detail::Node& self) {
            const auto& g = self.grad;
            const auto& av = an->value;
            const auto& bv = bn->value;
            if (an->requires_grad) {
                if (kind == detail::BinKind::ScalarLhs) {
                    double s = 0;
                    for (std::size_t i = 0; i < g.size(); ++i) s += g[i] * bv[i];
                    an->grad[0] += s;
                } else if (kind == detail::BinKind::ScalarRhs) {
                    for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i] * bv[0];
                } else {
                    for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i] * bv[i];
                }
            }
            if (bn->requires_grad) {
                if (kind == detail::BinKind::ScalarRhs) {
                    double s = 0;
                    for (std::size_t i = 0; i < g.size(); ++i) s += g[i] * av[i];
                    bn->grad[0] += s;
                } else if (kind == detail::BinKind::ScalarLhs) {
                    for (std::size_t i = 0; i < g.size(); ++i) bn->grad[i] += g[i] * av[0];
                } else {
                    for (std::size_t i = 0; i < g.size(); ++i) bn->grad[i] += g[i] * av[i];
                }
            }
        });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    const auto kind = detail::bin_kind("div", a, b);
    const auto& av = a.value();
    const auto& bv = b.value();
    const auto& big = (kind == detail::BinKind::ScalarLhs) ? bv : av;
    std::vector<double> out(big.size());
    switch (kind) {
        case detail::BinKind::Same:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[i];
            break;
        case detail::BinKind::ScalarLhs:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[0] / bv[i];
            break;
        case detail::BinKind::ScalarRhs:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[0];
            break;
    }
    Shape shape = (kind == detail::BinKind::ScalarLhs) ? b.shape() : a.shape();
    auto an = a.node(), bn = b.node();
    return detail::make_op(
        "div", std::move(shape), std::move(out), {a, b}, [an, bn, kind](detail::Node& self) {
            const auto& g = self.grad;
            const auto& av = an->value;
            const auto& bv = bn->value;
            if (an->requires_grad) {
                if (kind == detail::BinKind::ScalarLhs) {
                    double s = 0;
                    for (std::size_t i = 0; i < g.size(); ++i) s += g[i] / bv[i];
                    an->grad[0] += s;
                } else if (kind == detail::BinKind::ScalarRhs) {
                    for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i] / bv[0];
                } else {
                    for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i] / bv[i];
                }
            }
            if (bn->requires_grad) {
                if (kind == detail::BinKind::ScalarRhs) {
                    double s = 0;
                    for (std::size_t i = 0; i < g.size(); ++i) s += g[i] * av[i];
                    bn->grad[0] -= s / (bv[0] * bv[0]);
                } else if (kind == detail::BinKind::ScalarLhs) {
                    for (std::size_t i = 0; i < g.size(); ++i)
                        bn->grad[i] -= g[i] * av[0] / (bv[i] * bv[i]);
                } else {
                    for (std::size_t i = 0; i < g.size(); ++i)
                        bn->grad[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                }
            }
        });
}

// ---------------------------------------------------------------------------
// unary ops

namespace detail {

template <class Fwd, class Bwd>
Tensor unary_op(const char* op, const Tensor& a, Fwd fwd, Bwd bwd) {
    const auto& av = a.value();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
    auto an = a.node();
    return make_op(op, a.shape(), std::move(out), {a}, [an, bwd](Node& self) {
        if (!an->requires_grad) return;
        const auto& g = self.grad;
        const auto& x = an->value;
        const auto& y = self.value;
        for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i] * bwd(x[i], y[i]);
    });
}

inline double sigmoid_val(double x) {
    return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

}  // namespace detail

inline Tensor neg(const Tensor& a) {
    return detail::unary_op(
        "neg", a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

inline Tensor sigmoid(const Tensor& a) {
    return detail::unary_op(
        "sigmoid", a, [](double x) { return detail::sigmoid_val(x); },
        [](double, double y) { return y * (1.0 - y); });
}

inline Tensor silu(const Tensor& a) {
    // the forward sigmoid is cached for the backward pass
    const auto& av = a.value();
    std::vector<double> sig(av.size()), out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) {
        sig[i] = detail::sigmoid_val(av[i]);
        out[i] = av[i] * sig[i];
    }
    auto an = a.node();
    return detail::make_op("silu", a.shape(), std::move(out), {a},
                           [an, sig = std::move(sig)](detail::Node& self) {
                               if (!an->requires_grad) return;
                               const auto& g = self.grad;
                               const auto& x = an->value;
                               for (std::size_t i = 0; i < g.size(); ++i)
                                   an->grad[i] += g[i] * sig[i] * (1.0 + x[i] * (1.0 - sig[i]));
                           });
}

inline Tensor sin(const Tensor& a) {
    return detail::unary_op(
        "sin", a, [](double x) { return std::sin(x); },
        [](double x, double) { return std::cos(x); });
}

inline Tensor cos(const Tensor& a) {
    return detail::unary_op(
        "cos", a, [](double x) { return std::cos(x); },
        [](double x, double) { return -std::sin(x); });
}

inline Tensor exp(const Tensor& a) {
    return detail::unary_op(
        "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor sqrt(const Tensor& a) {
    return detail::unary_op(
        "sqrt", a, [](double x) { return std::sqrt(x); },
        [](double, double y) { return 0.5 / y; });
}

inline Tensor abs(const Tensor& a) {
    return detail::unary_op(
        "abs", a, [](double x) { return std::abs(x); },
        [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

// exponent is a plain constant, not a tensor
inline Tensor pow(const Tensor& a, double p) {
    return detail::unary_op(
        "pow", a, [p](double x) { return std::pow(x, p); },
        [p](double x, double) { return p * std::pow(x, p - 1.0); });
}

// subgradient 0 at x == lo
inline Tensor clamp_min(const Tensor& a, double lo) {
    return detail::unary_op(
        "clamp_min", a, [lo](double x) { return x > lo ? x : lo; },
        [lo](double x, double) { return x > lo ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// reductions

inline Tensor sum(const Tensor& a) {
    double s = 0;
    for (double v : a.value()) s += v;
    auto an = a.node();
    return detail::make_op("sum", {1}, {s}, {a}, [an](detail::Node& self) {
        if (!an->requires_grad) return;
        const double g = self.grad[0];
        for (auto& gi : an->grad) gi += g;
    });
}

inline Tensor mean(const Tensor& a) {
    const double n = static_cast<double>(a.numel());
    double s = 0;
    for (double v : a.value()) s += v;
    auto an = a.node();
    return detail::make_op("mean", {1}, {s / n}, {a}, [an, n](detail::Node& self) {
        if (!an->requires_grad) return;
        const double g = self.grad[0] / n;
        for (auto& gi : an->grad) gi += g;
    });
}

// ---------------------------------------------------------------------------
// matmul  [M,K] x [K,N] -> [M,N]

namespace detail {
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;
}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    const std::int64_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    std::vector<double> out(static_cast<std::size_t>(m * n));
    detail::ConstMap A(a.value().data(), m, k);
    detail::ConstMap B(b.value().data(), k, n);
    detail::MutMap(out.data(), m, n).noalias() = A * B;
    auto an = a.node(), bn = b.node();
    return detail::make_op("matmul", {m, n}, std::move(out), {a, b},
                           [an, bn, m, k, n](detail::Node& self) {
                               detail::ConstMap G(self.grad.data(), m, n);
                               if (an->requires_grad) {
                                   detail::ConstMap B(bn->value.data(), k, n);
                                   detail::MutMap(an->grad.data(), m, k).noalias() += G * B.transpose();
                               }
                               if (bn->requires_grad) {
                                   detail::ConstMap A(an->value.data(), m, k);
                                   detail::MutMap(bn->grad.data(), k, n).noalias() += A.transpose() * G;
                               }
                           });
}

// ---------------------------------------------------------------------------
// shape ops

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (numel_of(shape) != a.numel())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    auto an = a.node();
    return detail::make_op("reshape", std::move(shape), a.value(), {a}, [an](detail::Node& self) {
        if (!an->requires_grad) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    });
}

// half-open range [start, stop) along one axis
inline Tensor slice(const Tensor& a, int axis, std::int64_t start, std::int64_t stop) {
    const auto& s = a.shape();
    if (axis < 0 || axis >= static_cast<int>(s.size()))
        throw ShapeError("slice: axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    if (start < 0 || stop > s[axis] || start >= stop)
        throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(stop) +
                         ") invalid for extent " + std::to_string(s[axis]));
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::int64_t ext = s[axis], len = stop - start;
    Shape oshape = s;
    oshape[axis] = len;
    std::vector<double> out(static_cast<std::size_t>(outer * len * inner));
    const double* src = a.value().data();
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t j = 0; j < len; ++j) {
            const double* sp = src + (o * ext + start + j) * inner;
            double* dp = out.data() + (o * len + j) * inner;
            std::copy(sp, sp + inner, dp);
        }
    auto an = a.node();
    return detail::make_op("slice", std::move(oshape), std::move(out), {a},
                           [an, outer, inner, ext, start, len](detail::Node& self) {
                               if (!an->requires_grad) return;
                               const double* g = self.grad.data();
                               double* dst = an->grad.data();
                               for (std::int64_t o = 0; o < outer; ++o)
                                   for (std::int64_t j = 0; j < len; ++j) {
                                       const double* gp = g + (o * len + j) * inner;
                                       double* dp = dst + (o * ext + start + j) * inner;
                                       for (std::int64_t i = 0; i < inner; ++i) dp[i] += gp[i];
                                   }
                           });
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const auto& s0 = parts[0].shape();
    if (axis < 0 || axis >= static_cast<int>(s0.size()))
        throw ShapeError("concat: axis " + std::to_string(axis) + " out of range for " + shape_str(s0));
    std::int64_t outer = 1, inner = 1, total = 0;
    for (int i = 0; i < axis; ++i) outer *= s0[i];
    for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
    for (const auto& p : parts) {
        const auto& sp = p.shape();
        if (sp.size() != s0.size())
            throw ShapeError("concat: rank mismatch " + shape_str(sp) + " vs " + shape_str(s0));
        for (std::size_t i = 0; i < s0.size(); ++i)
            if (static_cast<int>(i) != axis && sp[i] != s0[i])
                throw ShapeError("concat: shape mismatch " + shape_str(sp) + " vs " + shape_str(s0));
        total += sp[axis];
    }
    Shape oshape = s0;
    oshape[axis] = total;
    std::vector<double> out(static_cast<std::size_t>(outer * total * inner));
    std::int64_t off = 0;
    for (const auto& p : parts) {
        const std::int64_t ext = p.shape()[axis];
        const double* src = p.value().data();
        for (std::int64_t o = 0; o < outer; ++o) {
            const double* sp = src + o * ext * inner;
            double* dp = out.data() + (o * total + off) * inner;
            std::copy(sp, sp + ext * inner, dp);
        }
        off += ext;
    }

    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(oshape);
    n->value = std::move(out);
    n->op = "concat";
    bool rg = false;
    for (const auto& p : parts) rg = rg || p.requires_grad();
    if (rg && detail::grad_mode()) {
        n->requires_grad = true;
        for (const auto& p : parts) n->inputs.push_back(p.node());
        std::vector<std::int64_t> exts;
        for (const auto& p : parts) exts.push_back(p.shape()[axis]);
        n->backward_fn = [outer, inner, total, exts](detail::Node& self) {
            std::int64_t off = 0;
            for (std::size_t pi = 0; pi < self.inputs.size(); ++pi) {
                auto& in = self.inputs[pi];
                const std::int64_t ext = exts[pi];
                if (in->requires_grad) {
                    const double* g = self.grad.data();
                    double* dst = in->grad.data();
                    for (std::int64_t o = 0; o < outer; ++o) {
                        const double* gp = g + (o * total + off) * inner;
                        double* dp = dst + o * ext * inner;
                        for (std::int64_t i = 0; i < ext * inner; ++i) dp[i] += gp[i];
                    }
                }
                off += ext;
            }
        };
    }
    return Tensor(std::move(n));
}

// ---------------------------------------------------------------------------
// broadcast expansions (explicit, so the reductions in the backward pass are
// unambiguous)

// [N] -> [B,N]
inline Tensor expand_rows(const Tensor& v, std::int64_t rows) {
    if (v.shape().size() != 1) throw ShapeError("expand_rows: expected rank-1, got " + shape_str(v.shape()));
    const std::int64_t n = v.shape()[0];
    std::vector<double> out(static_cast<std::size_t>(rows * n));
    for (std::int64_t b = 0; b < rows; ++b)
        std::copy(v.value().begin(), v.value().end(), out.begin() + b * n);
    auto vn = v.node();
    return detail::make_op("expand_rows", {rows, n}, std::move(out), {v},
                           [vn, rows, n](detail::Node& self) {
                               if (!vn->requires_grad) return;
                               for (std::int64_t b = 0; b < rows; ++b)
                                   for (std::int64_t i = 0; i < n; ++i)
                                       vn->grad[i] += self.grad[b * n + i];
                           });
}

// [B] -> [B, rest...]; per-sample scalar broadcast over everything else
inline Tensor expand_persample(const Tensor& w, Shape rest) {
    if (w.shape().size() != 1)
        throw ShapeError("expand_persample: expected rank-1, got " + shape_str(w.shape()));
    const std::int64_t b = w.shape()[0];
    const std::int64_t inner = numel_of(rest);
    Shape oshape;
    oshape.push_back(b);
    for (auto e : rest) oshape.push_back(e);
    std::vector<double> out(static_cast<std::size_t>(b * inner));
    for (std::int64_t i = 0; i < b; ++i)
        std::fill(out.begin() + i * inner, out.begin() + (i + 1) * inner, w.value()[i]);
    auto wn = w.node();
    return detail::make_op("expand_persample", std::move(oshape), std::move(out), {w},
                           [wn, b, inner](detail::Node& self) {
                               if (!wn->requires_grad) return;
                               for (std::int64_t i = 0; i < b; ++i) {
                                   double s = 0;
                                   const double* g = self.grad.data() + i * inner;
                                   for (std::int64_t j = 0; j < inner; ++j) s += g[j];
                                   wn->grad[i] += s;
                               }
                           });
}

// [B,C] -> [B,C,H,W]
inline Tensor expand_spatial(const Tensor& s, std::int64_t h, std::int64_t w) {
    if (s.shape().size() != 2)
        throw ShapeError("expand_spatial: expected rank-2, got " + shape_str(s.shape()));
    const std::int64_t bc = s.numel(), hw = h * w;
    std::vector<double> out(static_cast<std::size_t>(bc * hw));
    for (std::int64_t i = 0; i < bc; ++i)
        std::fill(out.begin() + i * hw, out.begin() + (i + 1) * hw, s.value()[i]);
    auto sn = s.node();
    return detail::make_op("expand_spatial", {s.shape()[0], s.shape()[1], h, w}, std::move(out), {s},
                           [sn, bc, hw](detail::Node& self) {
                               if (!sn->requires_grad) return;
                               for (std::int64_t i = 0; i < bc; ++i) {
                                   double acc = 0;
                                   const double* g = self.grad.data() + i * hw;
                                   for (std::int64_t j = 0; j < hw; ++j) acc += g[j];
                                   sn->grad[i] += acc;
                               }
                           });
}

// [C] -> [B,C,H,W]
inline Tensor expand_chan(const Tensor& c, std::int64_t b, std::int64_t h, std::int64_t w) {
    if (c.shape().size() != 1)
        throw ShapeError("expand_chan: expected rank-1, got " + shape_str(c.shape()));
    const std::int64_t nc = c.shape()[0], hw = h * w;
    std::vector<double> out(static_cast<std::size_t>(b * nc * hw));
    for (std::int64_t bi = 0; bi < b; ++bi)
        for (std::int64_t ci = 0; ci < nc; ++ci)
            std::fill(out.begin() + (bi * nc + ci) * hw, out.begin() + (bi * nc + ci + 1) * hw,
                      c.value()[ci]);
    auto cn = c.node();
    return detail::make_op("expand_chan", {b, nc, h, w}, std::move(out), {c},
                           [cn, b, nc, hw](detail::Node& self) {
                               if (!cn->requires_grad) return;
                               for (std::int64_t bi = 0; bi < b; ++bi)
                                   for (std::int64_t ci = 0; ci < nc; ++ci) {
                                       double acc = 0;
                                       const double* g = self.grad.data() + (bi * nc + ci) * hw;
                                       for (std::int64_t j = 0; j < hw; ++j) acc += g[j];
                                       cn->grad[ci] += acc;
                                   }
                           });
}

// per-(batch,channel) spatial mean: [B,C,H,W] -> [B,C]
inline Tensor spatial_mean(const Tensor& x) {
    if (x.shape().size() != 4)
        throw ShapeError("spatial_mean: expected rank-4, got " + shape_str(x.shape()));
    const std::int64_t bc = x.shape()[0] * x.shape()[1], hw = x.shape()[2] * x.shape()[3];
    std::vector<double> out(static_cast<std::size_t>(bc));
    for (std::int64_t i = 0; i < bc; ++i) {
        double s = 0;
        const double* p = x.value().data() + i * hw;
        for (std::int64_t j = 0; j < hw; ++j) s += p[j];
        out[i] = s / static_cast<double>(hw);
    }
    auto xn = x.node();
    return detail::make_op("spatial_mean", {x.shape()[0], x.shape()[1]}, std::move(out), {x},
                           [xn, bc, hw](detail::Node& self) {
                               if (!xn->requires_grad) return;
                               for (std::int64_t i = 0; i < bc; ++i) {
                                   const double g = self.grad[i] / static_cast<double>(hw);
                                   double* d = xn->grad.data() + i * hw;
                                   for (std::int64_t j = 0; j < hw; ++j) d[j] += g;
                               }
                           });
}

// ---------------------------------------------------------------------------
// operators and small conveniences

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator+(const Tensor& a, double c) { return add(a, Tensor::scalar(c)); }
inline Tensor operator+(double c, const Tensor& a) { return add(Tensor::scalar(c), a); }
inline Tensor operator-(const Tensor& a, double c) { return sub(a, Tensor::scalar(c)); }
inline Tensor operator-(double c, const Tensor& a) { return sub(Tensor::scalar(c), a); }
inline Tensor operator*(const Tensor& a, double c) { return mul(a, Tensor::scalar(c)); }
inline Tensor operator*(double c, const Tensor& a) { return mul(Tensor::scalar(c), a); }
inline Tensor operator/(const Tensor& a, double c) { return div(a, Tensor::scalar(c)); }
inline Tensor operator/(double c, const Tensor& a) { return div(Tensor::scalar(c), a); }

inline Tensor square(const Tensor& a) { return mul(a, a); }

inline Tensor mse(const Tensor& a, const Tensor& b) { return mean(square(sub(a, b))); }

}  // namespace pbfm::ad

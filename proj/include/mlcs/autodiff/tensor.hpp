#pragma once

// Dense row-major tensors of doubles with reverse-mode differentiation.
//
// Every op returns a new Tensor. When at least one input requires a gradient
// the result keeps references to its inputs plus a closure that pushes the
// result's gradient back into them; otherwise no graph is recorded, so
// inference passes cost nothing beyond the arithmetic.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mlcs/error.hpp"

namespace mlcs::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until a gradient reaches this node
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;
    const char* op = "leaf";

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

class Tensor {
public:
    Tensor() : node_(std::make_shared<Node>()) { node_->shape = {0}; }

    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
        : node_(std::make_shared<Node>()) {
        for (auto d : shape)
            if (d == 0) throw DimensionError("tensor shape " + to_string(shape) + " has a zero extent");
        if (numel(shape) != data.size())
            throw DimensionError("shape " + to_string(shape) + " does not hold " +
                                 std::to_string(data.size()) + " values");
        node_->shape = std::move(shape);
        node_->data = std::move(data);
        node_->requires_grad = requires_grad;
    }

    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        auto n = numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }
    static Tensor filled(Shape shape, double value) {
        auto n = numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, value));
    }
    static Tensor scalar(double v, bool requires_grad = false) { return Tensor({1}, {v}, requires_grad); }
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data,
                         bool requires_grad = false) {
        return Tensor({rows, cols}, std::move(data), requires_grad);
    }

    const Shape& shape() const { return node_->shape; }
    std::size_t size() const { return node_->data.size(); }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t rows() const { return rank() == 2 ? node_->shape[0] : 1; }
    std::size_t cols() const { return rank() == 2 ? node_->shape[1] : node_->shape[0]; }

    std::span<const double> data() const { return node_->data; }
    std::span<double> mutable_data() { return node_->data; }
    std::span<const double> grad() const { return node_->grad; }
    std::span<double> mutable_grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    bool has_grad() const { return node_->grad.size() == node_->data.size(); }
    void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

    double operator[](std::size_t i) const { return node_->data[i]; }
    double at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }
    double item() const {
        if (size() != 1) throw DimensionError("item() on tensor of shape " + to_string(shape()));
        return node_->data[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    bool is_leaf() const { return node_->inputs.empty(); }
    const char* op() const { return node_->op; }

    /// Copy of the values with no gradient history.
    Tensor detach() const { return Tensor(shape(), node_->data, false); }

    const std::shared_ptr<Node>& node() const { return node_; }
    bool same_node(const Tensor& other) const { return node_ == other.node_; }

private:
    std::shared_ptr<Node> node_;
};

namespace detail {

inline Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                          std::vector<Tensor> inputs, std::function<void(Node&)> backward) {
    auto node = std::make_shared<Node>();
    node->op = op;
    node->shape = std::move(shape);
    node->data = std::move(data);
    bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
    if (any) {
        node->requires_grad = true;
        node->inputs.reserve(inputs.size());
        for (auto& t : inputs) node->inputs.push_back(t.node());
        node->backward = std::move(backward);
    }
    return Tensor(std::move(node));
}

// Gradient buffer of input `i` if it needs one, else nullptr.
inline double* grad_of(Node& self, std::size_t i) {
    auto& in = *self.inputs[i];
    if (!in.requires_grad) return nullptr;
    in.ensure_grad();
    return in.grad.data();
}

inline void require_matrix(const Tensor& t, const char* what) {
    if (t.rank() != 2)
        throw DimensionError(std::string(what) + " expects a matrix, got " + to_string(t.shape()));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(what) + ": shapes " + to_string(a.shape()) + " and " +
                             to_string(b.shape()) + " differ");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// out = x·w + b for x [batch×in], w [in×out], b [out].
inline Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
    detail::require_matrix(x, "affine input");
    detail::require_matrix(w, "affine weight");
    const std::size_t n = x.rows(), in = x.cols(), out = w.cols();
    if (w.rows() != in || b.size() != out)
        throw DimensionError("affine: input " + to_string(x.shape()) + " incompatible with weight " +
                             to_string(w.shape()) + " and bias " + to_string(b.shape()));
    std::vector<double> y(n * out);
    const double* xd = x.data().data();
    const double* wd = w.data().data();
    const double* bd = b.data().data();
    for (std::size_t i = 0; i < n; ++i) {
        double* yi = y.data() + i * out;
        std::copy(bd, bd + out, yi);
        const double* xi = xd + i * in;
        for (std::size_t k = 0; k < in; ++k) {
            const double xv = xi[k];
            if (xv == 0.0) continue;
            const double* wk = wd + k * out;
            for (std::size_t j = 0; j < out; ++j) yi[j] += xv * wk[j];
        }
    }
    return detail::make_result("affine", {n, out}, std::move(y), {x, w, b}, [n, in, out](Node& self) {
        const double* g = self.grad.data();
        const auto& xs = self.inputs[0]->data;
        const auto& ws = self.inputs[1]->data;
        if (double* gx = detail::grad_of(self, 0)) {
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t k = 0; k < in; ++k) {
                    const double* wk = ws.data() + k * out;
                    const double* gi = g + i * out;
                    double acc = 0.0;
                    for (std::size_t j = 0; j < out; ++j) acc += gi[j] * wk[j];
                    gx[i * in + k] += acc;
                }
        }
        if (double* gw = detail::grad_of(self, 1)) {
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t k = 0; k < in; ++k) {
                    const double xv = xs[i * in + k];
                    if (xv == 0.0) continue;
                    double* gwk = gw + k * out;
                    const double* gi = g + i * out;
                    for (std::size_t j = 0; j < out; ++j) gwk[j] += xv * gi[j];
                }
        }
        if (double* gb = detail::grad_of(self, 2)) {
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < out; ++j) gb[j] += g[i * out + j];
        }
    });
}

/// Column-wise concatenation of matrices sharing a row count.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ArgumentError("concat_cols of zero tensors");
    const std::size_t n = parts.front().rows();
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (const auto& p : parts) {
        detail::require_matrix(p, "concat_cols");
        if (p.rows() != n)
            throw DimensionError("concat_cols: row counts " + to_string(parts.front().shape()) + " and " +
                                 to_string(p.shape()) + " differ");
        widths.push_back(p.cols());
        total += p.cols();
    }
    std::vector<double> out(n * total);
    std::size_t offset = 0;
    for (std::size_t t = 0; t < parts.size(); ++t) {
        const double* src = parts[t].data().data();
        for (std::size_t i = 0; i < n; ++i)
            std::copy(src + i * widths[t], src + (i + 1) * widths[t], out.data() + i * total + offset);
        offset += widths[t];
    }
    return detail::make_result("concat_cols", {n, total}, std::move(out), parts, [n, total, widths](Node& self) {
        std::size_t off = 0;
        for (std::size_t t = 0; t < widths.size(); ++t) {
            if (double* gt = detail::grad_of(self, t)) {
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < widths[t]; ++j) gt[i * widths[t] + j] += self.grad[i * total + off + j];
            }
            off += widths[t];
        }
    });
}

// ---------------------------------------------------------------------------
// Elementwise

namespace detail {

template <class Fwd, class Deriv>
Tensor unary(const char* op, const Tensor& x, Fwd fwd, Deriv deriv) {
    std::vector<double> y(x.size());
    const auto xd = x.data();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = fwd(xd[i]);
    return make_result(op, x.shape(), std::move(y), {x}, [deriv](Node& self) {
        if (double* gx = grad_of(self, 0)) {
            const auto& xs = self.inputs[0]->data;
            for (std::size_t i = 0; i < xs.size(); ++i) gx[i] += self.grad[i] * deriv(xs[i], self.data[i]);
        }
    });
}

}  // namespace detail

inline Tensor leaky_relu(const Tensor& x, double slope) {
    if (!(slope >= 0.0 && slope < 1.0)) throw ArgumentError("leaky_relu slope must lie in [0,1)");
    return detail::unary(
        "leaky_relu", x, [slope](double v) { return v >= 0.0 ? v : slope * v; },
        [slope](double v, double) { return v >= 0.0 ? 1.0 : slope; });
}

inline Tensor relu(const Tensor& x) { return leaky_relu(x, 0.0); }

/// Exponent arguments are clamped to this bound so exp() never overflows.
inline constexpr double kExpClamp = 30.0;

inline double stable_sigmoid(double v) {
    v = std::clamp(v, -kExpClamp, kExpClamp);
    return 1.0 / (1.0 + std::exp(-v));
}

inline Tensor sigmoid(const Tensor& x) {
    return detail::unary("sigmoid", x, stable_sigmoid, [](double, double s) { return s * (1.0 - s); });
}

inline Tensor tanh(const Tensor& x) {
    return detail::unary("tanh", x, [](double v) { return std::tanh(v); },
                         [](double, double t) { return 1.0 - t * t; });
}

inline Tensor scale(const Tensor& x, double c) {
    return detail::unary("scale", x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<double> y(a.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] + b[i];
    return detail::make_result("add", a.shape(), std::move(y), {a, b}, [](Node& self) {
        for (std::size_t t = 0; t < 2; ++t)
            if (double* g = detail::grad_of(self, t))
                for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<double> y(a.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] - b[i];
    return detail::make_result("sub", a.shape(), std::move(y), {a, b}, [](Node& self) {
        if (double* g = detail::grad_of(self, 0))
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        if (double* g = detail::grad_of(self, 1))
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<double> y(a.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] * b[i];
    return detail::make_result("mul", a.shape(), std::move(y), {a, b}, [](Node& self) {
        const auto& ad = self.inputs[0]->data;
        const auto& bd = self.inputs[1]->data;
        if (double* g = detail::grad_of(self, 0))
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bd[i];
        if (double* g = detail::grad_of(self, 1))
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * ad[i];
    });
}

/// Per-row mixture p·pos + (1−p)·neg for p [n×1] and pos, neg [n×m].
inline Tensor mix(const Tensor& p, const Tensor& pos, const Tensor& neg) {
    detail::require_same_shape(pos, neg, "mix");
    detail::require_matrix(pos, "mix");
    const std::size_t n = pos.rows(), m = pos.cols();
    if (p.size() != n) throw DimensionError("mix: weights " + to_string(p.shape()) + " vs rows of " + to_string(pos.shape()));
    std::vector<double> y(n * m);
    for (std::size_t i = 0; i < n; ++i) {
        const double w = p[i];
        for (std::size_t j = 0; j < m; ++j) y[i * m + j] = w * pos[i * m + j] + (1.0 - w) * neg[i * m + j];
    }
    return detail::make_result("mix", {n, m}, std::move(y), {p, pos, neg}, [n, m](Node& self) {
        const auto& pd = self.inputs[0]->data;
        const auto& posd = self.inputs[1]->data;
        const auto& negd = self.inputs[2]->data;
        const double* g = self.grad.data();
        if (double* gp = detail::grad_of(self, 0))
            for (std::size_t i = 0; i < n; ++i) {
                double acc = 0.0;
                for (std::size_t j = 0; j < m; ++j) acc += g[i * m + j] * (posd[i * m + j] - negd[i * m + j]);
                gp[i] += acc;
            }
        if (double* gpos = detail::grad_of(self, 1))
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j) gpos[i * m + j] += g[i * m + j] * pd[i];
        if (double* gneg = detail::grad_of(self, 2))
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j) gneg[i * m + j] += g[i * m + j] * (1.0 - pd[i]);
    });
}

/// Replaces entries where `fixed[i]` is 0 or 1 by that value; entries marked
/// -1 pass through. Replaced entries receive no gradient.
inline Tensor override_values(const Tensor& x, std::span<const std::int8_t> fixed) {
    if (fixed.size() != x.size())
        throw DimensionError("override_values: " + std::to_string(fixed.size()) + " flags for tensor " +
                             to_string(x.shape()));
    std::vector<double> y(x.data().begin(), x.data().end());
    std::vector<std::int8_t> flags(fixed.begin(), fixed.end());
    for (std::size_t i = 0; i < y.size(); ++i)
        if (flags[i] >= 0) y[i] = static_cast<double>(flags[i]);
    return detail::make_result("override", x.shape(), std::move(y), {x}, [flags](Node& self) {
        if (double* g = detail::grad_of(self, 0))
            for (std::size_t i = 0; i < flags.size(); ++i)
                if (flags[i] < 0) g[i] += self.grad[i];
    });
}

// ---------------------------------------------------------------------------
// Sparsification

namespace detail {

inline Tensor apply_mask(const char* op, const Tensor& x, std::vector<std::uint8_t> keep) {
    std::vector<double> y(x.size(), 0.0);
    for (std::size_t i = 0; i < y.size(); ++i)
        if (keep[i]) y[i] = x[i];
    return make_result(op, x.shape(), std::move(y), {x}, [keep = std::move(keep)](Node& self) {
        if (double* g = grad_of(self, 0))
            for (std::size_t i = 0; i < keep.size(); ++i)
                if (keep[i]) g[i] += self.grad[i];
    });
}

// Indices [first, first+count) ordered by value descending, lowest index first on ties.
inline void select_largest(std::span<const double> values, std::size_t k, std::vector<std::size_t>& order) {
    order.resize(values.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto before = [&](std::size_t a, std::size_t b) {
        return values[a] > values[b] || (values[a] == values[b] && a < b);
    };
    if (k < order.size()) std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), before);
    order.resize(k);
}

}  // namespace detail

/// Row-wise mask of the k largest entries of x [batch×d].
inline std::vector<std::uint8_t> topk_keep(const Tensor& x, std::size_t k) {
    const std::size_t d = x.cols(), n = x.rows();
    if (k == 0 || k > d) throw ArgumentError("topk: k=" + std::to_string(k) + " outside [1, " + std::to_string(d) + "]");
    std::vector<std::uint8_t> keep(x.size(), 0);
    std::vector<std::size_t> order;
    for (std::size_t i = 0; i < n; ++i) {
        detail::select_largest(x.data().subspan(i * d, d), k, order);
        for (auto j : order) keep[i * d + j] = 1;
    }
    return keep;
}

inline Tensor topk_mask(const Tensor& x, std::size_t k) {
    return detail::apply_mask("topk_mask", x, topk_keep(x, k));
}

/// Keeps the n·k globally largest entries of x [n×d]; rows may keep unequal counts.
inline Tensor batch_topk_mask(const Tensor& x, std::size_t k) {
    const std::size_t d = x.cols(), n = x.rows();
    if (k == 0 || k > d) throw ArgumentError("batch_topk: k=" + std::to_string(k) + " outside [1, " + std::to_string(d) + "]");
    std::vector<std::size_t> order;
    detail::select_largest(x.data(), n * k, order);
    std::vector<std::uint8_t> keep(x.size(), 0);
    for (auto idx : order) keep[idx] = 1;
    return detail::apply_mask("batch_topk_mask", x, std::move(keep));
}

// ---------------------------------------------------------------------------
// Reductions and losses (all return shape [1])

inline Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    return detail::make_result("sum", {1}, {s}, {x}, [](Node& self) {
        if (double* g = detail::grad_of(self, 0))
            for (std::size_t i = 0; i < self.inputs[0]->data.size(); ++i) g[i] += self.grad[0];
    });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

inline Tensor mse(const Tensor& pred, const Tensor& target) {
    detail::require_same_shape(pred, target, "mse");
    const double inv = 1.0 / static_cast<double>(pred.size());
    double s = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double r = pred[i] - target[i];
        s += r * r;
    }
    return detail::make_result("mse", {1}, {s * inv}, {pred, target}, [inv](Node& self) {
        const auto& p = self.inputs[0]->data;
        const auto& t = self.inputs[1]->data;
        const double g = self.grad[0] * 2.0 * inv;
        if (double* gp = detail::grad_of(self, 0))
            for (std::size_t i = 0; i < p.size(); ++i) gp[i] += g * (p[i] - t[i]);
        if (double* gt = detail::grad_of(self, 1))
            for (std::size_t i = 0; i < p.size(); ++i) gt[i] -= g * (p[i] - t[i]);
    });
}

/// Probabilities are clamped into [kProbEps, 1 − kProbEps] before taking logs.
inline constexpr double kProbEps = 1e-12;

/// Weighted binary cross-entropy over prob [n×c] (or [n] for one column).
///
/// Column j's positive term is scaled by `weight_pos[j]`. Entries with
/// `mask == 0` are ignored. The result is the mean, over columns having at
/// least one unmasked entry, of each column's mean loss; zero if every entry
/// is masked. An empty mask span means "all entries count".
inline Tensor bce(const Tensor& prob, std::span<const double> target, std::span<const double> weight_pos,
                  std::span<const std::uint8_t> mask = {}) {
    const std::size_t n = prob.rows(), c = prob.cols();
    if (target.size() != prob.size()) throw DimensionError("bce: target size does not match " + to_string(prob.shape()));
    if (weight_pos.size() != c) throw DimensionError("bce: expected " + std::to_string(c) + " positive weights");
    if (!mask.empty() && mask.size() != prob.size()) throw DimensionError("bce: mask size does not match " + to_string(prob.shape()));
    std::vector<double> counts(c, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j)
            if (mask.empty() || mask[i * c + j]) counts[j] += 1.0;
    const double active_cols = static_cast<double>(std::count_if(counts.begin(), counts.end(), [](double v) { return v > 0; }));
    // coeff[i] = d(loss)/d(entry loss i)
    std::vector<double> coeff(prob.size(), 0.0);
    std::vector<double> clamped(prob.size());
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) {
            const std::size_t idx = i * c + j;
            const double p = prob[idx];
            if (!(p >= 0.0 && p <= 1.0)) throw NumericError("bce: probability " + std::to_string(p) + " outside [0,1]");
            clamped[idx] = std::clamp(p, kProbEps, 1.0 - kProbEps);
            if (!(mask.empty() || mask[idx])) continue;
            coeff[idx] = 1.0 / (counts[j] * active_cols);
            const double t = target[idx];
            const double l = -(weight_pos[j] * t * std::log(clamped[idx]) + (1.0 - t) * std::log(1.0 - clamped[idx]));
            loss += coeff[idx] * l;
        }
    std::vector<double> tgt(target.begin(), target.end());
    std::vector<double> w(weight_pos.begin(), weight_pos.end());
    return detail::make_result("bce", {1}, {loss}, {prob}, [c, coeff = std::move(coeff), clamped = std::move(clamped),
                                                             tgt = std::move(tgt), w = std::move(w)](Node& self) {
        if (double* g = detail::grad_of(self, 0))
            for (std::size_t idx = 0; idx < coeff.size(); ++idx) {
                if (coeff[idx] == 0.0) continue;
                const double p = clamped[idx], t = tgt[idx];
                const double dl = -(w[idx % c] * t / p - (1.0 - t) / (1.0 - p));
                g[idx] += self.grad[0] * coeff[idx] * dl;
            }
    });
}

/// Class-weighted softmax cross-entropy: Σ w[y_i]·(−log softmax_i[y_i]) / Σ w[y_i].
/// An empty `class_weights` span means uniform weights.
inline Tensor softmax_ce(const Tensor& logits, std::span<const int> classes, std::span<const double> class_weights = {}) {
    detail::require_matrix(logits, "softmax_ce");
    const std::size_t n = logits.rows(), c = logits.cols();
    if (classes.size() != n) throw DimensionError("softmax_ce: " + std::to_string(classes.size()) + " labels for " + std::to_string(n) + " rows");
    if (!class_weights.empty() && class_weights.size() != c) throw DimensionError("softmax_ce: class weight count mismatch");
    std::vector<double> probs(n * c);
    std::vector<double> wrow(n);
    double wsum = 0.0, loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const int y = classes[i];
        if (y < 0 || static_cast<std::size_t>(y) >= c) throw ArgumentError("softmax_ce: class index " + std::to_string(y) + " out of range");
        const double* row = logits.data().data() + i * c;
        const double mx = *std::max_element(row, row + c);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
        const double logz = mx + std::log(z);
        for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = std::exp(row[j] - logz);
        wrow[i] = class_weights.empty() ? 1.0 : class_weights[static_cast<std::size_t>(y)];
        wsum += wrow[i];
        loss += wrow[i] * (logz - row[y]);
    }
    loss /= wsum;
    std::vector<int> ys(classes.begin(), classes.end());
    return detail::make_result("softmax_ce", {1}, {loss}, {logits},
                               [n, c, wsum, probs = std::move(probs), wrow = std::move(wrow), ys = std::move(ys)](Node& self) {
                                   if (double* g = detail::grad_of(self, 0))
                                       for (std::size_t i = 0; i < n; ++i) {
                                           const double f = self.grad[0] * wrow[i] / wsum;
                                           for (std::size_t j = 0; j < c; ++j) {
                                               const double ind = static_cast<int>(j) == ys[i] ? 1.0 : 0.0;
                                               g[i * c + j] += f * (probs[i * c + j] - ind);
                                           }
                                       }
                               });
}

// ---------------------------------------------------------------------------
// Tape and backward pass

/// Operations reachable from a root, in an order where every node follows
/// all of its inputs. Replaying it backwards pushes gradients root-to-leaves.
class Tape {
public:
    static Tape record(const Tensor& root) {
        Tape tape;
        std::unordered_set<const Node*> seen;
        // Iterative DFS producing a post-order.
        std::vector<std::pair<Node*, std::size_t>> stack;
        stack.emplace_back(root.node().get(), 0);
        seen.insert(root.node().get());
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->inputs.size()) {
                Node* child = node->inputs[next++].get();
                if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
            } else {
                tape.order_.push_back(node);
                stack.pop_back();
            }
        }
        return tape;
    }

    std::size_t size() const { return order_.size(); }

    /// Visits nodes from the root back towards the leaves.
    template <class F>
    void for_each_reverse(F&& f) const {
        for (auto it = order_.rbegin(); it != order_.rend(); ++it) f(**it);
    }

private:
    std::vector<Node*> order_;
};

/// Accumulates d(loss)/d(leaf) into every reachable leaf that requires a gradient.
inline void backward(const Tensor& loss) {
    if (!loss.requires_grad() || loss.is_leaf())
        throw UsageError("backward() called on a tensor that was not produced by recorded operations");
    if (loss.size() != 1) throw UsageError("backward() needs a scalar loss, got " + to_string(loss.shape()));
    const Tape tape = Tape::record(loss);
    tape.for_each_reverse([](Node& n) {
        if (!n.inputs.empty()) std::fill(n.grad.begin(), n.grad.end(), 0.0);
    });
    loss.node()->ensure_grad();
    loss.node()->grad[0] = 1.0;
    tape.for_each_reverse([](Node& n) {
        if (n.backward && !n.grad.empty()) n.backward(n);
    });
}

}  // namespace mlcs::ad

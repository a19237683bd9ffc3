#pragma once

// Central finite-difference oracle for the autodiff engine. Independent of
// the backward closures: it only re-evaluates forward passes.

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "mlcs/autodiff/tensor.hpp"

namespace mlcs::testkit {

struct GradCheckResult {
    double worst_relative = 0.0;  // over entries whose absolute error exceeds the floor
    double worst_absolute = 0.0;
    bool ok = true;
    std::size_t checked = 0;
};

inline bool grad_close(double analytic, double numeric, double rel_tol = 1e-4, double abs_floor = 1e-6) {
    const double diff = std::abs(analytic - numeric);
    return diff <= abs_floor || diff <= rel_tol * std::max(std::abs(analytic), std::abs(numeric));
}

/// `loss_fn` rebuilds the scalar loss from the current values of `leaves`.
inline GradCheckResult gradcheck(const std::function<ad::Tensor()>& loss_fn, std::vector<ad::Tensor>& leaves,
                                 double h = 1e-5, double rel_tol = 1e-4) {
    for (auto& l : leaves) l.zero_grad();
    ad::backward(loss_fn());
    GradCheckResult r;
    for (auto& leaf : leaves) {
        std::vector<double> analytic(leaf.size(), 0.0);
        if (leaf.has_grad()) analytic.assign(leaf.grad().begin(), leaf.grad().end());
        auto values = leaf.mutable_data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            values[i] = saved + h;
            const double up = loss_fn().item();
            values[i] = saved - h;
            const double down = loss_fn().item();
            values[i] = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double diff = std::abs(analytic[i] - numeric);
            const double scale = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-12});
            r.worst_absolute = std::max(r.worst_absolute, diff);
            if (diff > 1e-6) r.worst_relative = std::max(r.worst_relative, diff / scale);
            if (!grad_close(analytic[i], numeric, rel_tol)) r.ok = false;
            ++r.checked;
        }
    }
    return r;
}

inline ad::Tensor random_tensor(ad::Shape shape, std::mt19937_64& rng, bool requires_grad = true, double sd = 1.0) {
    std::normal_distribution<double> dist(0.0, sd);
    std::vector<double> d(ad::numel(shape));
    for (auto& v : d) v = dist(rng);
    return ad::Tensor(std::move(shape), std::move(d), requires_grad);
}

/// Builds a random composite graph of depth <= 4 over matrices of width <= 8
/// ending in one of the three losses, returning the leaves it uses.
struct RandomGraph {
    std::vector<ad::Tensor> leaves;
    std::function<ad::Tensor()> loss;
};

inline RandomGraph random_graph(std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> dim(1, 8), batch(1, 5), depth(1, 4), pick(0, 6), loss_pick(0, 2);
    RandomGraph g;
    const std::size_t n = batch(rng);
    std::size_t width = dim(rng);
    g.leaves.push_back(random_tensor({n, width}, rng));
    struct Step {
        int kind;
        std::size_t leaf_a, leaf_b, out_width, k;
    };
    std::vector<Step> steps;
    const std::size_t layers = depth(rng);
    for (std::size_t l = 0; l < layers; ++l) {
        Step s{static_cast<int>(pick(rng)), 0, 0, width, 0};
        switch (s.kind) {
            case 0: {  // affine
                s.out_width = dim(rng);
                s.leaf_a = g.leaves.size();
                g.leaves.push_back(random_tensor({width, s.out_width}, rng, true, 0.7));
                s.leaf_b = g.leaves.size();
                g.leaves.push_back(random_tensor({s.out_width}, rng, true, 0.3));
                width = s.out_width;
                break;
            }
            case 4: {  // mix with a sigmoid gate from an extra leaf
                s.leaf_a = g.leaves.size();
                g.leaves.push_back(random_tensor({n, 1}, rng));
                s.leaf_b = g.leaves.size();
                g.leaves.push_back(random_tensor({n, width}, rng));
                break;
            }
            case 5: {  // concat with an extra leaf
                s.leaf_a = g.leaves.size();
                s.out_width = dim(rng);
                g.leaves.push_back(random_tensor({n, s.out_width}, rng));
                width += s.out_width;
                break;
            }
            case 6: {
                s.k = std::uniform_int_distribution<std::size_t>(1, width)(rng);
                break;
            }
            default:
                break;
        }
        steps.push_back(s);
    }
    const int loss_kind = static_cast<int>(loss_pick(rng));
    std::vector<double> target(n * width);
    std::bernoulli_distribution coin(0.5);
    for (auto& t : target) t = loss_kind == 1 ? (coin(rng) ? 1.0 : 0.0) : std::normal_distribution<double>(0, 1)(rng);
    std::vector<int> classes(n);
    for (auto& c : classes) c = static_cast<int>(std::uniform_int_distribution<std::size_t>(0, width - 1)(rng));
    std::vector<double> wpos(width);
    for (auto& w : wpos) w = std::uniform_real_distribution<double>(0.5, 3.0)(rng);

    auto leaves = g.leaves;
    g.loss = [=]() {
        ad::Tensor x = leaves[0];
        for (const auto& s : steps) {
            switch (s.kind) {
                case 0: x = ad::affine(x, leaves[s.leaf_a], leaves[s.leaf_b]); break;
                case 1: x = ad::leaky_relu(x, 0.1); break;
                case 2: x = ad::sigmoid(x); break;
                case 3: x = ad::tanh(x); break;
                case 4: x = ad::mix(ad::sigmoid(leaves[s.leaf_a]), x, leaves[s.leaf_b]); break;
                case 5: x = ad::concat_cols({x, leaves[s.leaf_a]}); break;
                case 6: x = ad::topk_mask(x, s.k); break;
            }
        }
        switch (loss_kind) {
            case 0: return ad::mse(x, ad::Tensor(x.shape(), target));
            case 1: return ad::bce(ad::sigmoid(x), target, wpos);
            default: return ad::softmax_ce(x, classes);
        }
    };
    return g;
}

}  // namespace mlcs::testkit

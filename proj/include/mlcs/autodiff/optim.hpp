#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "mlcs/autodiff/tensor.hpp"

namespace mlcs::ad {

/// A trainable tensor plus its Adam moment estimates.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor adam_m;
    Tensor adam_v;
    std::uint64_t step_count = 0;

    Parameter() = default;
    Parameter(std::string n, Tensor v)
        : name(std::move(n)),
          value(Tensor(v.shape(), std::vector<double>(v.data().begin(), v.data().end()), true)),
          adam_m(Tensor::zeros(v.shape())),
          adam_v(Tensor::zeros(v.shape())) {}

    void zero_grad() { value.zero_grad(); }
};

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// One bias-corrected Adam update on each parameter, then clears its gradient.
/// Parameters that never received a gradient are treated as having a zero one.
template <class Range>
void adam_step(Range&& params, const AdamConfig& cfg) {
    for (Parameter* p : params) {
        ++p->step_count;
        if (!p->value.has_grad()) continue;
        auto g = p->value.grad();
        auto w = p->value.mutable_data();
        auto m = p->adam_m.mutable_data();
        auto v = p->adam_v.mutable_data();
        const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(p->step_count));
        const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(p->step_count));
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            w[i] -= cfg.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.eps);
        }
        p->zero_grad();
    }
}

using Rng = std::mt19937_64;

/// Glorot-uniform matrix [rows×cols].
inline Tensor glorot(std::size_t rows, std::size_t cols, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> d(rows * cols);
    for (auto& x : d) x = dist(rng);
    return Tensor::matrix(rows, cols, std::move(d));
}

inline Tensor gaussian(Shape shape, double sd, Rng& rng) {
    std::normal_distribution<double> dist(0.0, sd);
    std::vector<double> d(numel(shape));
    for (auto& x : d) x = dist(rng);
    return Tensor(std::move(shape), std::move(d));
}

}  // namespace mlcs::ad

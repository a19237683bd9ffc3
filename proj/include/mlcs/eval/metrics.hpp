#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "mlcs/error.hpp"

namespace mlcs::eval {

/// P(score of a random positive > score of a random negative), ties counting
/// one half, via average ranks.
inline double roc_auc(std::span<const double> scores, std::span<const double> labels) {
    if (scores.size() != labels.size()) throw DimensionError("roc_auc: " + std::to_string(scores.size()) + " scores for " +
                                                             std::to_string(labels.size()) + " labels");
    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double pos = 0, neg = 0, rank_sum = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        // ranks i+1..j share their average, kept doubled to stay integral
        const double doubled_rank = static_cast<double>(i + 1 + j);
        for (std::size_t t = i; t < j; ++t)
            if (labels[order[t]] > 0.5) rank_sum += doubled_rank;
        i = j;
    }
    for (double y : labels) (y > 0.5 ? pos : neg) += 1.0;
    if (pos == 0 || neg == 0) throw MetricError("roc_auc undefined: labels contain a single class");
    return (rank_sum - pos * (pos + 1.0)) / (2.0 * pos * neg);
}

inline double accuracy(std::span<const int> predicted, std::span<const int> truth) {
    if (predicted.size() != truth.size() || truth.empty()) throw DimensionError("accuracy: mismatched or empty inputs");
    std::size_t ok = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) ok += predicted[i] == truth[i];
    return static_cast<double>(ok) / static_cast<double>(truth.size());
}

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;
};

/// Population standard deviation.
inline MeanStd mean_std(std::span<const double> v) {
    MeanStd r;
    if (v.empty()) return r;
    for (double x : v) r.mean += x;
    r.mean /= static_cast<double>(v.size());
    for (double x : v) r.std += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(r.std / static_cast<double>(v.size()));
    return r;
}

}  // namespace mlcs::eval

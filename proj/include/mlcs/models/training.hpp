#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

#include "mlcs/autodiff/optim.hpp"
#include "mlcs/data/generator.hpp"
#include "mlcs/models/deep_hicem.hpp"
#include "mlcs/models/intervention.hpp"

namespace mlcs::models {

struct TrainConfig {
    double lr = 1e-3;
    std::size_t batch_size = 256;
    std::size_t epochs = 300;
    std::size_t patience = 75;
    double lambda = 10.0;
    double p_int = 0.25;
    std::uint64_t seed = 0;
    /// Called after every epoch with (epoch, train loss, val loss).
    std::function<void(std::size_t, double, double)> on_epoch;
};

struct TrainHistory {
    std::vector<double> train_loss;
    std::vector<double> val_loss;
    std::size_t best_epoch = 0;
    double best_val_loss = INFINITY;
};

/// Labels for the provided (top-level) nodes from the dataset; all other
/// nodes start undefined.
inline Supervision provided_supervision(const ConceptTree& tree, const data::SplitData& split) {
    Supervision s;
    s.labels.assign(tree.size(), std::vector<double>(split.size(), 0.0));
    s.defined.assign(tree.size(), std::vector<std::uint8_t>(split.size(), 0));
    for (auto& n : tree.nodes()) {
        if (n.provided_index < 0) continue;
        for (std::size_t i = 0; i < split.size(); ++i) {
            s.labels[static_cast<std::size_t>(n.id)][i] = split.samples[i].concepts[static_cast<std::size_t>(n.provided_index)];
            s.defined[static_cast<std::size_t>(n.id)][i] = 1;
        }
    }
    return s;
}

/// Positive-class weight n_neg / n_pos per node over defined labels (1 when a class is absent).
inline std::vector<double> positive_weights(const Supervision& s) {
    std::vector<double> w(s.nodes(), 1.0);
    for (std::size_t n = 0; n < s.nodes(); ++n) {
        double pos = 0, neg = 0;
        for (std::size_t i = 0; i < s.samples(); ++i) {
            if (!s.defined[n][i]) continue;
            (s.labels[n][i] > 0.5 ? pos : neg) += 1.0;
        }
        if (pos > 0 && neg > 0) w[n] = neg / pos;
    }
    return w;
}

/// Task cross-entropy plus λ times the mean weighted concept BCE over
/// supervised nodes. `rows` selects samples of `sup`.
inline ad::Tensor training_loss(const ForwardOutput& out, const Supervision& sup, std::span<const std::size_t> rows,
                                std::span<const int> tasks, std::span<const double> weight_pos, double lambda) {
    if (lambda < 0) throw ArgumentError("concept loss weight must be non-negative");
    auto task_loss = ad::softmax_ce(out.logits, tasks);
    if (lambda == 0.0 || out.nodes.empty()) return task_loss;
    // CBMs only carry probabilities on top-level nodes.
    std::vector<int> ids;
    for (std::size_t n = 0; n < out.nodes.size(); ++n)
        if (out.nodes[n].prob.size() == rows.size()) ids.push_back(static_cast<int>(n));
    std::vector<ad::Tensor> cols;
    std::vector<double> target(rows.size() * ids.size()), w;
    std::vector<std::uint8_t> mask(rows.size() * ids.size());
    for (std::size_t c = 0; c < ids.size(); ++c) {
        const auto node = static_cast<std::size_t>(ids[c]);
        cols.push_back(out.nodes[node].prob);
        w.push_back(weight_pos[node]);
        for (std::size_t r = 0; r < rows.size(); ++r) {
            target[r * ids.size() + c] = sup.labels[node][rows[r]];
            mask[r * ids.size() + c] = sup.defined[node][rows[r]];
        }
    }
    auto concept_loss = ad::bce(ad::concat_cols(cols), target, w, mask);
    return ad::add(task_loss, ad::scale(concept_loss, lambda));
}

/// Forward pass over all samples of a split in chunks, without gradients.
inline ForwardOutput predict(const DeepHiCEM& model, const data::SplitData& split, const std::vector<InterventionState>* states = nullptr) {
    auto x = split.all_features();
    if (!states) return model.forward(x);
    auto iv = BatchInterventions::from_states(model.tree(), *states);
    return model.forward(x, &iv);
}

inline double split_loss(const DeepHiCEM& model, const data::SplitData& split, const Supervision& sup,
                         std::span<const double> weight_pos, double lambda) {
    auto out = predict(model, split);
    std::vector<std::size_t> rows(split.size());
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    auto tasks = split.tasks();
    return training_loss(out, sup, rows, tasks, weight_pos, lambda).item();
}

/// Adam with RandInt interventions and early stopping on validation loss;
/// the model ends holding its best-validation parameters.
inline TrainHistory train_model(DeepHiCEM& model, const data::SplitData& train, const Supervision& train_sup,
                                const data::SplitData& val, const Supervision& val_sup, const TrainConfig& cfg) {
    TrainHistory history;
    if (cfg.epochs == 0) return history;
    if (train.size() == 0) throw ArgumentError("empty training split");
    const auto weight_pos = positive_weights(train_sup);
    std::mt19937_64 rng(cfg.seed);
    auto params = model.parameters();
    const ad::AdamConfig adam{.lr = cfg.lr};
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto best = model.snapshot();
    std::size_t since_best = 0;
    const bool concepts = model.config().kind != ModelKind::black_box;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double total = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            std::span<const std::size_t> rows(order.data() + start, end - start);
            auto x = train.features(rows);
            std::vector<int> tasks;
            for (auto r : rows) tasks.push_back(train.samples[r].task);
            BatchInterventions iv;
            bool use_iv = concepts && cfg.p_int > 0;
            if (use_iv) {
                std::vector<InterventionState> states;
                states.reserve(rows.size());
                for (auto r : rows) states.push_back(randint_mask(model.tree(), train_sup, r, cfg.p_int, rng));
                iv = BatchInterventions::from_states(model.tree(), states);
            }
            auto out = model.forward(x, use_iv ? &iv : nullptr);
            auto loss = training_loss(out, train_sup, rows, tasks, weight_pos, concepts ? cfg.lambda : 0.0);
            if (!std::isfinite(loss.item())) throw TrainingError("loss diverged at epoch " + std::to_string(epoch));
            ad::backward(loss);
            ad::adam_step(params, adam);
            total += loss.item() * static_cast<double>(rows.size());
        }
        const double train_loss = total / static_cast<double>(order.size());
        const double val_loss = split_loss(model, val, val_sup, weight_pos, concepts ? cfg.lambda : 0.0);
        if (!std::isfinite(val_loss)) throw TrainingError("validation loss diverged at epoch " + std::to_string(epoch));
        history.train_loss.push_back(train_loss);
        history.val_loss.push_back(val_loss);
        if (cfg.on_epoch) cfg.on_epoch(epoch, train_loss, val_loss);
        if (val_loss < history.best_val_loss) {
            history.best_val_loss = val_loss;
            history.best_epoch = epoch;
            best = model.snapshot();
            since_best = 0;
        } else if (++since_best >= cfg.patience) {
            break;
        }
    }
    model.restore(best);
    return history;
}

}  // namespace mlcs::models

#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include "mlcs/models/concept_tree.hpp"

namespace mlcs::models {

/// Overrides for one sample. `overrides` keeps insertion order (oldest
/// first); `propagated` holds the effective value of every node touched by
/// an override, either directly or through upward induction.
struct InterventionState {
    std::vector<std::pair<int, int>> overrides;
    std::map<int, int> propagated;

    bool empty() const { return overrides.empty(); }
    bool is_overridden(int node) const {
        return std::any_of(overrides.begin(), overrides.end(), [&](auto& o) { return o.first == node; });
    }
    /// Set by propagation rather than by an explicit override.
    bool is_induced(int node) const { return propagated.count(node) && !is_overridden(node); }
};

/// Replays overrides oldest to newest so later writes win. A positive child
/// set to 1 forces its parent to 1; a negative child set to 1 forces its
/// parent to 0. A value of 0 implies nothing about the parent.
inline void recompute_propagation(const ConceptTree& tree, InterventionState& state) {
    state.propagated.clear();
    for (auto [node, value] : state.overrides) {
        state.propagated[node] = value;
        int child = node, v = value;
        while (v == 1) {
            const auto& n = tree.node(child);
            if (n.parent < 0) break;
            v = n.polarity == Polarity::positive ? 1 : 0;
            state.propagated[n.parent] = v;
            child = n.parent;
        }
    }
}

inline InterventionState intervene(const ConceptTree& tree, InterventionState state, int node, int value) {
    if (!tree.contains(node)) throw NotFoundError("unknown concept node " + std::to_string(node));
    if (value != 0 && value != 1) throw ArgumentError("intervention value must be 0 or 1");
    std::erase_if(state.overrides, [&](auto& o) { return o.first == node; });
    state.overrides.emplace_back(node, value);
    recompute_propagation(tree, state);
    return state;
}

inline InterventionState remove_intervention(const ConceptTree& tree, InterventionState state, int node) {
    if (!state.is_overridden(node)) throw NotFoundError("node " + std::to_string(node) + " has no override");
    std::erase_if(state.overrides, [&](auto& o) { return o.first == node; });
    recompute_propagation(tree, state);
    return state;
}

/// Per-node override flags for a batch: flags[node][row] is -1 (predict), 0 or 1.
struct BatchInterventions {
    std::size_t rows = 0;
    std::vector<std::vector<std::int8_t>> flags;

    BatchInterventions() = default;
    BatchInterventions(std::size_t node_count, std::size_t row_count) : rows(row_count), flags(node_count) {}

    void set(int node, std::size_t row, int value) {
        auto& f = flags[static_cast<std::size_t>(node)];
        if (f.empty()) f.assign(rows, -1);
        f[row] = static_cast<std::int8_t>(value);
    }
    bool covers(int node) const { return !flags[static_cast<std::size_t>(node)].empty(); }
    std::span<const std::int8_t> node_flags(int node) const { return flags[static_cast<std::size_t>(node)]; }

    static BatchInterventions from_states(const ConceptTree& tree, std::span<const InterventionState> states) {
        BatchInterventions b(tree.size(), states.size());
        for (std::size_t r = 0; r < states.size(); ++r)
            for (auto [node, v] : states[r].propagated) b.set(node, r, v);
        return b;
    }
};

/// Ground-truth labels and their availability for every node over some
/// samples: labels[node][sample], defined[node][sample].
struct Supervision {
    std::vector<std::vector<double>> labels;
    std::vector<std::vector<std::uint8_t>> defined;

    std::size_t nodes() const { return labels.size(); }
    std::size_t samples() const { return labels.empty() ? 0 : labels.front().size(); }
};

/// RandInt: each node with a defined label is independently set to its
/// ground truth with probability p_int.
inline InterventionState randint_mask(const ConceptTree& tree, const Supervision& sup, std::size_t sample, double p_int,
                                      std::mt19937_64& rng) {
    if (!(p_int >= 0.0 && p_int <= 1.0)) throw ArgumentError("p_int must lie in [0,1]");
    InterventionState state;
    std::bernoulli_distribution coin(p_int);
    for (std::size_t node = 0; node < sup.nodes(); ++node) {
        if (!sup.defined[node][sample]) continue;
        if (coin(rng)) state.overrides.emplace_back(static_cast<int>(node), sup.labels[node][sample] > 0.5 ? 1 : 0);
    }
    recompute_propagation(tree, state);
    return state;
}

}  // namespace mlcs::models

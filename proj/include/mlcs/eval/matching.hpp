#pragma once

// Concept-bank matching: every bank sub-concept is assigned the discovered
// child of its designated parent that scores best; for ingredients with
// variants that score averages the candidate's own ROC-AUC with the AUCs of
// the variants, greedily assigned to the candidate's children first.

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mlcs/data/catalog.hpp"
#include "mlcs/eval/metrics.hpp"
#include "mlcs/models/concept_tree.hpp"

namespace mlcs::eval {

inline constexpr double kMatchThreshold = 0.7;

struct MatchResult {
    int bank = -1;
    std::string name;
    data::BankLevel level = data::BankLevel::sub;
    int node = -1;  // best candidate, -1 when no candidate could be scored
    bool matched = false;
    double roc_auc = 0.0;            // sub-concepts: the averaged candidate score
    double own_auc = 0.0;            // the node's own AUC against this bank concept
    std::vector<double> components;  // AUCs entering the average
};

/// AUC or nullopt when the labels hold a single class.
inline std::optional<double> try_auc(std::span<const double> scores, std::span<const double> labels) {
    try {
        return roc_auc(scores, labels);
    } catch (const MetricError&) {
        return std::nullopt;
    }
}

namespace detail {

struct Pair {
    double auc;
    int variant;  // bank index
    int node;
};

/// Greedy one-to-one assignment by descending AUC (ties: lower bank index, then lower node id).
inline std::vector<Pair> greedy_assign(std::vector<Pair> pairs) {
    std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
        return a.auc > b.auc || (a.auc == b.auc && (a.variant < b.variant || (a.variant == b.variant && a.node < b.node)));
    });
    std::vector<Pair> out;
    std::vector<int> used_v, used_n;
    for (auto& p : pairs) {
        if (std::find(used_v.begin(), used_v.end(), p.variant) != used_v.end()) continue;
        if (std::find(used_n.begin(), used_n.end(), p.node) != used_n.end()) continue;
        used_v.push_back(p.variant);
        used_n.push_back(p.node);
        out.push_back(p);
    }
    return out;
}

}  // namespace detail

/// `scores[node]` holds a score per test sample for every tree node (empty
/// vectors are skipped); `bank_labels[b]` holds bank concept b's labels.
inline std::vector<MatchResult> match_bank(const data::Catalog& catalog, const models::ConceptTree& tree,
                                           const std::vector<std::vector<double>>& scores,
                                           const std::vector<std::vector<double>>& bank_labels) {
    std::vector<MatchResult> results(catalog.bank.size());
    for (std::size_t b = 0; b < catalog.bank.size(); ++b) {
        results[b].bank = static_cast<int>(b);
        results[b].name = catalog.bank[b].name;
        results[b].level = catalog.bank[b].level;
    }
    auto auc_of = [&](int node, int bank) { return try_auc(scores[static_cast<std::size_t>(node)], bank_labels[static_cast<std::size_t>(bank)]); };
    auto scorable = [&](int node) { return !scores[static_cast<std::size_t>(node)].empty(); };

    for (std::size_t b = 0; b < catalog.bank.size(); ++b) {
        const auto& bc = catalog.bank[b];
        if (bc.level != data::BankLevel::sub) continue;
        int parent = -1;
        for (auto& n : tree.nodes())
            if (n.parent < 0 && n.provided_index == bc.top_concept) parent = n.id;
        if (parent < 0) continue;
        std::vector<int> variants;
        for (std::size_t v = 0; v < catalog.bank.size(); ++v)
            if (catalog.bank[v].parent_bank == static_cast<int>(b)) variants.push_back(static_cast<int>(v));
        // every grandchild of the designated parent, for variants left over
        std::vector<int> all_subsubs;
        const auto& pn = tree.node(parent);
        for (const auto* kids : {&pn.children_pos, &pn.children_neg})
            for (int c : *kids)
                for (const auto* gk : {&tree.node(c).children_pos, &tree.node(c).children_neg})
                    for (int g : *gk)
                        if (scorable(g)) all_subsubs.push_back(g);

        MatchResult best = results[b];
        std::vector<detail::Pair> best_assign;
        double best_score = -1.0;
        for (const auto* kids : {&pn.children_pos, &pn.children_neg})
            for (int cand : *kids) {
                if (!scorable(cand)) continue;
                auto own = auc_of(cand, static_cast<int>(b));
                if (!own) continue;
                std::vector<double> comps{*own};
                std::vector<detail::Pair> assign;
                if (!variants.empty()) {
                    std::vector<int> children;
                    for (const auto* gk : {&tree.node(cand).children_pos, &tree.node(cand).children_neg})
                        for (int g : *gk)
                            if (scorable(g)) children.push_back(g);
                    std::vector<detail::Pair> pairs;
                    for (int v : variants)
                        for (int g : children)
                            if (auto a = auc_of(g, v)) pairs.push_back({*a, v, g});
                    assign = detail::greedy_assign(pairs);
                    std::vector<int> left, used;
                    for (auto& a : assign) used.push_back(a.node);
                    for (int v : variants)
                        if (std::none_of(assign.begin(), assign.end(), [&](auto& a) { return a.variant == v; })) left.push_back(v);
                    if (!left.empty()) {
                        std::vector<detail::Pair> rest;
                        for (int v : left)
                            for (int g : all_subsubs)
                                if (std::find(used.begin(), used.end(), g) == used.end())
                                    if (auto a = auc_of(g, v)) rest.push_back({*a, v, g});
                        for (auto& a : detail::greedy_assign(rest)) assign.push_back(a);
                    }
                    for (auto& a : assign) comps.push_back(a.auc);
                }
                double score = 0;
                for (double c : comps) score += c;
                score /= static_cast<double>(comps.size());
                if (score > best_score) {
                    best_score = score;
                    best.node = cand;
                    best.roc_auc = score;
                    best.own_auc = *own;
                    best.components = comps;
                    best_assign = assign;
                }
            }
        if (best.node < 0) continue;
        best.matched = best.roc_auc > kMatchThreshold;
        results[b] = best;
        for (auto& a : best_assign) {
            auto& r = results[static_cast<std::size_t>(a.variant)];
            r.node = a.node;
            r.roc_auc = r.own_auc = a.auc;
            r.components = {a.auc};
            r.matched = a.auc > kMatchThreshold;
        }
    }
    return results;
}

struct Rq1Summary {
    std::size_t sub_total = 0, sub_matched = 0, subsub_total = 0, subsub_matched = 0;
    double mean_auc = 0.0, mean_sub_auc = 0.0, mean_subsub_auc = 0.0;
};

inline Rq1Summary summarize_matches(const std::vector<MatchResult>& results) {
    Rq1Summary s;
    double all = 0, sub = 0, subsub = 0;
    for (auto& r : results) {
        const bool is_sub = r.level == data::BankLevel::sub;
        (is_sub ? s.sub_total : s.subsub_total) += 1;
        if (!r.matched) continue;
        (is_sub ? s.sub_matched : s.subsub_matched) += 1;
        (is_sub ? sub : subsub) += r.roc_auc;
        all += r.roc_auc;
    }
    const std::size_t n = s.sub_matched + s.subsub_matched;
    if (n) s.mean_auc = all / static_cast<double>(n);
    if (s.sub_matched) s.mean_sub_auc = sub / static_cast<double>(s.sub_matched);
    if (s.subsub_matched) s.mean_subsub_auc = subsub / static_cast<double>(s.subsub_matched);
    return s;
}

inline nlohmann::json matches_to_json(const std::vector<MatchResult>& results, const models::ConceptTree& tree) {
    nlohmann::json a = nlohmann::json::array();
    for (auto& r : results)
        a.push_back({{"bank", r.name},
                     {"level", r.level == data::BankLevel::sub ? "sub" : "subsub"},
                     {"node", r.node >= 0 ? nlohmann::json(tree.node(r.node).name) : nlohmann::json(nullptr)},
                     {"matched", r.matched},
                     {"roc_auc", r.roc_auc},
                     {"own_auc", r.own_auc},
                     {"components", r.components}});
    return a;
}

}  // namespace mlcs::eval

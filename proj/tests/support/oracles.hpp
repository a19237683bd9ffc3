#pragma once

// Independent reference implementations shared by unit and acceptance tests.

#include <cmath>
#include <string>
#include <vector>

#include "mlcs/data/generator.hpp"
#include "mlcs/models/deep_hicem.hpp"

namespace mlcs::testkit {

/// Pairwise AUC with ties counted as one half.
inline double brute_force_auc(const std::vector<double>& s, const std::vector<double>& y) {
    double twice = 0, pos = 0, neg = 0;
    for (double v : y) (v > 0.5 ? pos : neg) += 1;
    for (std::size_t i = 0; i < s.size(); ++i)
        for (std::size_t j = 0; j < s.size(); ++j)
            if (y[i] > 0.5 && y[j] < 0.5) twice += s[i] > s[j] ? 2.0 : s[i] == s[j] ? 1.0 : 0.0;
    return twice / (2.0 * pos * neg);
}

/// Plain-loop reference for a flat CEM.
struct ReferenceCem {
    const models::DeepHiCEM& model;

    struct Output {
        std::vector<double> probs, logits;
    };

    static std::vector<double> affine(const std::vector<double>& x, const ad::Parameter& w, const ad::Parameter& b) {
        const std::size_t in = w.value.rows(), out = w.value.cols();
        std::vector<double> y(out);
        for (std::size_t j = 0; j < out; ++j) {
            double s = b.value[j];
            for (std::size_t i = 0; i < in; ++i) s += x[i] * w.value.at(i, j);
            y[j] = s;
        }
        return y;
    }
    static std::vector<double> leaky(std::vector<double> v) {
        for (auto& x : v) x = x > 0 ? x : models::kLeakySlope * x;
        return v;
    }

    Output forward(const std::vector<double>& x) const {
        auto h = affine(leaky(affine(x, *model.backbone_layer(0).w, *model.backbone_layer(0).b)), *model.backbone_layer(1).w,
                        *model.backbone_layer(1).b);
        Output o;
        std::vector<double> top;
        for (int r : model.tree().roots()) {
            const auto& np = model.node_params(r);
            auto pos = leaky(affine(h, *np.gen_pos.w, *np.gen_pos.b));
            auto neg = leaky(affine(h, *np.gen_neg.w, *np.gen_neg.b));
            std::vector<double> both = pos;
            both.insert(both.end(), neg.begin(), neg.end());
            const double p = 1.0 / (1.0 + std::exp(-affine(both, *model.scorer().w, *model.scorer().b)[0]));
            o.probs.push_back(p);
            for (std::size_t j = 0; j < pos.size(); ++j) top.push_back(p * pos[j] + (1 - p) * neg[j]);
        }
        o.logits = affine(top, *model.label_predictor().w, *model.label_predictor().b);
        return o;
    }
    std::vector<double> logits(const std::vector<double>& x) const { return forward(x).logits; }
};

inline int variant_of(const data::Catalog& c, const data::Sample& s, const std::string& ingredient) {
    for (int id : s.atoms) {
        const auto& a = c.atoms[static_cast<std::size_t>(id)];
        if (c.ingredients[static_cast<std::size_t>(a.ingredient)].name == ingredient) return a.variant;
    }
    return -1;
}

struct ConstraintViolations {
    int recipe = 0, hierarchy = 0;
};

/// Recipe restrictions and bank label hierarchy checked against the sample's atoms.
inline ConstraintViolations count_violations(const data::Catalog& c, const data::SplitData& split) {
    ConstraintViolations v;
    for (auto& s : split.samples) {
        const auto& recipe = c.recipes[static_cast<std::size_t>(s.task)].name;
        if (recipe == "Chips") {
            int p = variant_of(c, s, "Potato");
            v.recipe += !(p >= 2 && p <= 4);
        }
        if (recipe == "Apple Crumble") v.recipe += variant_of(c, s, "Apple") != 3;
        if (recipe == "Salad") {
            int p = variant_of(c, s, "Pepper");
            v.recipe += !(p == 2 || p == 3);
        }
        if (recipe == "Smoothie") v.recipe += variant_of(c, s, "Milk") < 0 || variant_of(c, s, "Yoghurt") < 0;
        for (std::size_t b = 0; b < c.bank.size(); ++b) {
            if (!s.bank[b]) continue;
            const auto& bc = c.bank[b];
            if (bc.level == data::BankLevel::subsub) v.hierarchy += !s.bank[static_cast<std::size_t>(bc.parent_bank)];
            v.hierarchy += !s.concepts[static_cast<std::size_t>(bc.top_concept)];
        }
    }
    return v;
}

}  // namespace mlcs::testkit

#pragma once

// Multi-level concept splitting: harvest a trained CEM's concept embeddings,
// fit one HiSAE per concept state, and promote surviving latents (and their
// sub-latents) to discovered sub-concepts (and sub-sub-concepts).

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "mlcs/data/generator.hpp"
#include "mlcs/models/deep_hicem.hpp"
#include "mlcs/models/intervention.hpp"
#include "mlcs/sae/hisae.hpp"

namespace mlcs::discovery {

using models::ConceptTree;
using models::Polarity;
using models::Supervision;

struct EmbeddingHarvest {
    int node = -1;
    std::vector<std::size_t> sample_ids;
    ad::Tensor embeddings;             // mixed embedding ĉ_i per sample [n×m]
    std::vector<std::uint8_t> active;  // ground-truth state of the concept

    std::size_t size() const { return sample_ids.size(); }
    std::vector<std::size_t> rows_in_state(bool state) const {
        std::vector<std::size_t> rows;
        for (std::size_t i = 0; i < size(); ++i)
            if (static_cast<bool>(active[i]) == state) rows.push_back(i);
        return rows;
    }
};

inline EmbeddingHarvest harvest_from_output(const models::ForwardOutput& out, const data::SplitData& split, const models::ConceptNode& node) {
    if (node.provided_index < 0) throw ArgumentError("harvest needs a provided concept, got '" + node.name + "'");
    EmbeddingHarvest h;
    h.node = node.id;
    h.embeddings = out.nodes[static_cast<std::size_t>(node.id)].mixture.detach();
    for (std::size_t i = 0; i < split.size(); ++i) {
        h.sample_ids.push_back(i);
        h.active.push_back(split.samples[i].concepts[static_cast<std::size_t>(node.provided_index)]);
    }
    return h;
}

/// Runs the CEM over the split (no interventions) and keeps ĉ for `node`.
inline EmbeddingHarvest harvest_embeddings(const models::DeepHiCEM& cem, const data::SplitData& split, int node) {
    if (cem.config().kind != models::ModelKind::cem) throw ArgumentError("harvest needs a concept embedding model");
    if (!cem.tree().contains(node)) throw NotFoundError("unknown concept node " + std::to_string(node));
    return harvest_from_output(cem.forward(split.all_features()), split, cem.tree().node(node));
}

struct MlcsConfig {
    std::vector<std::string> split_concepts{"Fruit", "Vegetables", "Pasta"};
    sae::HiSAEConfig hisae;
    sae::HiSaeTrainConfig train{.lr = 3e-3, .epochs = 100, .batch_size = 1000};
    double min_support = 0.01;
    double max_support = 0.5;
    double magnitude_threshold = 0.0;
    std::size_t min_state_samples = 50;
    std::size_t max_subconcepts = 8;      // per concept and polarity, by support
    std::size_t max_subsubconcepts = 4;   // per sub-concept, by support
    bool discover_negative = true;
    std::uint64_t seed = 0;

    nlohmann::json to_json() const {
        return {{"split_concepts", split_concepts},
                {"hisae", hisae.to_json()},
                {"train", {{"lr", train.lr}, {"epochs", train.epochs}, {"batch_size", train.batch_size}, {"normalize_decoder", train.normalize_decoder}}},
                {"min_support", min_support},
                {"max_support", max_support},
                {"magnitude_threshold", magnitude_threshold},
                {"min_state_samples", min_state_samples},
                {"max_subconcepts", max_subconcepts},
                {"max_subsubconcepts", max_subsubconcepts},
                {"discover_negative", discover_negative},
                {"seed", seed}};
    }
};

/// Binary latent labels over the in-state samples of one HiSAE.
struct LatentLabels {
    std::size_t samples = 0;
    std::map<int, std::vector<std::uint8_t>> top;                     // latent → labels
    std::map<std::pair<int, int>, std::vector<std::uint8_t>> sub;     // (latent, sub) → labels

    static double support(const std::vector<std::uint8_t>& v) {
        if (v.empty()) return 0.0;
        return static_cast<double>(std::count(v.begin(), v.end(), std::uint8_t{1})) / static_cast<double>(v.size());
    }
};

/// A latent is 1 on a sample iff it survives top-k with magnitude above the
/// threshold; a sub-latent additionally needs its parent latent to be 1.
inline LatentLabels binarize_latents(const sae::LatentActivation& act, double threshold = 0.0) {
    LatentLabels out;
    out.samples = act.size();
    for (std::size_t i = 0; i < act.size(); ++i)
        for (auto& t : act.samples[i]) {
            if (t.value <= threshold) {
                if (!t.subs.empty() && threshold <= 0.0) throw NumericError("sub-latents active under an inactive parent");
                continue;
            }
            auto& col = out.top[t.latent];
            if (col.empty()) col.assign(act.size(), 0);
            col[i] = 1;
            for (auto& s : t.subs) {
                if (s.value <= threshold) continue;
                auto& sc = out.sub[{t.latent, s.latent}];
                if (sc.empty()) sc.assign(act.size(), 0);
                sc[i] = 1;
            }
        }
    return out;
}

struct Candidate {
    int latent = -1;
    int sub = -1;
    double support = 0.0;  // fraction of in-state samples (sub-latents: of parent-latent samples)
    std::vector<Candidate> children;
};

struct PolarityDiscovery {
    Polarity polarity = Polarity::positive;
    bool attempted = false;
    std::string skipped_reason;
    std::size_t in_state = 0;
    sae::HiSAEParams params;
    std::vector<Candidate> kept;
    std::size_t latents_seen = 0, dropped_low = 0, dropped_high = 0, dropped_cap = 0;
    std::size_t sub_latents_seen = 0, sub_dropped = 0;
    std::vector<int> dead_latents;
    double explained_variance = 0.0;
    double final_loss = 0.0;
};

namespace detail {

inline bool by_support(const Candidate& a, const Candidate& b) {
    return a.support > b.support || (a.support == b.support && (a.latent < b.latent || (a.latent == b.latent && a.sub < b.sub)));
}

}  // namespace detail

/// Trains a HiSAE on the in-state embeddings and selects candidates.
inline PolarityDiscovery discover_polarity(const EmbeddingHarvest& h, bool state, const MlcsConfig& cfg, ad::Rng& rng) {
    PolarityDiscovery d;
    d.polarity = state ? Polarity::positive : Polarity::negative;
    const auto rows = h.rows_in_state(state);
    d.in_state = rows.size();
    if (rows.size() < cfg.min_state_samples) {
        d.skipped_reason = "only " + std::to_string(rows.size()) + " samples in state, need " + std::to_string(cfg.min_state_samples);
        return d;
    }
    d.attempted = true;
    auto x = sae::gather_rows(h.embeddings, rows);
    d.params = sae::HiSAEParams::random(x.cols(), cfg.hisae, rng);
    auto train = cfg.train;
    train.seed = rng();
    auto result = sae::train_hisae(d.params, x, train);
    d.dead_latents = result.dead_latents;
    d.final_loss = result.final_loss;
    d.explained_variance = sae::explained_variance(d.params, x);

    auto labels = binarize_latents(sae::hisae_forward(d.params, x).activation, cfg.magnitude_threshold);
    std::vector<Candidate> pool;
    for (auto& [latent, col] : labels.top) {
        ++d.latents_seen;
        const double s = LatentLabels::support(col);
        if (s < cfg.min_support) ++d.dropped_low;
        else if (s > cfg.max_support) ++d.dropped_high;
        else pool.push_back({latent, -1, s, {}});
    }
    std::sort(pool.begin(), pool.end(), detail::by_support);
    if (pool.size() > cfg.max_subconcepts) {
        d.dropped_cap = pool.size() - cfg.max_subconcepts;
        pool.resize(cfg.max_subconcepts);
    }
    for (auto& c : pool) {
        const auto& parent = labels.top.at(c.latent);
        const double parent_count = static_cast<double>(std::count(parent.begin(), parent.end(), std::uint8_t{1}));
        for (auto& [key, col] : labels.sub) {
            if (key.first != c.latent) continue;
            ++d.sub_latents_seen;
            const double s = static_cast<double>(std::count(col.begin(), col.end(), std::uint8_t{1})) / parent_count;
            if (s < cfg.min_support || s > cfg.max_support) {
                ++d.sub_dropped;
                continue;
            }
            c.children.push_back({key.first, key.second, s, {}});
        }
        std::sort(c.children.begin(), c.children.end(), detail::by_support);
        if (c.children.size() > cfg.max_subsubconcepts) {
            d.sub_dropped += c.children.size() - cfg.max_subsubconcepts;
            c.children.resize(cfg.max_subsubconcepts);
        }
    }
    d.kept = std::move(pool);
    return d;
}

struct ConceptDiscovery {
    int node = -1;
    std::string name;
    PolarityDiscovery positive, negative;
};

inline ConceptDiscovery discover_for_concept(const EmbeddingHarvest& h, const std::string& name, const MlcsConfig& cfg, ad::Rng& rng) {
    ConceptDiscovery c;
    c.node = h.node;
    c.name = name;
    c.positive = discover_polarity(h, true, cfg, rng);
    if (cfg.discover_negative) {
        c.negative = discover_polarity(h, false, cfg, rng);
    } else {
        c.negative.polarity = Polarity::negative;
        c.negative.skipped_reason = "negative discovery disabled";
    }
    return c;
}

/// Where a discovered node's label comes from.
struct DiscoveredNode {
    int node = -1;
    int parent = -1;
    int concept_node = -1;  // provided ancestor
    Polarity state = Polarity::positive;  // which HiSAE (concept state) produced it
    int level = 1;                        // 1 sub-concept, 2 sub-sub-concept
    int latent = -1;
    int sub = -1;
    double support = 0.0;
};

struct MlcsResult {
    ConceptTree tree;
    std::vector<ConceptDiscovery> concepts;
    std::vector<DiscoveredNode> discovered;
    nlohmann::json report;

    const ConceptDiscovery& discovery_for(int concept_node) const {
        for (auto& c : concepts)
            if (c.node == concept_node) return c;
        throw NotFoundError("no discovery for node " + std::to_string(concept_node));
    }
};

/// Supervision for every node of `r.tree` on a split: provided labels from the
/// dataset, discovered labels from the stored HiSAEs applied to the CEM's
/// embeddings. A positive child is defined where its parent's label is 1, a
/// negative child where it is 0.
inline Supervision discovered_supervision(const MlcsResult& r, const models::ForwardOutput& cem_out, const data::SplitData& split,
                                          double threshold = 0.0) {
    const auto& tree = r.tree;
    const std::size_t n = split.size();
    Supervision sup;
    sup.labels.assign(tree.size(), std::vector<double>(n, 0.0));
    sup.defined.assign(tree.size(), std::vector<std::uint8_t>(n, 0));
    for (auto& node : tree.nodes()) {
        if (node.provided_index < 0) continue;
        for (std::size_t i = 0; i < n; ++i) {
            sup.labels[static_cast<std::size_t>(node.id)][i] = split.samples[i].concepts[static_cast<std::size_t>(node.provided_index)];
            sup.defined[static_cast<std::size_t>(node.id)][i] = 1;
        }
    }
    for (auto& c : r.concepts) {
        const auto h = harvest_from_output(cem_out, split, tree.node(c.node));
        for (const auto* pd : {&c.positive, &c.negative}) {
            if (!pd->attempted || pd->kept.empty()) continue;
            const auto rows = h.rows_in_state(pd->polarity == Polarity::positive);
            if (rows.empty()) continue;
            auto labels = binarize_latents(sae::hisae_forward(pd->params, sae::gather_rows(h.embeddings, rows)).activation, threshold);
            for (auto& d : r.discovered) {
                if (d.concept_node != c.node || d.state != pd->polarity) continue;
                const std::vector<std::uint8_t>* col = nullptr;
                if (d.level == 1) {
                    auto it = labels.top.find(d.latent);
                    if (it != labels.top.end()) col = &it->second;
                } else {
                    auto it = labels.sub.find({d.latent, d.sub});
                    if (it != labels.sub.end()) col = &it->second;
                }
                for (std::size_t t = 0; t < rows.size(); ++t)
                    sup.labels[static_cast<std::size_t>(d.node)][rows[t]] = col ? (*col)[t] : 0.0;
            }
        }
    }
    // definedness follows the tree top-down (node ids increase with depth of insertion)
    for (auto& node : tree.nodes()) {
        if (node.parent < 0) continue;
        const auto p = static_cast<std::size_t>(node.parent), id = static_cast<std::size_t>(node.id);
        for (std::size_t i = 0; i < n; ++i) {
            if (!sup.defined[p][i]) continue;
            const bool parent_on = sup.labels[p][i] > 0.5;
            sup.defined[id][i] = node.polarity == Polarity::positive ? parent_on : !parent_on;
            if (!sup.defined[id][i]) sup.labels[id][i] = 0.0;
        }
    }
    return sup;
}

inline nlohmann::json polarity_report(const PolarityDiscovery& d, const ConceptTree& tree, const std::vector<DiscoveredNode>& nodes) {
    nlohmann::json j = {{"polarity", models::to_string(d.polarity)}, {"attempted", d.attempted}, {"in_state_samples", d.in_state}};
    if (!d.attempted) {
        j["skipped"] = d.skipped_reason;
        return j;
    }
    j["final_loss"] = d.final_loss;
    j["explained_variance"] = d.explained_variance;
    j["dead_latents"] = d.dead_latents.size();
    j["latents_active"] = d.latents_seen;
    j["dropped_low_support"] = d.dropped_low;
    j["dropped_high_support"] = d.dropped_high;
    j["dropped_over_cap"] = d.dropped_cap;
    j["sub_latents_active"] = d.sub_latents_seen;
    j["sub_latents_dropped"] = d.sub_dropped;
    nlohmann::json kept = nlohmann::json::array();
    for (auto& dn : nodes) {
        if (dn.state != d.polarity) continue;
        kept.push_back({{"node", dn.node}, {"name", tree.node(dn.node).name}, {"level", dn.level}, {"latent", dn.latent},
                        {"sub_latent", dn.sub}, {"support", dn.support}});
    }
    j["kept"] = kept;
    return j;
}

/// Splits every configured provided concept of `cem` using `split`.
inline MlcsResult run_mlcs(const models::DeepHiCEM& cem, const data::SplitData& split, const MlcsConfig& cfg) {
    if (cem.config().kind != models::ModelKind::cem) throw ArgumentError("MLCS needs a concept embedding model");
    MlcsResult r;
    r.tree = cem.tree();
    ad::Rng rng(cfg.seed);
    const auto out = cem.forward(split.all_features());
    nlohmann::json concepts = nlohmann::json::array();
    for (const auto& name : cfg.split_concepts) {
        const int node = r.tree.find(name);
        if (node < 0) {
            concepts.push_back({{"concept", name}, {"skipped", "not in the concept tree"}});
            continue;
        }
        auto h = harvest_from_output(out, split, r.tree.node(node));
        auto c = discover_for_concept(h, name, cfg, rng);
        std::vector<DiscoveredNode> mine;
        for (const auto* pd : {&c.positive, &c.negative}) {
            const bool pos = pd->polarity == Polarity::positive;
            for (auto& k : pd->kept) {
                const std::string base = name + (pos ? "+" : "-") + std::to_string(k.latent);
                DiscoveredNode dn{r.tree.add_child(node, pd->polarity, base), node, node, pd->polarity, 1, k.latent, -1, k.support};
                r.tree.node(dn.node).latent = k.latent;
                r.tree.node(dn.node).support = k.support;
                mine.push_back(dn);
                for (auto& ch : k.children) {
                    DiscoveredNode dc{r.tree.add_child(dn.node, Polarity::positive, base + "." + std::to_string(ch.sub)), dn.node, node,
                                      pd->polarity, 2, k.latent, ch.sub, ch.support};
                    r.tree.node(dc.node).latent = ch.sub;
                    r.tree.node(dc.node).support = ch.support;
                    mine.push_back(dc);
                }
            }
        }
        nlohmann::json cj = {{"concept", name}, {"node", node}};
        cj["positive"] = polarity_report(c.positive, r.tree, mine);
        cj["negative"] = polarity_report(c.negative, r.tree, mine);
        concepts.push_back(cj);
        r.discovered.insert(r.discovered.end(), mine.begin(), mine.end());
        r.concepts.push_back(std::move(c));
    }
    r.tree.validate();
    r.report = {{"config", cfg.to_json()},
                {"concepts", concepts},
                {"tree_nodes", r.tree.size()},
                {"discovered_nodes", r.discovered.size()},
                {"max_depth", r.tree.max_depth()}};
    return r;
}

// -- persistence -------------------------------------------------------------

inline nlohmann::json discovered_to_json(const std::vector<DiscoveredNode>& nodes) {
    nlohmann::json a = nlohmann::json::array();
    for (auto& d : nodes)
        a.push_back({{"node", d.node}, {"parent", d.parent}, {"concept_node", d.concept_node}, {"state", models::to_string(d.state)},
                     {"level", d.level}, {"latent", d.latent}, {"sub_latent", d.sub}, {"support", d.support}});
    return a;
}

/// Writes tree manifest, HiSAE checkpoints, discovery report and a label
/// matrix container (labels/defined, [samples×nodes]) for the given split.
inline void save_mlcs(const std::filesystem::path& dir, const MlcsResult& r) {
    std::filesystem::create_directories(dir);
    models::save_tree(dir / "tree.json", r.tree);
    for (auto& c : r.concepts)
        for (const auto* pd : {&c.positive, &c.negative})
            if (pd->attempted)
                ad::save_container(dir / ("hisae_" + std::to_string(c.node) + "_" + models::to_string(pd->polarity) + ".ckpt"),
                                   pd->params.to_container());
    nlohmann::json meta = {{"format", "mlcs-discovery"}, {"version", 1}, {"discovered", discovered_to_json(r.discovered)}};
    nlohmann::json concepts = nlohmann::json::array();
    for (auto& c : r.concepts) {
        nlohmann::json cj = {{"node", c.node}, {"name", c.name}};
        for (const auto* pd : {&c.positive, &c.negative}) {
            nlohmann::json kept = nlohmann::json::array();
            for (auto& k : pd->kept) {
                nlohmann::json ch = nlohmann::json::array();
                for (auto& s : k.children) ch.push_back({{"sub", s.sub}, {"support", s.support}});
                kept.push_back({{"latent", k.latent}, {"support", k.support}, {"children", ch}});
            }
            cj[models::to_string(pd->polarity)] = {{"attempted", pd->attempted}, {"skipped", pd->skipped_reason}, {"in_state", pd->in_state},
                                                   {"kept", kept}};
        }
        concepts.push_back(cj);
    }
    meta["concepts"] = concepts;
    std::ofstream(dir / "discovery.json") << meta.dump(2) << '\n';
    std::ofstream(dir / "discovery_report.json") << r.report.dump(2) << '\n';
}

inline MlcsResult load_mlcs(const std::filesystem::path& dir) {
    if (!std::filesystem::exists(dir / "discovery.json")) throw PathError("discovery output missing: " + (dir / "discovery.json").string());
    MlcsResult r;
    r.tree = models::load_tree(dir / "tree.json");
    nlohmann::json meta;
    std::ifstream(dir / "discovery.json") >> meta;
    if (meta.value("format", "") != "mlcs-discovery" || meta.value("version", 0) != 1) throw FormatError("unsupported discovery file");
    for (auto& d : meta.at("discovered"))
        r.discovered.push_back({d.at("node"), d.at("parent"), d.at("concept_node"),
                                d.at("state") == "positive" ? Polarity::positive : Polarity::negative, d.at("level"), d.at("latent"),
                                d.at("sub_latent"), d.at("support")});
    for (auto& cj : meta.at("concepts")) {
        ConceptDiscovery c;
        c.node = cj.at("node");
        c.name = cj.at("name");
        for (auto* pd : {&c.positive, &c.negative}) {
            pd->polarity = pd == &c.positive ? Polarity::positive : Polarity::negative;
            const auto& pj = cj.at(models::to_string(pd->polarity));
            pd->attempted = pj.at("attempted");
            pd->skipped_reason = pj.at("skipped");
            pd->in_state = pj.at("in_state");
            for (auto& k : pj.at("kept")) {
                Candidate cand{k.at("latent"), -1, k.at("support"), {}};
                for (auto& s : k.at("children")) cand.children.push_back({cand.latent, s.at("sub"), s.at("support"), {}});
                pd->kept.push_back(cand);
            }
            if (pd->attempted)
                pd->params = sae::HiSAEParams::from_container(
                    ad::load_container(dir / ("hisae_" + std::to_string(c.node) + "_" + models::to_string(pd->polarity) + ".ckpt")));
        }
        r.concepts.push_back(std::move(c));
    }
    std::ifstream rep(dir / "discovery_report.json");
    if (rep) rep >> r.report;
    return r;
}

/// Label matrix file for one split: labels and defined flags, [samples×nodes].
inline void save_label_matrix(const std::filesystem::path& path, const Supervision& sup) {
    const std::size_t n = sup.samples(), k = sup.nodes();
    std::vector<double> labels(n * k), defined(n * k);
    for (std::size_t node = 0; node < k; ++node)
        for (std::size_t i = 0; i < n; ++i) {
            labels[i * k + node] = sup.labels[node][i];
            defined[i * k + node] = sup.defined[node][i];
        }
    ad::Container c;
    c.meta = {{"kind", "label-matrix"}, {"samples", n}, {"nodes", k}};
    c.put("labels", ad::Tensor::matrix(n, k, std::move(labels)));
    c.put("defined", ad::Tensor::matrix(n, k, std::move(defined)));
    ad::save_container(path, c);
}

inline Supervision load_label_matrix(const std::filesystem::path& path) {
    auto c = ad::load_container(path);
    if (c.meta.value("kind", "") != "label-matrix") throw FormatError(path.string() + " is not a label matrix");
    const auto& labels = c.get("labels");
    const auto& defined = c.get("defined");
    Supervision sup;
    sup.labels.assign(labels.cols(), std::vector<double>(labels.rows()));
    sup.defined.assign(labels.cols(), std::vector<std::uint8_t>(labels.rows()));
    for (std::size_t i = 0; i < labels.rows(); ++i)
        for (std::size_t node = 0; node < labels.cols(); ++node) {
            sup.labels[node][i] = labels.at(i, node);
            sup.defined[node][i] = defined.at(i, node) > 0.5;
        }
    return sup;
}

}  // namespace mlcs::discovery

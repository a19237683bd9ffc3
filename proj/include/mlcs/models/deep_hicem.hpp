#pragma once

// Deep hierarchical concept embedding model.
//
// x → backbone → h. Every top-level concept has embedding generators
// h → ĉ⁺′, ĉ⁻′ ∈ R^m; every sub-concept has generators fed by its parent's
// preliminary embedding of matching polarity. A node's final ĉ⁺ is the
// positive compressor applied to its positive children's mixtures (or ĉ⁺′
// for a node without positive children), symmetrically for ĉ⁻. The shared
// scorer gives p̂ = s([ĉ⁺′, ĉ⁻′]) and the node's mixture is
// p̂·ĉ⁺ + (1 − p̂)·ĉ⁻. The label predictor reads the top-level mixtures.
//
// A flat tree makes this a plain CEM. Two simpler families share the code
// path for baselines: a black box (label predictor on h) and a CBM (one
// probability head per top-level concept, label predictor on probabilities).

#include <cmath>
#include <deque>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "mlcs/autodiff/checkpoint.hpp"
#include "mlcs/autodiff/optim.hpp"
#include "mlcs/autodiff/tensor.hpp"
#include "mlcs/models/concept_tree.hpp"
#include "mlcs/models/intervention.hpp"

namespace mlcs::models {

enum class Activation { identity, leaky_relu, relu, tanh };
enum class ModelKind { black_box, cbm, cem };

inline const char* to_string(Activation a) {
    switch (a) {
        case Activation::identity: return "identity";
        case Activation::relu: return "relu";
        case Activation::tanh: return "tanh";
        default: return "leaky_relu";
    }
}
inline Activation activation_from_string(const std::string& s) {
    if (s == "identity") return Activation::identity;
    if (s == "relu") return Activation::relu;
    if (s == "tanh") return Activation::tanh;
    if (s == "leaky_relu") return Activation::leaky_relu;
    throw ConfigError("unknown activation '" + s + "'");
}
inline const char* to_string(ModelKind k) {
    switch (k) {
        case ModelKind::black_box: return "black_box";
        case ModelKind::cbm: return "cbm";
        default: return "cem";
    }
}
inline ModelKind model_kind_from_string(const std::string& s) {
    if (s == "black_box") return ModelKind::black_box;
    if (s == "cbm") return ModelKind::cbm;
    if (s == "cem") return ModelKind::cem;
    throw ConfigError("unknown model kind '" + s + "'");
}

inline constexpr double kLeakySlope = 0.01;

inline ad::Tensor activate(const ad::Tensor& x, Activation a) {
    switch (a) {
        case Activation::identity: return x;
        case Activation::relu: return ad::relu(x);
        case Activation::tanh: return ad::tanh(x);
        default: return ad::leaky_relu(x, kLeakySlope);
    }
}

struct ModelConfig {
    ModelKind kind = ModelKind::cem;
    std::size_t input_dim = 128;
    std::size_t backbone_width = 128;
    std::size_t n_hidden = 64;
    std::size_t m = 16;
    std::size_t n_tasks = 12;
    Activation backbone_activation = Activation::leaky_relu;
    Activation generator_activation = Activation::leaky_relu;
    std::uint64_t seed = 0;

    nlohmann::json to_json() const {
        return {{"kind", to_string(kind)}, {"input_dim", input_dim}, {"backbone_width", backbone_width},
                {"n_hidden", n_hidden},   {"m", m},                 {"n_tasks", n_tasks},
                {"backbone_activation", to_string(backbone_activation)},
                {"generator_activation", to_string(generator_activation)}, {"seed", seed}};
    }
    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.kind = model_kind_from_string(j.at("kind"));
        c.input_dim = j.at("input_dim");
        c.backbone_width = j.at("backbone_width");
        c.n_hidden = j.at("n_hidden");
        c.m = j.at("m");
        c.n_tasks = j.at("n_tasks");
        c.backbone_activation = activation_from_string(j.at("backbone_activation"));
        c.generator_activation = activation_from_string(j.at("generator_activation"));
        c.seed = j.at("seed");
        return c;
    }
};

struct NodeOutput {
    ad::Tensor pre_pos, pre_neg;  // preliminary embeddings ĉ⁺′, ĉ⁻′
    ad::Tensor pos, neg;          // final embeddings ĉ⁺, ĉ⁻
    ad::Tensor prob;              // p̂ [n×1], after any intervention
    ad::Tensor mixture;           // ĉ
};

struct ForwardOutput {
    ad::Tensor hidden;
    std::vector<NodeOutput> nodes;  // indexed by node id (empty for black boxes)
    ad::Tensor logits;

    /// p̂ for every node as an [n×nodes] matrix in node-id order.
    ad::Tensor probabilities() const {
        std::vector<ad::Tensor> cols;
        for (auto& n : nodes) cols.push_back(n.prob);
        return ad::concat_cols(cols);
    }

    double prob(int node, std::size_t row) const { return nodes[static_cast<std::size_t>(node)].prob[row]; }

    /// Row-wise softmax of the logits.
    std::vector<double> task_distribution(std::size_t row) const {
        const std::size_t c = logits.cols();
        std::vector<double> p(c);
        double mx = -INFINITY;
        for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, logits.at(row, j));
        double z = 0;
        for (std::size_t j = 0; j < c; ++j) z += p[j] = std::exp(logits.at(row, j) - mx);
        for (auto& v : p) v /= z;
        return p;
    }

    int predicted_task(std::size_t row) const {
        int best = 0;
        for (std::size_t j = 1; j < logits.cols(); ++j)
            if (logits.at(row, j) > logits.at(row, static_cast<std::size_t>(best))) best = static_cast<int>(j);
        return best;
    }
};

class DeepHiCEM {
public:
    struct Linear {
        ad::Parameter* w = nullptr;
        ad::Parameter* b = nullptr;
        explicit operator bool() const { return w != nullptr; }
        ad::Tensor operator()(const ad::Tensor& x) const { return ad::affine(x, w->value, b->value); }
    };
    struct NodeParams {
        Linear gen_pos, gen_neg;    // preliminary embedding generators
        Linear comp_pos, comp_neg;  // embedding compressors (only with children of that polarity)
        Linear cbm_head;            // CBM probability head
    };

    DeepHiCEM(ConceptTree tree, ModelConfig cfg) : tree_(std::move(tree)), cfg_(cfg) {
        tree_.validate();
        ad::Rng rng(cfg_.seed);
        backbone1_ = linear("backbone.layer1", cfg_.input_dim, cfg_.backbone_width, rng);
        backbone2_ = linear("backbone.layer2", cfg_.backbone_width, cfg_.n_hidden, rng);
        nodes_.resize(tree_.size());
        const std::size_t m = cfg_.m;
        if (cfg_.kind == ModelKind::cem) {
            scorer_ = linear("scorer", 2 * m, 1, rng);
            for (auto& n : tree_.nodes()) {
                const std::size_t in = n.parent < 0 ? cfg_.n_hidden : m;
                const std::string p = "node." + std::to_string(n.id) + ".";
                auto& np = nodes_[static_cast<std::size_t>(n.id)];
                np.gen_pos = linear(p + "gen_pos", in, m, rng);
                np.gen_neg = linear(p + "gen_neg", in, m, rng);
                if (!n.children_pos.empty()) np.comp_pos = linear(p + "comp_pos", n.children_pos.size() * m, m, rng);
                if (!n.children_neg.empty()) np.comp_neg = linear(p + "comp_neg", n.children_neg.size() * m, m, rng);
            }
            predictor_ = linear("label_predictor", tree_.roots().size() * m, cfg_.n_tasks, rng);
        } else if (cfg_.kind == ModelKind::cbm) {
            for (int r : tree_.roots())
                nodes_[static_cast<std::size_t>(r)].cbm_head = linear("node." + std::to_string(r) + ".head", cfg_.n_hidden, 1, rng);
            predictor_ = linear("label_predictor", tree_.roots().size(), cfg_.n_tasks, rng);
        } else {
            predictor_ = linear("label_predictor", cfg_.n_hidden, cfg_.n_tasks, rng);
        }
    }

    DeepHiCEM(const DeepHiCEM&) = delete;
    DeepHiCEM& operator=(const DeepHiCEM&) = delete;
    DeepHiCEM(DeepHiCEM&&) = default;

    const ConceptTree& tree() const { return tree_; }
    const ModelConfig& config() const { return cfg_; }
    const NodeParams& node_params(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
    const Linear& scorer() const { return scorer_; }
    const Linear& label_predictor() const { return predictor_; }
    const Linear& backbone_layer(int i) const { return i == 0 ? backbone1_ : backbone2_; }

    std::vector<ad::Parameter*> parameters() {
        std::vector<ad::Parameter*> out;
        for (auto& p : params_) out.push_back(&p);
        return out;
    }
    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (auto& p : params_) n += p.value.size();
        return n;
    }
    ad::Parameter& parameter(const std::string& name) {
        for (auto& p : params_)
            if (p.name == name) return p;
        throw NotFoundError("no parameter named " + name);
    }

    ad::Tensor backbone_forward(const ad::Tensor& x) const {
        if (x.rank() != 2 || x.cols() != cfg_.input_dim)
            throw DimensionError("backbone expects [batch×" + std::to_string(cfg_.input_dim) + "], got " + ad::to_string(x.shape()));
        return backbone2_(activate(backbone1_(x), cfg_.backbone_activation));
    }

    ForwardOutput forward(const ad::Tensor& x, const BatchInterventions* iv = nullptr) const {
        if (iv && iv->rows != x.rows()) throw DimensionError("intervention rows do not match the batch");
        ForwardOutput out;
        out.hidden = backbone_forward(x);
        if (cfg_.kind == ModelKind::black_box) {
            out.logits = predictor_(out.hidden);
            return out;
        }
        out.nodes.resize(tree_.size());
        std::vector<ad::Tensor> top;
        for (int r : tree_.roots()) {
            if (cfg_.kind == ModelKind::cbm) {
                auto& no = out.nodes[static_cast<std::size_t>(r)];
                no.prob = apply_override(r, ad::sigmoid(nodes_[static_cast<std::size_t>(r)].cbm_head(out.hidden)), iv);
                top.push_back(no.prob);
            } else {
                node_forward(r, out.hidden, iv, out);
                top.push_back(out.nodes[static_cast<std::size_t>(r)].mixture);
            }
        }
        out.logits = predictor_(ad::concat_cols(top));
        return out;
    }

    /// Computes `id` and its subtree into `out` from the node's input
    /// (h for roots, the parent's matching preliminary embedding otherwise).
    void node_forward(int id, const ad::Tensor& input, const BatchInterventions* iv, ForwardOutput& out) const {
        const auto& n = tree_.node(id);
        const auto& np = nodes_[static_cast<std::size_t>(id)];
        auto& no = out.nodes[static_cast<std::size_t>(id)];
        no.pre_pos = activate(np.gen_pos(input), cfg_.generator_activation);
        no.pre_neg = activate(np.gen_neg(input), cfg_.generator_activation);
        no.pos = compress(n.children_pos, np.comp_pos, no.pre_pos, iv, out);
        no.neg = compress(n.children_neg, np.comp_neg, no.pre_neg, iv, out);
        no.prob = apply_override(id, ad::sigmoid(scorer_(ad::concat_cols({no.pre_pos, no.pre_neg}))), iv);
        no.mixture = ad::mix(no.prob, no.pos, no.neg);
    }

    // -- persistence -------------------------------------------------------

    ad::Container to_container(const nlohmann::json& extra_meta = nlohmann::json::object()) const {
        ad::Container c;
        c.meta = extra_meta;
        c.meta["kind"] = "deep-hicem";
        c.meta["model"] = cfg_.to_json();
        c.meta["tree_nodes"] = tree_.size();
        for (auto& p : params_) c.put(p.name, p.value);
        return c;
    }

    void save(const std::filesystem::path& checkpoint, const std::filesystem::path& manifest,
              const nlohmann::json& extra_meta = nlohmann::json::object()) const {
        save_tree(manifest, tree_);
        ad::save_container(checkpoint, to_container(extra_meta));
    }

    static DeepHiCEM from_container(ConceptTree tree, const ad::Container& c) {
        if (c.meta.value("kind", "") != "deep-hicem") throw FormatError("container does not hold a concept model");
        if (c.meta.at("tree_nodes").get<std::size_t>() != tree.size())
            throw FormatError("checkpoint was trained on a tree with " + c.meta.at("tree_nodes").dump() + " nodes, manifest has " +
                              std::to_string(tree.size()));
        DeepHiCEM model(std::move(tree), ModelConfig::from_json(c.meta.at("model")));
        model.load_values(c);
        return model;
    }

    static DeepHiCEM load(const std::filesystem::path& checkpoint, const std::filesystem::path& manifest) {
        if (!std::filesystem::exists(checkpoint)) throw PathError("model checkpoint missing: " + checkpoint.string());
        return from_container(load_tree(manifest), ad::load_container(checkpoint));
    }

    void load_values(const ad::Container& c) {
        for (auto& p : params_) {
            const auto& src = c.get(p.name);
            if (src.shape() != p.value.shape()) throw FormatError("parameter " + p.name + " has shape " + ad::to_string(src.shape()));
            std::copy(src.data().begin(), src.data().end(), p.value.mutable_data().begin());
        }
    }

    /// Snapshot of every parameter value (for best-epoch restoration).
    std::vector<std::vector<double>> snapshot() const {
        std::vector<std::vector<double>> s;
        for (auto& p : params_) s.emplace_back(p.value.data().begin(), p.value.data().end());
        return s;
    }
    void restore(const std::vector<std::vector<double>>& s) {
        std::size_t i = 0;
        for (auto& p : params_) {
            std::copy(s[i].begin(), s[i].end(), p.value.mutable_data().begin());
            ++i;
        }
    }

private:
    Linear linear(const std::string& name, std::size_t in, std::size_t out, ad::Rng& rng) {
        params_.emplace_back(name + ".w", ad::glorot(in, out, rng));
        Linear l;
        l.w = &params_.back();
        params_.emplace_back(name + ".b", ad::Tensor::zeros({out}));
        l.b = &params_.back();
        return l;
    }

    ad::Tensor compress(const std::vector<int>& children, const Linear& comp, const ad::Tensor& preliminary,
                        const BatchInterventions* iv, ForwardOutput& out) const {
        if (children.empty()) return preliminary;
        std::vector<ad::Tensor> mixtures;
        for (int c : children) {
            node_forward(c, preliminary, iv, out);
            mixtures.push_back(out.nodes[static_cast<std::size_t>(c)].mixture);
        }
        return activate(comp(ad::concat_cols(mixtures)), cfg_.generator_activation);
    }

    static ad::Tensor apply_override(int id, ad::Tensor prob, const BatchInterventions* iv) {
        if (iv && iv->covers(id)) return ad::override_values(prob, iv->node_flags(id));
        return prob;
    }

    ConceptTree tree_;
    ModelConfig cfg_;
    std::deque<ad::Parameter> params_;
    Linear backbone1_, backbone2_, scorer_, predictor_;
    std::vector<NodeParams> nodes_;
};

/// A depth-1 tree with one provided node per dataset concept column.
inline ConceptTree flat_tree(const std::vector<std::string>& concept_names) {
    ConceptTree t;
    for (std::size_t i = 0; i < concept_names.size(); ++i) t.add_top(concept_names[i], static_cast<int>(i));
    return t;
}

}  // namespace mlcs::models

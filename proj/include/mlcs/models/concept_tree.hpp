#pragma once

// Concept hierarchy shared by the models, discovery, evaluation, and service.
// Node ids are dense indices; children keep insertion order, which is also
// the order their mixtures are concatenated in the embedding compressors.

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mlcs/error.hpp"

namespace mlcs::models {

enum class Polarity { none, positive, negative };
enum class Source { provided, discovered };

inline const char* to_string(Polarity p) {
    switch (p) {
        case Polarity::positive: return "positive";
        case Polarity::negative: return "negative";
        default: return "none";
    }
}

inline const char* to_string(Source s) { return s == Source::provided ? "provided" : "discovered"; }

struct ConceptNode {
    int id = -1;
    std::string name;
    int parent = -1;
    Polarity polarity = Polarity::none;
    Source source = Source::provided;
    std::vector<int> children_pos;
    std::vector<int> children_neg;
    int provided_index = -1;  // column in the dataset concept labels (top-level provided nodes)
    int latent = -1;          // originating HiSAE latent (discovered nodes)
    double support = 0.0;     // fraction of in-state training samples carrying the label

    bool is_leaf() const { return children_pos.empty() && children_neg.empty(); }
};

class ConceptTree {
public:
    int add_top(std::string name, int provided_index) {
        ConceptNode n;
        n.id = static_cast<int>(nodes_.size());
        n.name = std::move(name);
        n.provided_index = provided_index;
        roots_.push_back(n.id);
        nodes_.push_back(std::move(n));
        return nodes_.back().id;
    }

    int add_child(int parent, Polarity polarity, std::string name, Source source = Source::discovered) {
        check(parent);
        if (polarity == Polarity::none) throw ArgumentError("child concepts need a polarity");
        ConceptNode n;
        n.id = static_cast<int>(nodes_.size());
        n.name = std::move(name);
        n.parent = parent;
        n.polarity = polarity;
        n.source = source;
        auto& siblings = polarity == Polarity::positive ? nodes_[static_cast<std::size_t>(parent)].children_pos
                                                        : nodes_[static_cast<std::size_t>(parent)].children_neg;
        siblings.push_back(n.id);
        nodes_.push_back(std::move(n));
        return nodes_.back().id;
    }

    std::size_t size() const { return nodes_.size(); }
    const std::vector<int>& roots() const { return roots_; }
    const ConceptNode& node(int id) const {
        check(id);
        return nodes_[static_cast<std::size_t>(id)];
    }
    ConceptNode& node(int id) {
        check(id);
        return nodes_[static_cast<std::size_t>(id)];
    }
    const std::vector<ConceptNode>& nodes() const { return nodes_; }
    bool contains(int id) const { return id >= 0 && static_cast<std::size_t>(id) < nodes_.size(); }

    /// Number of edges between the node and its root (roots have depth 0).
    int depth(int id) const {
        int d = 0;
        for (int p = node(id).parent; p >= 0; p = node(p).parent) ++d;
        return d;
    }
    int max_depth() const {
        int d = 0;
        for (auto& n : nodes_) d = std::max(d, depth(n.id));
        return d;
    }
    int root_of(int id) const {
        while (node(id).parent >= 0) id = node(id).parent;
        return id;
    }
    int find(const std::string& name) const {
        for (auto& n : nodes_)
            if (n.name == name) return n.id;
        return -1;
    }

    nlohmann::json to_json() const {
        nlohmann::json nodes = nlohmann::json::array();
        for (auto& n : nodes_) {
            nlohmann::json j = {{"id", n.id},
                                {"name", n.name},
                                {"parent", n.parent},
                                {"polarity", to_string(n.polarity)},
                                {"source", to_string(n.source)},
                                {"children_pos", n.children_pos},
                                {"children_neg", n.children_neg}};
            if (n.provided_index >= 0) j["provided_index"] = n.provided_index;
            if (n.source == Source::discovered) {
                j["latent"] = n.latent;
                j["support"] = n.support;
            }
            nodes.push_back(std::move(j));
        }
        return {{"format", "concept-tree"}, {"version", 1}, {"roots", roots_}, {"nodes", nodes}};
    }

    static ConceptTree from_json(const nlohmann::json& j) {
        if (j.value("format", "") != "concept-tree") throw FormatError("not a concept tree manifest");
        if (j.value("version", 0) != 1) throw FormatError("unsupported tree manifest version");
        ConceptTree t;
        for (auto& jn : j.at("nodes")) {
            ConceptNode n;
            n.id = jn.at("id");
            if (n.id != static_cast<int>(t.nodes_.size())) throw FormatError("tree manifest ids must be dense and ordered");
            n.name = jn.at("name");
            n.parent = jn.at("parent");
            const std::string pol = jn.at("polarity");
            n.polarity = pol == "positive" ? Polarity::positive : pol == "negative" ? Polarity::negative : Polarity::none;
            n.source = jn.at("source") == "provided" ? Source::provided : Source::discovered;
            n.children_pos = jn.at("children_pos").get<std::vector<int>>();
            n.children_neg = jn.at("children_neg").get<std::vector<int>>();
            n.provided_index = jn.value("provided_index", -1);
            n.latent = jn.value("latent", -1);
            n.support = jn.value("support", 0.0);
            t.nodes_.push_back(std::move(n));
        }
        t.roots_ = j.at("roots").get<std::vector<int>>();
        t.validate();
        return t;
    }

    /// Every node has exactly one parent link consistent with the child lists and no cycles.
    void validate() const {
        std::vector<int> seen(nodes_.size(), 0);
        for (int r : roots_) {
            if (!contains(r) || node(r).parent != -1) throw FormatError("invalid root " + std::to_string(r));
            ++seen[static_cast<std::size_t>(r)];
        }
        for (auto& n : nodes_) {
            for (int c : n.children_pos) {
                if (!contains(c) || node(c).parent != n.id || node(c).polarity != Polarity::positive)
                    throw FormatError("inconsistent positive child " + std::to_string(c));
                ++seen[static_cast<std::size_t>(c)];
            }
            for (int c : n.children_neg) {
                if (!contains(c) || node(c).parent != n.id || node(c).polarity != Polarity::negative)
                    throw FormatError("inconsistent negative child " + std::to_string(c));
                ++seen[static_cast<std::size_t>(c)];
            }
        }
        for (std::size_t i = 0; i < seen.size(); ++i)
            if (seen[i] != 1) throw FormatError("node " + std::to_string(i) + " is not reachable exactly once");
        // parents precede children, so parent chains terminate
        for (auto& n : nodes_)
            if (n.parent >= n.id) throw FormatError("node " + std::to_string(n.id) + " listed before its parent");
    }

private:
    void check(int id) const {
        if (!contains(id)) throw NotFoundError("unknown concept node " + std::to_string(id));
    }

    std::vector<ConceptNode> nodes_;
    std::vector<int> roots_;
};

inline void save_tree(const std::filesystem::path& path, const ConceptTree& tree) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw PathError("cannot write " + path.string());
    out << tree.to_json().dump(2) << '\n';
}

inline ConceptTree load_tree(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw PathError("tree manifest missing: " + path.string());
    return ConceptTree::from_json(nlohmann::json::parse(in));
}

}  // namespace mlcs::models

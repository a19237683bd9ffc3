#pragma once

// Transport-free core of the intervention service: a frozen Deep-HiCEM over
// one run, plus isolated per-session intervention states.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>

#include <json.hpp>

#include "mlcs/data/generator.hpp"
#include "mlcs/models/intervention.hpp"
#include "mlcs/models/training.hpp"
#include "mlcs/pipeline/pipeline.hpp"

namespace mlcs::service {

using Json = nlohmann::json;
using Clock = std::chrono::steady_clock;

struct Bundle {
    data::Dataset dataset;
    std::unique_ptr<models::DeepHiCEM> model;
    Json prototypes = Json::object();
    Json metrics = Json::object();
    std::string version;
};

inline std::string fingerprint(const std::vector<std::filesystem::path>& files) {
    std::uint64_t h = 1469598103934665603ull;
    for (auto& f : files) {
        std::ifstream in(f, std::ios::binary);
        if (!in) throw PathError("cannot read " + f.string());
        for (std::istreambuf_iterator<char> it(in), end; it != end; ++it) h = (h ^ static_cast<unsigned char>(*it)) * 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

/// Deep-HiCEM `replica` of a finished run, its dataset, prototypes and metrics.
inline Bundle load_bundle(const pipeline::RunPaths& paths, std::size_t replica = 0) {
    Bundle b;
    b.dataset = pipeline::load_run_dataset(paths);
    b.model = std::make_unique<models::DeepHiCEM>(pipeline::load_model(paths, "deep_hicem", replica));
    if (std::filesystem::exists(paths.prototypes())) b.prototypes = pipeline::read_json_file(paths.prototypes());
    const auto metrics = paths.reports() / "metrics.json";
    if (std::filesystem::exists(metrics)) b.metrics = pipeline::read_json_file(metrics);
    b.version = fingerprint({paths.deep_hicem(replica), paths.tree()});
    return b;
}

/// Per-node p̂ with override flags, and the task distribution, for one sample.
inline Json prediction_json(const models::DeepHiCEM& model, const data::Catalog& catalog, const data::Sample& sample,
                            const models::InterventionState& state) {
    auto x = ad::Tensor::matrix(1, sample.features.size(), sample.features);
    std::vector<models::InterventionState> states{state};
    auto iv = models::BatchInterventions::from_states(model.tree(), states);
    const auto out = model.forward(x, &iv);
    Json nodes = Json::array();
    for (auto& n : model.tree().nodes()) {
        Json o = nullptr;
        if (auto it = state.propagated.find(n.id); it != state.propagated.end()) o = it->second;
        nodes.push_back({{"id", n.id}, {"p", out.prob(n.id, 0)}, {"override", o}, {"propagated", state.is_induced(n.id)}});
    }
    const int top = out.predicted_task(0);
    return {{"nodes", nodes},
            {"task", {{"distribution", out.task_distribution(0)}, {"predicted", top}, {"predicted_name", catalog.recipes[static_cast<std::size_t>(top)].name}}}};
}

inline Json prediction_delta(const Json& before, const Json& after) {
    Json nodes = Json::array();
    for (std::size_t i = 0; i < after.at("nodes").size(); ++i) {
        const double a = before["nodes"][i]["p"], b = after["nodes"][i]["p"];
        if (a != b) nodes.push_back({{"id", after["nodes"][i]["id"]}, {"before", a}, {"after", b}});
    }
    Json task = Json::array();
    const auto& da = before["task"]["distribution"];
    const auto& db = after["task"]["distribution"];
    for (std::size_t k = 0; k < db.size(); ++k) task.push_back(db[k].get<double>() - da[k].get<double>());
    return {{"nodes", nodes}, {"task", task}, {"top1_changed", before["task"]["predicted"] != after["task"]["predicted"]}};
}

class Engine {
public:
    explicit Engine(Bundle bundle, std::chrono::seconds idle_ttl = std::chrono::minutes(30), std::function<Clock::time_point()> clock = Clock::now)
        : b_(std::move(bundle)), ttl_(idle_ttl), clock_(std::move(clock)) {
        if (!b_.model) throw ArgumentError("service needs a model");
    }

    const std::string& version() const { return b_.version; }
    const models::ConceptTree& tree() const { return b_.model->tree(); }

    Json tree_json() const { return tree().to_json(); }

    Json samples(const std::string& split_name, std::size_t offset, std::size_t limit) const {
        const auto& split = b_.dataset.split(split_name);
        Json items = Json::array();
        for (std::size_t i = offset; i < std::min(split.size(), offset + limit); ++i) items.push_back(sample_json(split, i));
        return {{"split", split_name}, {"total", split.size()}, {"offset", offset}, {"samples", items}};
    }

    Json create_session(std::size_t sample_id, const std::string& split_name = "test") {
        const auto& split = b_.dataset.split(split_name);
        if (sample_id >= split.size()) throw NotFoundError("unknown sample " + std::to_string(sample_id) + " in split " + split_name);
        auto s = std::make_shared<Session>();
        s->split = split_name;
        s->sample = sample_id;
        s->last = prediction_json(*b_.model, b_.dataset.catalog, split.samples[sample_id], s->state);
        std::lock_guard lock(mu_);
        expire_locked();
        s->id = "s" + std::to_string(++counter_);
        s->last_used = clock_();
        sessions_[s->id] = s;
        return {{"session_id", s->id}, {"sample", sample_json(split, sample_id)}, {"prediction", s->last}};
    }

    Json intervene(const std::string& id, int node, int value) {
        return update(id, [&](const models::InterventionState& st) { return models::intervene(tree(), st, node, value); });
    }

    Json remove_intervention(const std::string& id, int node) {
        if (!tree().contains(node)) throw NotFoundError("unknown concept node " + std::to_string(node));
        return update(id, [&](const models::InterventionState& st) { return models::remove_intervention(tree(), st, node); });
    }

    Json session(const std::string& id) {
        auto s = find(id);
        std::lock_guard lock(s->mu);
        return session_json(*s, s->last);
    }

    Json prototypes(int node, std::size_t n) const {
        if (!tree().contains(node)) throw NotFoundError("unknown concept node " + std::to_string(node));
        if (tree().node(node).source != models::Source::discovered) throw NotFoundError("node " + std::to_string(node) + " is not a discovered concept");
        const auto& nodes = b_.prototypes.value("nodes", Json::object());
        const auto key = std::to_string(node);
        if (!nodes.contains(key)) throw NotFoundError("no prototypes recorded for node " + key);
        const auto& entry = nodes.at(key);
        const std::string split_name = b_.prototypes.value("split", "train");
        const auto& split = b_.dataset.split(split_name);
        Json items = Json::array();
        for (std::size_t i = 0; i < std::min(n, entry.at("samples").size()); ++i) {
            const std::size_t sid = entry["samples"][i];
            auto j = sample_json(split, sid);
            j["activation"] = entry["activations"][i];
            items.push_back(j);
        }
        return {{"node", node}, {"name", tree().node(node).name}, {"split", split_name}, {"prototypes", items}};
    }

    const Json& metrics() const { return b_.metrics; }

    std::size_t session_count() {
        std::lock_guard lock(mu_);
        expire_locked();
        return sessions_.size();
    }

private:
    struct Session {
        std::string id, split;
        std::size_t sample = 0;
        models::InterventionState state;
        Json last;
        Clock::time_point last_used;
        std::mutex mu;
    };

    Json sample_json(const data::SplitData& split, std::size_t i) const {
        const auto& s = split.samples[i];
        const auto& cat = b_.dataset.catalog;
        Json atoms = Json::array(), visible = Json::array();
        for (int a : s.atoms) atoms.push_back(data::atom_name(cat, a));
        for (int a : s.visible) visible.push_back(data::atom_name(cat, a));
        return {{"id", i}, {"task", s.task}, {"task_name", cat.recipes[static_cast<std::size_t>(s.task)].name}, {"atoms", atoms}, {"visible_atoms", visible}};
    }

    Json session_json(const Session& s, const Json& prediction) const {
        Json overrides = Json::array();
        for (auto [node, v] : s.state.overrides) overrides.push_back({{"node_id", node}, {"value", v}});
        return {{"session_id", s.id}, {"sample_id", s.sample}, {"split", s.split}, {"overrides", overrides}, {"prediction", prediction}};
    }

    std::shared_ptr<Session> find(const std::string& id) {
        std::lock_guard lock(mu_);
        expire_locked();
        auto it = sessions_.find(id);
        if (it == sessions_.end()) throw NotFoundError("unknown session " + id);
        it->second->last_used = clock_();
        return it->second;
    }

    template <class F>
    Json update(const std::string& id, F&& change) {
        auto s = find(id);
        std::lock_guard lock(s->mu);
        auto next = change(s->state);
        auto pred = prediction_json(*b_.model, b_.dataset.catalog, b_.dataset.split(s->split).samples[s->sample], next);
        auto delta = prediction_delta(s->last, pred);
        s->state = std::move(next);
        s->last = pred;
        auto j = session_json(*s, pred);
        j["delta"] = delta;
        return j;
    }

    void expire_locked() {
        const auto now = clock_();
        std::erase_if(sessions_, [&](auto& kv) { return now - kv.second->last_used > ttl_; });
    }

    Bundle b_;
    std::chrono::seconds ttl_;
    std::function<Clock::time_point()> clock_;
    std::mutex mu_;
    std::map<std::string, std::shared_ptr<Session>> sessions_;
    std::uint64_t counter_ = 0;
};

}  // namespace mlcs::service

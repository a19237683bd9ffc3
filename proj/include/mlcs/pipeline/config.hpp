#pragma once

// Run configuration: defaults < config file < command-line overrides.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mlcs/data/generator.hpp"
#include "mlcs/mlcs/discovery.hpp"
#include "mlcs/models/training.hpp"

namespace mlcs::pipeline {

struct ModelSettings {
    std::size_t backbone_width = 128;
    std::size_t n_hidden = 64;
    std::size_t m = 16;
    double lambda = 10.0;
    double p_int = 0.25;
    double lr = 1e-3;
    std::size_t batch_size = 256;
    std::size_t epochs = 20;
    std::size_t patience = 8;
    std::string backbone_activation = "leaky_relu";
    std::string generator_activation = "leaky_relu";
};

struct EvalSettings {
    std::size_t replicas = 3;
    std::size_t prototypes = 20;
};

struct RunConfig {
    std::uint64_t seed = 0;
    data::DatasetConfig dataset;
    ModelSettings model;
    discovery::MlcsConfig mlcs;
    EvalSettings eval;
    std::string dataset_dir;
    std::string run_dir;

    /// Full-scale hyperparameters in place of the desk-scale profile.
    static RunConfig paper_scale() {
        RunConfig c;
        c.model.epochs = 300;
        c.model.patience = 75;
        c.mlcs.hisae = {.K = 4096, .k = 32, .K_s = 512, .k_s = 16};
        c.mlcs.train.lr = 3e-4;
        return c;
    }

    nlohmann::json to_json() const {
        const auto& d = dataset;
        const auto& h = mlcs.hisae;
        return {{"seed", seed},
                {"dataset",
                 {{"n_train", d.n_train}, {"n_val", d.n_val}, {"n_test", d.n_test}, {"dim", d.dim}, {"noise_sd", d.noise_sd},
                  {"signal_scale", d.signal_scale}, {"variant_spread", d.variant_spread}, {"occlusion", d.occlusion}}},
                {"model",
                 {{"backbone_width", model.backbone_width}, {"n_hidden", model.n_hidden}, {"m", model.m}, {"lambda", model.lambda},
                  {"p_int", model.p_int}, {"lr", model.lr}, {"batch_size", model.batch_size}, {"epochs", model.epochs},
                  {"patience", model.patience}, {"backbone_activation", model.backbone_activation},
                  {"generator_activation", model.generator_activation}}},
                {"hisae",
                 {{"K", h.K}, {"k", h.k}, {"K_s", h.K_s}, {"k_s", h.k_s}, {"residual_sub_input", h.residual_sub_input},
                  {"lr", mlcs.train.lr}, {"epochs", mlcs.train.epochs}, {"batch_size", mlcs.train.batch_size},
                  {"normalize_decoder", mlcs.train.normalize_decoder}}},
                {"mlcs",
                 {{"split_concepts", mlcs.split_concepts}, {"min_support", mlcs.min_support}, {"max_support", mlcs.max_support},
                  {"magnitude_threshold", mlcs.magnitude_threshold}, {"min_state_samples", mlcs.min_state_samples},
                  {"max_subconcepts", mlcs.max_subconcepts}, {"max_subsubconcepts", mlcs.max_subsubconcepts},
                  {"discover_negative", mlcs.discover_negative}}},
                {"eval", {{"replicas", eval.replicas}, {"prototypes", eval.prototypes}}},
                {"paths", {{"dataset_dir", dataset_dir}, {"run_dir", run_dir}}}};
    }

    /// Reads every key of a full configuration document (as produced by to_json).
    static RunConfig from_json(const nlohmann::json& j) {
        RunConfig c;
        auto get = [&](const char* section, const char* key, auto& into) {
            const std::string name = std::string(section) + (*section ? "." : "") + key;
            try {
                const auto& v = *section ? j.at(section).at(key) : j.at(key);
                into = v.get<std::remove_reference_t<decltype(into)>>();
            } catch (const nlohmann::json::exception& e) {
                throw ConfigError("config key '" + name + "': " + e.what());
            }
        };
        get("", "seed", c.seed);
        auto& d = c.dataset;
        get("dataset", "n_train", d.n_train);
        get("dataset", "n_val", d.n_val);
        get("dataset", "n_test", d.n_test);
        get("dataset", "dim", d.dim);
        get("dataset", "noise_sd", d.noise_sd);
        get("dataset", "signal_scale", d.signal_scale);
        get("dataset", "variant_spread", d.variant_spread);
        get("dataset", "occlusion", d.occlusion);
        auto& m = c.model;
        get("model", "backbone_width", m.backbone_width);
        get("model", "n_hidden", m.n_hidden);
        get("model", "m", m.m);
        get("model", "lambda", m.lambda);
        get("model", "p_int", m.p_int);
        get("model", "lr", m.lr);
        get("model", "batch_size", m.batch_size);
        get("model", "epochs", m.epochs);
        get("model", "patience", m.patience);
        get("model", "backbone_activation", m.backbone_activation);
        get("model", "generator_activation", m.generator_activation);
        auto& h = c.mlcs.hisae;
        get("hisae", "K", h.K);
        get("hisae", "k", h.k);
        get("hisae", "K_s", h.K_s);
        get("hisae", "k_s", h.k_s);
        get("hisae", "residual_sub_input", h.residual_sub_input);
        get("hisae", "lr", c.mlcs.train.lr);
        get("hisae", "epochs", c.mlcs.train.epochs);
        get("hisae", "batch_size", c.mlcs.train.batch_size);
        get("hisae", "normalize_decoder", c.mlcs.train.normalize_decoder);
        auto& x = c.mlcs;
        get("mlcs", "split_concepts", x.split_concepts);
        get("mlcs", "min_support", x.min_support);
        get("mlcs", "max_support", x.max_support);
        get("mlcs", "magnitude_threshold", x.magnitude_threshold);
        get("mlcs", "min_state_samples", x.min_state_samples);
        get("mlcs", "max_subconcepts", x.max_subconcepts);
        get("mlcs", "max_subsubconcepts", x.max_subsubconcepts);
        get("mlcs", "discover_negative", x.discover_negative);
        get("eval", "replicas", c.eval.replicas);
        get("eval", "prototypes", c.eval.prototypes);
        get("paths", "dataset_dir", c.dataset_dir);
        get("paths", "run_dir", c.run_dir);
        c.sync_seeds();
        return c;
    }

    void sync_seeds() {
        dataset.seed = seed;
        mlcs.seed = seed;
    }

    void validate() const {
        auto fail = [](const std::string& key, const std::string& why) { throw ConfigError("config key '" + key + "': " + why); };
        if (dataset.n_train == 0) fail("dataset.n_train", "must be positive");
        if (dataset.n_val == 0) fail("dataset.n_val", "must be positive");
        if (dataset.n_test == 0) fail("dataset.n_test", "must be positive");
        if (dataset.dim == 0) fail("dataset.dim", "must be positive");
        if (dataset.noise_sd < 0) fail("dataset.noise_sd", "must be non-negative");
        if (!(dataset.occlusion >= 0 && dataset.occlusion < 1)) fail("dataset.occlusion", "must lie in [0,1)");
        if (model.m == 0) fail("model.m", "must be positive");
        if (model.n_hidden == 0) fail("model.n_hidden", "must be positive");
        if (model.backbone_width == 0) fail("model.backbone_width", "must be positive");
        if (model.lambda < 0) fail("model.lambda", "must be non-negative");
        if (!(model.p_int >= 0 && model.p_int <= 1)) fail("model.p_int", "must lie in [0,1]");
        if (!(model.lr > 0)) fail("model.lr", "must be positive");
        if (model.batch_size == 0) fail("model.batch_size", "must be positive");
        if (model.patience == 0) fail("model.patience", "must be positive");
        for (auto [key, value] : {std::pair{"model.backbone_activation", &model.backbone_activation},
                                  std::pair{"model.generator_activation", &model.generator_activation}}) {
            try {
                models::activation_from_string(*value);
            } catch (const ConfigError& e) {
                fail(key, e.what());
            }
        }
        const auto& h = mlcs.hisae;
        if (h.k == 0 || h.k > h.K) fail("hisae.k", "must satisfy 1 <= k <= K");
        if (h.k_s > h.K_s) fail("hisae.k_s", "must not exceed K_s");
        if (!(mlcs.train.lr > 0)) fail("hisae.lr", "must be positive");
        if (mlcs.train.batch_size == 0) fail("hisae.batch_size", "must be positive");
        if (!(mlcs.min_support >= 0 && mlcs.min_support <= mlcs.max_support && mlcs.max_support <= 1))
            fail("mlcs.min_support", "need 0 <= min_support <= max_support <= 1");
        if (eval.replicas == 0) fail("eval.replicas", "must be positive");
    }
};

/// RFC 7386 merge of `patch` into `base`, rejecting keys `base` lacks.
inline void merge_known(nlohmann::json& base, const nlohmann::json& patch, const std::string& prefix = "") {
    if (!patch.is_object()) throw ConfigError("config " + (prefix.empty() ? std::string("document") : "key '" + prefix + "'") + " must be an object");
    for (auto& [key, value] : patch.items()) {
        const std::string name = prefix.empty() ? key : prefix + "." + key;
        if (!base.contains(key)) throw ConfigError("unknown config key '" + name + "'");
        if (base[key].is_object()) merge_known(base[key], value, name);
        else base[key] = value;
    }
}

/// `key=value` with a dotted key; the value is parsed as JSON and falls back
/// to a plain string.
inline void apply_override(nlohmann::json& cfg, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not KEY=VALUE");
    const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
    nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    nlohmann::json patch = value;
    std::string rest = key;
    std::vector<std::string> parts;
    for (std::size_t p; (p = rest.find('.')) != std::string::npos; rest = rest.substr(p + 1)) parts.push_back(rest.substr(0, p));
    parts.push_back(rest);
    for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = nlohmann::json{{*it, patch}};
    merge_known(cfg, patch);
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw PathError("cannot read " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

/// Defaults (desk or full scale), then the file, then `--set` overrides.
inline RunConfig resolve_config(bool paper_scale, const std::string& file, const std::vector<std::string>& overrides) {
    auto j = (paper_scale ? RunConfig::paper_scale() : RunConfig{}).to_json();
    if (!file.empty()) merge_known(j, read_json_file(file));
    for (auto& o : overrides) apply_override(j, o);
    auto c = RunConfig::from_json(j);
    c.validate();
    return c;
}

}  // namespace mlcs::pipeline

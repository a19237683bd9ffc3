#pragma once

// Pipeline stages over a run directory:
//   dataset -> concept models (CEM and baselines) -> MLCS -> Deep-HiCEM -> reports.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include <spdlog/spdlog.h>
#include <json.hpp>

#include "mlcs/eval/reports.hpp"
#include "mlcs/mlcs/discovery.hpp"
#include "mlcs/models/training.hpp"
#include "mlcs/pipeline/config.hpp"

namespace mlcs::pipeline {

namespace fs = std::filesystem;

inline constexpr const char* kBaselineKinds[] = {"black_box", "cbm", "cem"};

struct RunPaths {
    fs::path root;
    fs::path dataset_override;

    fs::path config() const { return root / "config.json"; }
    fs::path dataset() const { return dataset_override.empty() ? root / "dataset" : dataset_override; }
    fs::path models() const { return root / "models"; }
    fs::path discovery() const { return root / "discovery"; }
    fs::path reports() const { return root / "reports"; }
    fs::path provided_tree() const { return models() / "provided_tree.json"; }
    fs::path model(std::string_view kind, std::size_t replica) const {
        return models() / (std::string(kind) + "_" + std::to_string(replica) + ".ckpt");
    }
    fs::path deep_hicem(std::size_t replica) const { return model("deep_hicem", replica); }
    fs::path tree() const { return discovery() / "tree.json"; }
    fs::path labels(std::string_view split) const { return discovery() / ("labels_" + std::string(split) + ".ckpt"); }
    fs::path prototypes() const { return discovery() / "prototypes.json"; }

    static RunPaths of(const RunConfig& cfg) {
        if (cfg.run_dir.empty()) throw UsageError("no run directory given");
        return {cfg.run_dir, cfg.dataset_dir};
    }
};

/// Seed for a named sub-task (splitmix64 over the run seed, tag and replica).
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag, std::size_t replica = 0) {
    std::uint64_t h = 1469598103934665603ull;
    for (char c : tag) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ull;
    std::uint64_t z = seed + h + 0x9e3779b97f4a7c15ull * (replica + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline void write_text(const fs::path& path, const std::string& text) {
    fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw PathError("cannot write " + path.string());
    out << text;
}

inline void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

inline void require_file(const fs::path& path, std::string_view what, std::string_view produced_by) {
    if (!fs::exists(path))
        throw PathError(std::string(what) + " missing: " + path.string() + " (run '" + std::string(produced_by) + "' first)");
}

class StageTimer {
public:
    explicit StageTimer(std::string name) : name_(std::move(name)), start_(std::chrono::steady_clock::now()) {
        spdlog::info("{}: start", name_);
    }
    ~StageTimer() {
        spdlog::info("{}: done in {:.1f}s", name_,
                     std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count());
    }

private:
    std::string name_;
    std::chrono::steady_clock::time_point start_;
};

// -- dataset -----------------------------------------------------------------

inline data::Dataset generate_data(const RunConfig& cfg, const RunPaths& paths) {
    StageTimer t("gen-data");
    auto ds = data::generate_dataset(cfg.dataset);
    data::save_dataset(paths.dataset(), ds);
    spdlog::info("dataset written to {} ({}/{}/{} samples)", paths.dataset().string(), ds.train.size(), ds.val.size(), ds.test.size());
    return ds;
}

/// Loads the run's dataset, generating it first when the directory holds none.
/// A stored dataset wins over the configured parameters (with a warning).
inline data::Dataset ensure_dataset(RunConfig& cfg, const RunPaths& paths) {
    if (!fs::exists(paths.dataset() / "catalog.json")) return generate_data(cfg, paths);
    auto ds = data::load_dataset(paths.dataset());
    if (data::dataset_config_json(ds.config) != data::dataset_config_json(cfg.dataset)) {
        spdlog::warn("dataset at {} was generated with different parameters; using the stored ones", paths.dataset().string());
        cfg.dataset = ds.config;
        cfg.seed = ds.config.seed;
        cfg.sync_seeds();
    }
    return ds;
}

inline data::Dataset load_run_dataset(const RunPaths& paths) {
    require_file(paths.dataset() / "catalog.json", "dataset", "gen-data");
    return data::load_dataset(paths.dataset());
}

// -- concept models ------------------------------------------------------------

inline models::ModelConfig model_config(const RunConfig& cfg, const data::Dataset& ds, models::ModelKind kind, std::uint64_t seed) {
    models::ModelConfig m;
    m.kind = kind;
    m.input_dim = ds.encoder.dim();
    m.backbone_width = cfg.model.backbone_width;
    m.n_hidden = cfg.model.n_hidden;
    m.m = cfg.model.m;
    m.backbone_activation = models::activation_from_string(cfg.model.backbone_activation);
    m.generator_activation = models::activation_from_string(cfg.model.generator_activation);
    m.n_tasks = ds.catalog.recipes.size();
    m.seed = seed;
    return m;
}

inline models::TrainConfig train_config(const RunConfig& cfg, std::uint64_t seed, std::string label) {
    models::TrainConfig t;
    t.lr = cfg.model.lr;
    t.batch_size = cfg.model.batch_size;
    t.epochs = cfg.model.epochs;
    t.patience = cfg.model.patience;
    t.lambda = cfg.model.lambda;
    t.p_int = cfg.model.p_int;
    t.seed = seed;
    t.on_epoch = [label = std::move(label)](std::size_t e, double tr, double va) {
        spdlog::debug("{} epoch {} train {:.5f} val {:.5f}", label, e, tr, va);
    };
    return t;
}

inline models::ConceptTree provided_tree(const data::Catalog& catalog) {
    std::vector<std::string> names;
    for (auto& c : catalog.top_concepts) names.push_back(c.name);
    return models::flat_tree(names);
}

inline nlohmann::json history_json(const models::TrainHistory& h) {
    return {{"epochs_run", h.train_loss.size()}, {"best_epoch", h.best_epoch}, {"best_val_loss", h.best_val_loss},
            {"train_loss", h.train_loss}, {"val_loss", h.val_loss}};
}

/// Trains `replicas` copies of the CEM and of the black-box and CBM baselines
/// on the provided concepts.
inline void train_concept_models(const RunConfig& cfg, const RunPaths& paths, const data::Dataset& ds) {
    StageTimer t("train-cem");
    const auto tree = provided_tree(ds.catalog);
    fs::create_directories(paths.models());
    models::save_tree(paths.provided_tree(), tree);
    const auto train_sup = models::provided_supervision(tree, ds.train);
    const auto val_sup = models::provided_supervision(tree, ds.val);
    nlohmann::json log = nlohmann::json::object();
    for (const char* kind_name : kBaselineKinds) {
        const auto kind = models::model_kind_from_string(kind_name);
        for (std::size_t r = 0; r < cfg.eval.replicas; ++r) {
            const std::string label = std::string(kind_name) + "[" + std::to_string(r) + "]";
            models::DeepHiCEM model(tree, model_config(cfg, ds, kind, derive_seed(cfg.seed, std::string(kind_name) + ".init", r)));
            auto h = models::train_model(model, ds.train, train_sup, ds.val, val_sup,
                                         train_config(cfg, derive_seed(cfg.seed, std::string(kind_name) + ".train", r), label));
            ad::save_container(paths.model(kind_name, r), model.to_container({{"replica", r}}));
            log[kind_name].push_back(history_json(h));
            spdlog::info("{}: best epoch {} val loss {:.5f}", label, h.best_epoch, h.best_val_loss);
        }
    }
    write_json(paths.models() / "training_baselines.json", log);
}

inline models::DeepHiCEM load_model(const RunPaths& paths, std::string_view kind, std::size_t replica) {
    const bool deep = kind == "deep_hicem";
    const auto ckpt = paths.model(kind, replica);
    require_file(ckpt, "model checkpoint", deep ? "train-deep-hicem" : "train-cem");
    const auto manifest = deep ? paths.tree() : paths.provided_tree();
    require_file(manifest, "tree manifest", deep ? "discover" : "train-cem");
    return models::DeepHiCEM::load(ckpt, manifest);
}

// -- discovery ---------------------------------------------------------------

/// Top prototype samples (training split) of every discovered node.
inline nlohmann::json discovery_prototypes(const discovery::MlcsResult& r, const models::ForwardOutput& cem_train, const data::SplitData& train,
                                           std::size_t top_n) {
    nlohmann::json nodes = nlohmann::json::object();
    for (auto& c : r.concepts) {
        const auto h = discovery::harvest_from_output(cem_train, train, r.tree.node(c.node));
        for (const auto* pd : {&c.positive, &c.negative}) {
            if (!pd->attempted) continue;
            const auto rows = h.rows_in_state(pd->polarity == models::Polarity::positive);
            const auto act = sae::hisae_forward(pd->params, sae::gather_rows(h.embeddings, rows)).activation;
            for (auto& d : r.discovered) {
                if (d.concept_node != c.node || d.state != pd->polarity) continue;
                const sae::LatentRef ref{d.latent, d.level == 2 ? d.sub : -1};
                auto ids = sae::prototypes(act, rows, ref, top_n);
                nlohmann::json values = nlohmann::json::array();
                for (auto id : ids) {
                    const auto pos = static_cast<std::size_t>(std::lower_bound(rows.begin(), rows.end(), id) - rows.begin());
                    values.push_back(ref.sub < 0 ? act.value(pos, ref.latent) : act.sub_value(pos, ref.latent, ref.sub));
                }
                nodes[std::to_string(d.node)] = {{"samples", ids}, {"activations", values}};
            }
        }
    }
    return {{"format", "prototypes"}, {"version", 1}, {"split", "train"}, {"nodes", nodes}};
}

inline discovery::MlcsResult discover(const RunConfig& cfg, const RunPaths& paths, const data::Dataset& ds) {
    StageTimer t("discover");
    const auto cem = load_model(paths, "cem", 0);
    auto r = discovery::run_mlcs(cem, ds.train, cfg.mlcs);
    discovery::save_mlcs(paths.discovery(), r);
    const auto train_out = models::predict(cem, ds.train);
    for (const auto* split : {&ds.train, &ds.val, &ds.test}) {
        const std::string name = split == &ds.train ? "train" : split == &ds.val ? "val" : "test";
        const auto out = split == &ds.train ? train_out : models::predict(cem, *split);
        discovery::save_label_matrix(paths.labels(name), discovery::discovered_supervision(r, out, *split, cfg.mlcs.magnitude_threshold));
    }
    write_json(paths.prototypes(), discovery_prototypes(r, train_out, ds.train, cfg.eval.prototypes));
    std::size_t subs = 0, subsubs = 0;
    for (auto& d : r.discovered) (d.level == 1 ? subs : subsubs) += 1;
    spdlog::info("discovered {} sub-concepts and {} sub-sub-concepts ({} tree nodes)", subs, subsubs, r.tree.size());
    return r;
}

// -- Deep-HiCEM --------------------------------------------------------------

inline void train_deep_hicems(const RunConfig& cfg, const RunPaths& paths, const data::Dataset& ds) {
    StageTimer t("train-deep-hicem");
    require_file(paths.tree(), "discovered tree", "discover");
    require_file(paths.labels("train"), "discovered labels", "discover");
    require_file(paths.labels("val"), "discovered labels", "discover");
    const auto tree = models::load_tree(paths.tree());
    const auto train_sup = discovery::load_label_matrix(paths.labels("train"));
    const auto val_sup = discovery::load_label_matrix(paths.labels("val"));
    if (train_sup.nodes() != tree.size() || train_sup.samples() != ds.train.size() || val_sup.samples() != ds.val.size())
        throw FormatError("discovered label matrices do not match the tree and dataset");
    nlohmann::json log = nlohmann::json::array();
    for (std::size_t r = 0; r < cfg.eval.replicas; ++r) {
        const std::string label = "deep_hicem[" + std::to_string(r) + "]";
        models::DeepHiCEM model(tree, model_config(cfg, ds, models::ModelKind::cem, derive_seed(cfg.seed, "deep_hicem.init", r)));
        auto h = models::train_model(model, ds.train, train_sup, ds.val, val_sup, train_config(cfg, derive_seed(cfg.seed, "deep_hicem.train", r), label));
        fs::create_directories(paths.models());
        ad::save_container(paths.deep_hicem(r), model.to_container({{"replica", r}}));
        log.push_back(history_json(h));
        spdlog::info("{}: best epoch {} val loss {:.5f}", label, h.best_epoch, h.best_val_loss);
    }
    write_json(paths.models() / "training_deep_hicem.json", log);
}

// -- evaluation --------------------------------------------------------------

struct Rq3Checks {
    bool provided_monotone = false;
    bool provided_improves = false;
    bool discovered_bounded = false;
    bool discovered_present = false;
};

inline Rq3Checks rq3_checks(const eval::InterventionCurve& provided, const eval::InterventionCurve& discovered) {
    Rq3Checks c;
    c.provided_monotone = eval::largest_drop(provided) <= 0.01;
    c.provided_improves = provided.points.back().mean > provided.points.front().mean;
    c.discovered_present = discovered.points.size() > 1;
    c.discovered_bounded = discovered.points.back().mean >= discovered.points.front().mean - 0.02;
    return c;
}

struct Evaluation {
    std::vector<eval::ModelScore> scores;
    std::vector<eval::Rq2Row> rq2;
    std::vector<eval::Rq1Report> rq1;  // per Deep-HiCEM replica
    eval::InterventionCurve provided_curve, discovered_curve;
    Rq3Checks rq3;
};

struct Rq1Aggregate {
    eval::MeanStd sub_matched, subsub_matched, mean_auc, mean_sub_auc, mean_subsub_auc;
};

inline Rq1Aggregate aggregate_rq1(const std::vector<eval::Rq1Report>& reports) {
    std::vector<double> a, b, c, d, e;
    for (auto& r : reports) {
        a.push_back(static_cast<double>(r.summary.sub_matched));
        b.push_back(static_cast<double>(r.summary.subsub_matched));
        c.push_back(r.summary.mean_auc);
        d.push_back(r.summary.mean_sub_auc);
        e.push_back(r.summary.mean_subsub_auc);
    }
    return {eval::mean_std(a), eval::mean_std(b), eval::mean_std(c), eval::mean_std(d), eval::mean_std(e)};
}

inline std::string summary_text(const Evaluation& ev, std::size_t sub_total, std::size_t subsub_total) {
    std::string s = "RQ2: task accuracy and provided-concept ROC-AUC (test split)\n";
    for (auto& r : ev.rq2) {
        s += fmt::format("  {:<11} accuracy {:.4f} +- {:.4f}", r.model, r.accuracy.mean, r.accuracy.std);
        if (r.provided_auc) s += fmt::format("  provided AUC {:.4f} +- {:.4f}", r.provided_auc->mean, r.provided_auc->std);
        s += fmt::format("  ({} replicas)\n", r.replicas);
    }
    const auto a = aggregate_rq1(ev.rq1);
    s += "RQ1: concept-bank matching of discovered concepts\n";
    for (std::size_t r = 0; r < ev.rq1.size(); ++r) {
        const auto& m = ev.rq1[r].summary;
        s += fmt::format("  replica {}: sub {}/{} sub-sub {}/{} mean AUC {:.4f} (sub {:.4f}, sub-sub {:.4f})\n", r, m.sub_matched, sub_total,
                         m.subsub_matched, subsub_total, m.mean_auc, m.mean_sub_auc, m.mean_subsub_auc);
        for (auto& w : ev.rq1[r].warnings) s += "    warning: " + w + "\n";
    }
    s += fmt::format("  mean: sub {:.2f} sub-sub {:.2f} mean AUC {:.4f} +- {:.4f}\n", a.sub_matched.mean, a.subsub_matched.mean, a.mean_auc.mean,
                     a.mean_auc.std);
    s += "RQ3: task accuracy under interventions (mean over replicas)\n";
    for (const auto* c : {&ev.provided_curve, &ev.discovered_curve}) {
        s += fmt::format("  {}: {} targets, accuracy {:.4f} -> {:.4f}, largest drop {:.4f}\n", c->target, c->points.size() - 1,
                         c->points.front().mean, c->points.back().mean, eval::largest_drop(*c));
    }
    return s;
}

inline nlohmann::json metrics_json(const Evaluation& ev, const models::ConceptTree& tree) {
    const auto a = aggregate_rq1(ev.rq1);
    nlohmann::json rq1 = nlohmann::json::array();
    for (auto& r : ev.rq1) rq1.push_back(eval::rq1_to_json(r, tree));
    return {{"rq1",
             {{"replicas", rq1},
              {"sub_matched", eval::mean_std_json(a.sub_matched)},
              {"subsub_matched", eval::mean_std_json(a.subsub_matched)},
              {"mean_auc", eval::mean_std_json(a.mean_auc)},
              {"mean_sub_auc", eval::mean_std_json(a.mean_sub_auc)},
              {"mean_subsub_auc", eval::mean_std_json(a.mean_subsub_auc)}}},
            {"rq2", eval::rq2_to_json(ev.rq2, ev.scores)},
            {"rq3",
             {{"provided", eval::curve_to_json(ev.provided_curve)},
              {"discovered", eval::curve_to_json(ev.discovered_curve)},
              {"provided_largest_drop", eval::largest_drop(ev.provided_curve)},
              {"discovered_largest_drop", eval::largest_drop(ev.discovered_curve)}}}};
}

/// Scores every trained model on the test split and writes the reports.
inline Evaluation evaluate(const RunConfig& cfg, const RunPaths& paths, const data::Dataset& ds) {
    StageTimer t("evaluate");
    Evaluation ev;
    for (const char* kind : kBaselineKinds)
        for (std::size_t r = 0; r < cfg.eval.replicas; ++r) ev.scores.push_back(eval::score_model(kind, r, load_model(paths, kind, r), ds.test));
    std::vector<models::DeepHiCEM> deep;
    for (std::size_t r = 0; r < cfg.eval.replicas; ++r) {
        deep.push_back(load_model(paths, "deep_hicem", r));
        const auto out = models::predict(deep.back(), ds.test);
        ev.scores.push_back({"deep_hicem", r, eval::task_accuracy(out, ds.test), eval::provided_concept_auc(out, deep.back().tree(), ds.test)});
        ev.rq1.push_back(eval::rq1_report(out, deep.back().tree(), ds.catalog, ds.test));
    }
    ev.rq2 = eval::rq2_report(ev.scores);

    std::vector<const models::DeepHiCEM*> ptrs;
    std::vector<std::uint64_t> seeds;
    for (std::size_t r = 0; r < deep.size(); ++r) {
        ptrs.push_back(&deep[r]);
        seeds.push_back(derive_seed(cfg.seed, "curve", r));
    }
    const auto& tree = deep.front().tree();
    ev.provided_curve = eval::intervention_curve(ptrs, ds.test, eval::provided_targets(tree, ds.test), seeds, "provided");
    ev.discovered_curve = eval::intervention_curve(ptrs, ds.test, eval::discovered_targets(ev.rq1.front().matches, ds.test), seeds, "discovered");
    ev.rq3 = rq3_checks(ev.provided_curve, ev.discovered_curve);

    const auto dir = paths.reports();
    write_json(dir / "metrics.json", metrics_json(ev, tree));
    write_text(dir / "rq2.csv", eval::rq2_csv(ev.scores));
    std::string matches = eval::matches_csv_header();
    for (std::size_t r = 0; r < ev.rq1.size(); ++r) matches += eval::matches_csv_rows(ev.rq1[r].matches, tree, r);
    write_text(dir / "rq1_matches.csv", matches);
    write_text(dir / "curves.csv", eval::curves_csv({ev.provided_curve, ev.discovered_curve}));
    write_text(dir / "curves.svg", eval::curves_svg({ev.provided_curve, ev.discovered_curve}));
    const auto text = summary_text(ev, ds.catalog.sub_bank_count(), ds.catalog.subsub_bank_count());
    write_text(dir / "summary.txt", text);
    spdlog::info("reports written to {}\n{}", dir.string(), text);
    return ev;
}

// -- configuration bookkeeping -------------------------------------------------

/// Logs the effective configuration and stores it in the run directory.
inline void record_config(const RunConfig& cfg, const RunPaths& paths, std::string_view command) {
    const auto j = cfg.to_json();
    spdlog::info("{} with seed {} in {}", command, cfg.seed, paths.root.string());
    spdlog::info("effective config: {}", j.dump());
    write_json(paths.config(), j);
}

inline Evaluation run_all(RunConfig cfg) {
    const auto paths = RunPaths::of(cfg);
    StageTimer t("run-all");
    auto ds = ensure_dataset(cfg, paths);
    record_config(cfg, paths, "run-all");
    train_concept_models(cfg, paths, ds);
    discover(cfg, paths, ds);
    train_deep_hicems(cfg, paths, ds);
    return evaluate(cfg, paths, ds);
}

}  // namespace mlcs::pipeline

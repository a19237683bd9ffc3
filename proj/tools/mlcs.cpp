#include <chrono>
#include <cstdlib>
#include <ctime>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "mlcs/pipeline/pipeline.hpp"
#include "mlcs/service/server.hpp"

namespace fs = std::filesystem;
using namespace mlcs;

namespace {

struct CommonOptions {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string dataset_dir;
    std::string run_dir;
    std::vector<std::string> sets;
    bool paper_scale = false;
    bool verbose = false;
};

int exit_code(const Error& e) {
    const std::string c = e.category();
    if (c == "usage") return 2;
    if (c == "config") return 3;
    if (c == "path") return 4;
    if (c == "format") return 5;
    if (c == "training" || c == "numeric") return 6;
    if (c == "not-found") return 7;
    return 8;
}

std::string timestamp() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    localtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", &tm);
    return buf;
}

/// --run-dir, else $MLCS_RUN_DIR, else (when allowed) a fresh runs/<timestamp>-seed<N>.
std::string locate_run_dir(const CommonOptions& o, bool may_create, std::uint64_t seed) {
    if (!o.run_dir.empty()) return o.run_dir;
    if (const char* env = std::getenv("MLCS_RUN_DIR"); env && *env) return env;
    if (!may_create) throw UsageError("no run directory: pass --run-dir or set MLCS_RUN_DIR");
    return (fs::path("runs") / (timestamp() + "-seed" + std::to_string(seed))).string();
}

/// Resolves the effective configuration. An existing run directory's
/// config.json stands in for --config when none is given.
pipeline::RunConfig load_config(const CommonOptions& o, bool may_create) {
    std::vector<std::string> sets = o.sets;
    if (o.seed) sets.push_back("seed=" + std::to_string(*o.seed));
    std::string file = o.config;
    std::string dir = o.run_dir;
    if (dir.empty())
        if (const char* env = std::getenv("MLCS_RUN_DIR"); env && *env) dir = env;
    if (file.empty() && !dir.empty() && fs::exists(fs::path(dir) / "config.json")) file = (fs::path(dir) / "config.json").string();
    if (!file.empty()) spdlog::info("config file: {}", file);
    auto cfg = pipeline::resolve_config(o.paper_scale, file, sets);
    if (!o.dataset_dir.empty()) cfg.dataset_dir = o.dataset_dir;
    cfg.run_dir = locate_run_dir(o, may_create, cfg.seed);
    return cfg;
}

void add_common(CLI::App* app, CommonOptions& o) {
    app->add_option("--config", o.config, "JSON configuration file");
    app->add_option("--seed", o.seed, "Run seed");
    app->add_option("--dataset-dir", o.dataset_dir, "Dataset directory (default: <run-dir>/dataset)");
    app->add_option("--run-dir", o.run_dir, "Run directory (default: $MLCS_RUN_DIR or runs/<timestamp>-seed<N>)");
    app->add_option("--set", o.sets, "Override a config key, e.g. --set model.epochs=5")->type_name("KEY=VALUE");
    app->add_flag("--paper-scale", o.paper_scale, "Start from the full-scale hyperparameters");
    app->add_flag("-v,--verbose", o.verbose, "Per-epoch logging");
}

int node_by_spec(const models::ConceptTree& tree, const std::string& spec) {
    if (int id = tree.find(spec); id >= 0) return id;
    try {
        std::size_t used = 0;
        const int id = std::stoi(spec, &used);
        if (used == spec.size() && tree.contains(id)) return id;
    } catch (const std::exception&) {
    }
    throw NotFoundError("unknown concept node '" + spec + "'");
}

}  // namespace

int main(int argc, char** argv) {
    spdlog::set_default_logger(spdlog::stderr_color_mt("mlcs"));
    spdlog::set_pattern("[%H:%M:%S.%e] [%^%l%$] %v");

    CLI::App app{"Multi-level concept splitting and Deep-HiCEM pipeline"};
    app.require_subcommand(1);
    CommonOptions o;

    auto* gen = app.add_subcommand("gen-data", "Generate the symbolic PseudoKitchens-2 dataset");
    auto* cem = app.add_subcommand("train-cem", "Train the CEM and the black-box and CBM baselines");
    auto* disc = app.add_subcommand("discover", "Run MLCS on the trained CEM");
    auto* deep = app.add_subcommand("train-deep-hicem", "Train Deep-HiCEMs on the discovered concept tree");
    auto* evl = app.add_subcommand("evaluate", "Write RQ1-RQ3 reports for a trained run");
    auto* itv = app.add_subcommand("intervene", "Predict one sample under interventions");
    auto* plot = app.add_subcommand("plot", "Render intervention curves to SVG");
    auto* serve = app.add_subcommand("serve", "Serve the intervention API and UI");
    auto* all = app.add_subcommand("run-all", "Run every stage end to end");
    for (auto* s : {gen, cem, disc, deep, evl, itv, plot, serve, all}) add_common(s, o);

    std::size_t replica = 0, sample = 0;
    std::string split = "test";
    std::vector<std::string> interventions;
    itv->add_option("--replica", replica, "Deep-HiCEM replica");
    itv->add_option("--sample", sample, "Sample index")->required();
    itv->add_option("--split", split, "Split (train, val, test)");
    itv->add_option("--do", interventions, "Intervention NODE=0|1 (name or id), applied in order")->type_name("NODE=VALUE");

    std::string plot_in, plot_out;
    plot->add_option("--input", plot_in, "Curve table (default: <run-dir>/reports/curves.csv)");
    plot->add_option("--output", plot_out, "SVG path (default: next to the input)");

    int port = 8080;
    std::string host = "127.0.0.1", ui_dir;
    serve->add_option("--port", port, "HTTP port");
    serve->add_option("--host", host, "Bind address");
    serve->add_option("--ui-dir", ui_dir, "Built UI bundle served under /");
    serve->add_option("--replica", replica, "Deep-HiCEM replica to serve");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    }
    if (o.verbose) spdlog::set_level(spdlog::level::debug);

    try {
        if (*gen) {
            auto cfg = load_config(o, true);
            const auto paths = pipeline::RunPaths::of(cfg);
            pipeline::record_config(cfg, paths, "gen-data");
            pipeline::generate_data(cfg, paths);
        } else if (*cem) {
            auto cfg = load_config(o, true);
            const auto paths = pipeline::RunPaths::of(cfg);
            auto ds = pipeline::ensure_dataset(cfg, paths);
            pipeline::record_config(cfg, paths, "train-cem");
            pipeline::train_concept_models(cfg, paths, ds);
        } else if (*disc || *deep || *evl) {
            auto cfg = load_config(o, false);
            const auto paths = pipeline::RunPaths::of(cfg);
            const auto ds = pipeline::load_run_dataset(paths);
            pipeline::record_config(cfg, paths, disc->parsed() ? "discover" : deep->parsed() ? "train-deep-hicem" : "evaluate");
            if (*disc) pipeline::discover(cfg, paths, ds);
            if (*deep) pipeline::train_deep_hicems(cfg, paths, ds);
            if (*evl) pipeline::evaluate(cfg, paths, ds);
        } else if (*itv) {
            auto cfg = load_config(o, false);
            service::Engine engine(service::load_bundle(pipeline::RunPaths::of(cfg), replica));
            auto result = engine.create_session(sample, split);
            const std::string id = result["session_id"];
            for (auto& spec : interventions) {
                const auto eq = spec.rfind('=');
                if (eq == std::string::npos) throw UsageError("intervention '" + spec + "' is not NODE=VALUE");
                const std::string value = spec.substr(eq + 1);
                if (value != "0" && value != "1") throw UsageError("intervention value must be 0 or 1 in '" + spec + "'");
                result = engine.intervene(id, node_by_spec(engine.tree(), spec.substr(0, eq)), value == "1");
            }
            for (auto& n : result["prediction"]["nodes"]) n["name"] = engine.tree().node(n["id"].get<int>()).name;
            result["model_version"] = engine.version();
            std::cout << result.dump(2) << '\n';
        } else if (*plot) {
            fs::path in = plot_in;
            if (in.empty()) in = pipeline::RunPaths::of(load_config(o, false)).reports() / "curves.csv";
            std::ifstream f(in);
            if (!f) throw PathError("curve table missing: " + in.string() + " (run 'evaluate' first)");
            const auto curves = eval::parse_curves_csv(f);
            const fs::path out = plot_out.empty() ? in.parent_path() / (in.stem().string() + ".svg") : fs::path(plot_out);
            pipeline::write_text(out, eval::curves_svg(curves));
            spdlog::info("plot written to {}", out.string());
        } else if (*serve) {
            auto cfg = load_config(o, false);
            service::Engine engine(service::load_bundle(pipeline::RunPaths::of(cfg), replica));
            httplib::Server server;
            service::install_routes(server, engine, ui_dir);
            spdlog::info("serving {} (model {}) on http://{}:{}{}", cfg.run_dir, engine.version(), host, port, service::kApiPrefix);
            if (!server.listen(host, port)) throw PathError("cannot listen on " + host + ":" + std::to_string(port));
        } else if (*all) {
            auto cfg = load_config(o, true);
            pipeline::run_all(cfg);
        }
    } catch (const Error& e) {
        spdlog::error("{} error: {}", e.category(), e.what());
        return exit_code(e);
    } catch (const std::exception& e) {
        spdlog::error("internal error: {}", e.what());
        return 1;
    }
    return 0;
}

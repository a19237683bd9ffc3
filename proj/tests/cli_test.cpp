#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

struct Result {
    int code = -1;
    std::string output;  // stdout and stderr
};

Result run(const std::string& args) {
    const std::string cmd = "env -u MLCS_RUN_DIR " + std::string(MLCS_CLI_PATH) + " " + args + " 2>&1";
    Result r;
    FILE* p = popen(cmd.c_str(), "r");
    if (!p) return r;
    std::array<char, 4096> buf{};
    for (std::size_t n; (n = fread(buf.data(), 1, buf.size(), p)) > 0;) r.output.append(buf.data(), n);
    const int status = pclose(p);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

const std::string kTiny =
    " --set dataset.n_train=600 --set dataset.n_val=100 --set dataset.n_test=100 --set model.epochs=2 --set hisae.epochs=3"
    " --set eval.replicas=2 --set mlcs.max_subconcepts=3 --set mlcs.max_subsubconcepts=2";

fs::path scratch(const std::string& name) {
    auto d = fs::temp_directory_path() / ("mlcs_cli_" + name);
    fs::remove_all(d);
    return d;
}

// One tiny end-to-end run shared by the tests that need trained artifacts.
const fs::path& tiny_run() {
    static const fs::path dir = [] {
        auto d = scratch("tiny");
        auto r = run("run-all --seed 4 --run-dir " + d.string() + kTiny);
        EXPECT_EQ(r.code, 0) << r.output;
        return d;
    }();
    return dir;
}

}  // namespace

TEST(Cli, UnknownSubcommandIsAUsageError) {
    auto r = run("frobnicate");
    EXPECT_EQ(r.code, 2);
}

TEST(Cli, HelpSucceeds) {
    auto r = run("--help");
    EXPECT_EQ(r.code, 0);
    EXPECT_NE(r.output.find("run-all"), std::string::npos);
}

TEST(Cli, MissingRunDirectoryIsAUsageError) {
    auto r = run("discover");
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.output.find("MLCS_RUN_DIR"), std::string::npos);
}

TEST(Cli, UnknownConfigKeyIsAConfigError) {
    auto r = run("gen-data --run-dir " + scratch("badkey").string() + " --set model.nonsense=1");
    EXPECT_EQ(r.code, 3);
    EXPECT_NE(r.output.find("model.nonsense"), std::string::npos);
}

TEST(Cli, EvaluateWithoutModelNamesTheCheckpoint) {
    const auto d = scratch("nomodel");
    ASSERT_EQ(run("gen-data --run-dir " + d.string() + kTiny).code, 0);
    auto r = run("evaluate --run-dir " + d.string());
    EXPECT_EQ(r.code, 4);
    EXPECT_NE(r.output.find("black_box_0.ckpt"), std::string::npos) << r.output;
    fs::remove_all(d);
}

TEST(Cli, MissingConfigFileIsAPathError) {
    auto r = run("gen-data --run-dir " + scratch("nofile").string() + " --config /nonexistent.json");
    EXPECT_EQ(r.code, 4);
}

TEST(Cli, RunAllWritesEveryReport) {
    const auto& d = tiny_run();
    for (const char* f : {"config.json", "reports/metrics.json", "reports/rq2.csv", "reports/rq1_matches.csv", "reports/curves.csv",
                          "reports/curves.svg", "reports/summary.txt", "discovery/tree.json", "discovery/prototypes.json",
                          "discovery/discovery_report.json", "discovery/labels_train.ckpt", "models/deep_hicem_1.ckpt", "models/cbm_1.ckpt"})
        EXPECT_TRUE(fs::exists(d / f)) << f;
    auto metrics = nlohmann::json::parse(slurp(d / "reports/metrics.json"));
    EXPECT_EQ(metrics["rq2"]["models"].size(), 4u);
    EXPECT_EQ(metrics["rq1"]["replicas"].size(), 2u);
}

TEST(Cli, LoggedConfigReproducesTheRun) {
    const auto& d = tiny_run();
    const auto again = scratch("again");
    auto r = run("run-all --config " + (d / "config.json").string() + " --run-dir " + again.string());
    ASSERT_EQ(r.code, 0) << r.output;
    for (const char* f : {"metrics.json", "rq2.csv", "rq1_matches.csv", "curves.csv", "curves.svg", "summary.txt"})
        EXPECT_EQ(slurp(d / "reports" / f), slurp(again / "reports" / f)) << f;
    fs::remove_all(again);
}

TEST(Cli, StagesRerunFromTheStoredConfig) {
    const auto& d = tiny_run();
    const auto before = slurp(d / "reports/metrics.json");
    auto r = run("evaluate --run-dir " + d.string());
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_NE(r.output.find("effective config"), std::string::npos);
    EXPECT_EQ(slurp(d / "reports/metrics.json"), before);
}

TEST(Cli, PlotRendersTheCurveTable) {
    const auto& d = tiny_run();
    const auto out = d / "replot.svg";
    auto r = run("plot --input " + (d / "reports/curves.csv").string() + " --output " + out.string());
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_EQ(slurp(out), slurp(d / "reports/curves.svg"));
    EXPECT_EQ(run("plot --input " + (d / "missing.csv").string()).code, 4);
}

TEST(Cli, InterveneReportsPropagation) {
    const auto& d = tiny_run();
    auto tree = nlohmann::json::parse(slurp(d / "discovery/tree.json"));
    std::string child;
    int parent = -1;
    for (auto& n : tree["nodes"])
        if (n["source"] == "discovered" && n["polarity"] == "positive" && tree["nodes"][n["parent"].get<int>()]["parent"] == -1) {
            child = n["name"];
            parent = n["parent"];
            break;
        }
    ASSERT_FALSE(child.empty());
    auto r = run("intervene --run-dir " + d.string() + " --sample 3 --do " + child + "=1");
    ASSERT_EQ(r.code, 0) << r.output;
    auto j = nlohmann::json::parse(r.output.substr(r.output.find('{')));
    EXPECT_EQ(j["sample_id"], 3);
    const auto& p = j["prediction"]["nodes"][parent];
    EXPECT_EQ(p["override"], 1);
    EXPECT_EQ(p["propagated"], true);
    EXPECT_EQ(p["p"], 1.0);
    EXPECT_EQ(run("intervene --run-dir " + d.string() + " --sample 3 --do NoSuchNode=1").code, 7);
    EXPECT_EQ(run("intervene --run-dir " + d.string() + " --sample 3 --do " + child + "=2").code, 2);
}

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mlcs/data/generator.hpp"
#include "mlcs/eval/matching.hpp"
#include "mlcs/eval/metrics.hpp"
#include "mlcs/models/training.hpp"

namespace mlcs::eval {

inline double task_accuracy(const models::ForwardOutput& out, const data::SplitData& split) {
    std::vector<int> predicted(split.size());
    for (std::size_t i = 0; i < split.size(); ++i) predicted[i] = out.predicted_task(i);
    auto truth = split.tasks();
    return accuracy(predicted, truth);
}

/// Mean AUC of p̂ over the provided (top-level) concepts; concepts whose test
/// labels hold a single class are skipped. nullopt for models without concepts.
inline std::optional<double> provided_concept_auc(const models::ForwardOutput& out, const models::ConceptTree& tree,
                                                  const data::SplitData& split) {
    if (out.nodes.empty()) return std::nullopt;
    double sum = 0;
    std::size_t n = 0;
    for (int root : tree.roots()) {
        const auto& node = tree.node(root);
        if (node.provided_index < 0) continue;
        auto a = try_auc(out.nodes[static_cast<std::size_t>(root)].prob.data(),
                         split.concept_column(static_cast<std::size_t>(node.provided_index)));
        if (!a) continue;
        sum += *a;
        ++n;
    }
    if (n == 0) return std::nullopt;
    return sum / static_cast<double>(n);
}

struct ModelScore {
    std::string model;
    std::size_t replica = 0;
    double accuracy = 0.0;
    std::optional<double> provided_auc;
};

inline ModelScore score_model(const std::string& name, std::size_t replica, const models::DeepHiCEM& model, const data::SplitData& split) {
    auto out = models::predict(model, split);
    return {name, replica, task_accuracy(out, split), provided_concept_auc(out, model.tree(), split)};
}

struct Rq2Row {
    std::string model;
    std::size_t replicas = 0;
    MeanStd accuracy;
    std::optional<MeanStd> provided_auc;
};

/// Aggregates per-replica scores by model name, keeping first-seen order.
inline std::vector<Rq2Row> rq2_report(const std::vector<ModelScore>& scores) {
    std::vector<Rq2Row> rows;
    for (auto& s : scores) {
        if (std::any_of(rows.begin(), rows.end(), [&](auto& r) { return r.model == s.model; })) continue;
        std::vector<double> acc, auc;
        for (auto& t : scores) {
            if (t.model != s.model) continue;
            acc.push_back(t.accuracy);
            if (t.provided_auc) auc.push_back(*t.provided_auc);
        }
        Rq2Row row{s.model, acc.size(), mean_std(acc), std::nullopt};
        if (!auc.empty()) row.provided_auc = mean_std(auc);
        rows.push_back(row);
    }
    return rows;
}

inline const Rq2Row& rq2_row(const std::vector<Rq2Row>& rows, const std::string& model) {
    for (auto& r : rows)
        if (r.model == model) return r;
    throw NotFoundError("no RQ2 row for model '" + model + "'");
}

struct Rq1Report {
    std::vector<MatchResult> matches;
    Rq1Summary summary;
    std::vector<std::string> warnings;
};

/// p̂ of every discovered node on the split; provided nodes get empty vectors.
inline std::vector<std::vector<double>> discovered_scores(const models::ForwardOutput& out, const models::ConceptTree& tree) {
    std::vector<std::vector<double>> scores(tree.size());
    for (auto& n : tree.nodes())
        if (n.source == models::Source::discovered) {
            auto p = out.nodes[static_cast<std::size_t>(n.id)].prob.data();
            scores[static_cast<std::size_t>(n.id)].assign(p.begin(), p.end());
        }
    return scores;
}

inline std::vector<std::vector<double>> bank_labels(const data::Catalog& catalog, const data::SplitData& split) {
    std::vector<std::vector<double>> labels;
    for (std::size_t b = 0; b < catalog.bank.size(); ++b) labels.push_back(split.bank_column(b));
    return labels;
}

inline Rq1Report rq1_report(const models::ForwardOutput& out, const models::ConceptTree& tree, const data::Catalog& catalog,
                            const data::SplitData& split) {
    Rq1Report r;
    r.matches = match_bank(catalog, tree, discovered_scores(out, tree), bank_labels(catalog, split));
    r.summary = summarize_matches(r.matches);
    if (r.summary.sub_matched + r.summary.subsub_matched == 0) r.warnings.push_back("no bank concept matched a discovered node");
    return r;
}

// -- intervention curves -----------------------------------------------------

struct InterventionTarget {
    int node = -1;
    std::vector<double> truth;  // per sample of the evaluated split
};

struct CurvePoint {
    std::size_t intervened = 0;
    double mean = 0.0;
    double std = 0.0;
    std::vector<double> per_run;
};

struct InterventionCurve {
    std::string target;
    std::vector<std::uint64_t> seeds;
    std::vector<CurvePoint> points;
};

inline std::vector<InterventionTarget> provided_targets(const models::ConceptTree& tree, const data::SplitData& split) {
    std::vector<InterventionTarget> t;
    for (int root : tree.roots()) {
        const auto& n = tree.node(root);
        if (n.provided_index >= 0) t.push_back({root, split.concept_column(static_cast<std::size_t>(n.provided_index))});
    }
    return t;
}

/// Matched discovered nodes with the matched bank concept's labels as ground truth.
inline std::vector<InterventionTarget> discovered_targets(const std::vector<MatchResult>& matches, const data::SplitData& split) {
    std::vector<InterventionTarget> t;
    std::vector<int> seen;
    for (auto& m : matches) {
        if (!m.matched || m.node < 0) continue;
        if (std::find(seen.begin(), seen.end(), m.node) != seen.end()) continue;
        seen.push_back(m.node);
        t.push_back({m.node, split.bank_column(static_cast<std::size_t>(m.bank))});
    }
    return t;
}

/// Run r uses models[r % models.size()] and a node order shuffled with
/// seeds[r]; the first j nodes of that order are intervened at point j.
inline InterventionCurve intervention_curve(const std::vector<const models::DeepHiCEM*>& models, const data::SplitData& split,
                                            const std::vector<InterventionTarget>& targets, const std::vector<std::uint64_t>& seeds,
                                            const std::string& name) {
    if (models.empty() || seeds.empty()) throw ArgumentError("intervention curve needs at least one model and one seed");
    for (auto& t : targets)
        if (t.truth.size() != split.size()) throw DimensionError("intervention target labels do not cover the split");
    InterventionCurve curve{name, seeds, {}};
    curve.points.resize(targets.size() + 1);
    for (std::size_t j = 0; j <= targets.size(); ++j) curve.points[j].intervened = j;
    for (std::size_t r = 0; r < seeds.size(); ++r) {
        const auto& model = *models[r % models.size()];
        std::vector<std::size_t> order(targets.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::mt19937_64 rng(seeds[r]);
        std::shuffle(order.begin(), order.end(), rng);
        std::vector<models::InterventionState> states(split.size());
        for (std::size_t j = 0; j <= targets.size(); ++j) {
            if (j > 0) {
                const auto& t = targets[order[j - 1]];
                for (std::size_t i = 0; i < split.size(); ++i)
                    states[i] = models::intervene(model.tree(), std::move(states[i]), t.node, t.truth[i] > 0.5 ? 1 : 0);
            }
            auto out = j == 0 ? models::predict(model, split) : models::predict(model, split, &states);
            curve.points[j].per_run.push_back(task_accuracy(out, split));
        }
    }
    for (auto& p : curve.points) {
        auto ms = mean_std(p.per_run);
        p.mean = ms.mean;
        p.std = ms.std;
    }
    return curve;
}

/// Largest drop between consecutive points (0 when the curve never falls).
inline double largest_drop(const InterventionCurve& c) {
    double drop = 0;
    for (std::size_t j = 1; j < c.points.size(); ++j) drop = std::max(drop, c.points[j - 1].mean - c.points[j].mean);
    return drop;
}

// -- serialization -----------------------------------------------------------

inline nlohmann::json mean_std_json(const MeanStd& m) { return {{"mean", m.mean}, {"std", m.std}}; }

inline nlohmann::json rq1_to_json(const Rq1Report& r, const models::ConceptTree& tree) {
    const auto& s = r.summary;
    return {{"matches", matches_to_json(r.matches, tree)},
            {"sub_matched", s.sub_matched},
            {"sub_total", s.sub_total},
            {"subsub_matched", s.subsub_matched},
            {"subsub_total", s.subsub_total},
            {"mean_auc", s.mean_auc},
            {"mean_sub_auc", s.mean_sub_auc},
            {"mean_subsub_auc", s.mean_subsub_auc},
            {"warnings", r.warnings}};
}

inline nlohmann::json rq2_to_json(const std::vector<Rq2Row>& rows, const std::vector<ModelScore>& scores) {
    nlohmann::json a = nlohmann::json::array();
    for (auto& r : rows)
        a.push_back({{"model", r.model},
                     {"replicas", r.replicas},
                     {"accuracy", mean_std_json(r.accuracy)},
                     {"provided_auc", r.provided_auc ? mean_std_json(*r.provided_auc) : nlohmann::json(nullptr)}});
    nlohmann::json runs = nlohmann::json::array();
    for (auto& s : scores)
        runs.push_back({{"model", s.model}, {"replica", s.replica}, {"accuracy", s.accuracy},
                        {"provided_auc", s.provided_auc ? nlohmann::json(*s.provided_auc) : nlohmann::json(nullptr)}});
    return {{"models", a}, {"runs", runs}};
}

inline nlohmann::json curve_to_json(const InterventionCurve& c) {
    nlohmann::json pts = nlohmann::json::array();
    for (auto& p : c.points) pts.push_back({{"intervened", p.intervened}, {"mean", p.mean}, {"std", p.std}, {"runs", p.per_run}});
    return {{"target", c.target}, {"seeds", c.seeds}, {"points", pts}};
}

inline std::string full_precision(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

/// One row per (model, replica).
inline std::string rq2_csv(const std::vector<ModelScore>& scores) {
    std::ostringstream os;
    os << "model,replica,accuracy,provided_auc\n";
    for (auto& s : scores)
        os << s.model << ',' << s.replica << ',' << full_precision(s.accuracy) << ',' << (s.provided_auc ? full_precision(*s.provided_auc) : "")
           << '\n';
    return os.str();
}

inline std::string matches_csv_header() { return "replica,bank,level,node,matched,roc_auc,own_auc\n"; }

/// One row per bank concept.
inline std::string matches_csv_rows(const std::vector<MatchResult>& matches, const models::ConceptTree& tree, std::size_t replica) {
    std::ostringstream os;
    for (auto& m : matches)
        os << replica << ',' << m.name << ',' << (m.level == data::BankLevel::sub ? "sub" : "subsub") << ','
           << (m.node >= 0 ? tree.node(m.node).name : "") << ',' << (m.matched ? 1 : 0) << ',' << full_precision(m.roc_auc) << ','
           << full_precision(m.own_auc) << '\n';
    return os.str();
}

/// One row per (curve, run, point).
inline std::string curves_csv(const std::vector<InterventionCurve>& curves) {
    std::ostringstream os;
    os << "target,seed,intervened,accuracy\n";
    for (auto& c : curves)
        for (std::size_t r = 0; r < c.seeds.size(); ++r)
            for (auto& p : c.points) os << c.target << ',' << c.seeds[r] << ',' << p.intervened << ',' << full_precision(p.per_run[r]) << '\n';
    return os.str();
}

/// Inverse of curves_csv; run order follows first appearance of each seed.
inline std::vector<InterventionCurve> parse_curves_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line) || line != "target,seed,intervened,accuracy") throw FormatError("not an intervention-curve table");
    std::vector<InterventionCurve> curves;
    std::size_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
        if (f.size() != 4) throw FormatError("curve table row " + std::to_string(row) + ": expected 4 fields");
        std::uint64_t seed = 0;
        std::size_t j = 0;
        double acc = 0;
        try {
            seed = std::stoull(f[1]);
            j = std::stoul(f[2]);
            acc = std::stod(f[3]);
        } catch (const std::exception&) {
            throw FormatError("curve table row " + std::to_string(row) + ": malformed number");
        }
        auto it = std::find_if(curves.begin(), curves.end(), [&](auto& c) { return c.target == f[0]; });
        if (it == curves.end()) it = curves.insert(curves.end(), InterventionCurve{f[0], {}, {}});
        auto s = std::find(it->seeds.begin(), it->seeds.end(), seed);
        if (s == it->seeds.end()) s = it->seeds.insert(it->seeds.end(), seed);
        if (it->points.size() <= j) it->points.resize(j + 1);
        auto& p = it->points[j];
        p.intervened = j;
        const auto run = static_cast<std::size_t>(s - it->seeds.begin());
        if (p.per_run.size() <= run) p.per_run.resize(run + 1, NAN);
        p.per_run[run] = acc;
    }
    for (auto& c : curves)
        for (auto& p : c.points) {
            if (p.per_run.size() != c.seeds.size() || std::any_of(p.per_run.begin(), p.per_run.end(), [](double v) { return std::isnan(v); }))
                throw FormatError("curve '" + c.target + "' misses runs at point " + std::to_string(p.intervened));
            auto ms = mean_std(p.per_run);
            p.mean = ms.mean;
            p.std = ms.std;
        }
    return curves;
}

/// Mean accuracy against intervened count with a ±std band, one colour per curve.
inline std::string curves_svg(const std::vector<InterventionCurve>& curves, const std::string& title = "Task accuracy under interventions") {
    const double W = 640, H = 420, L = 64, R = 150, T = 40, B = 50;
    const double pw = W - L - R, ph = H - T - B;
    std::size_t max_j = 1;
    double lo = 1.0, hi = 0.0;
    for (auto& c : curves)
        for (auto& p : c.points) {
            max_j = std::max(max_j, p.intervened);
            lo = std::min(lo, p.mean - p.std);
            hi = std::max(hi, p.mean + p.std);
        }
    if (lo > hi) lo = 0, hi = 1;
    lo = std::max(0.0, std::floor(lo * 20) / 20);
    hi = std::min(1.0, std::ceil(hi * 20) / 20);
    if (hi - lo < 0.05) hi = std::min(1.0, lo + 0.05), lo = hi - 0.05;
    auto X = [&](double j) { return L + pw * j / static_cast<double>(max_j); };
    auto Y = [&](double a) { return T + ph * (1 - (a - lo) / (hi - lo)); };
    auto num = [](double v) {
        std::ostringstream os;
        os.setf(std::ios::fixed);
        os.precision(2);
        os << v;
        return os.str();
    };
    static const char* colours[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};
    std::ostringstream s;
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    s << "<text x=\"" << L << "\" y=\"24\" font-size=\"14\">" << title << "</text>\n";
    s << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << pw << "\" height=\"" << ph << "\" fill=\"none\" stroke=\"#444\"/>\n";
    for (int i = 0; i <= 5; ++i) {
        const double a = lo + (hi - lo) * i / 5.0;
        s << "<line x1=\"" << L - 4 << "\" x2=\"" << L << "\" y1=\"" << num(Y(a)) << "\" y2=\"" << num(Y(a)) << "\" stroke=\"#444\"/>"
          << "<text x=\"" << L - 8 << "\" y=\"" << num(Y(a) + 4) << "\" text-anchor=\"end\">" << num(a) << "</text>\n";
    }
    const std::size_t step = std::max<std::size_t>(1, max_j / 10);
    for (std::size_t j = 0; j <= max_j; j += step)
        s << "<text x=\"" << num(X(static_cast<double>(j))) << "\" y=\"" << H - B + 18 << "\" text-anchor=\"middle\">" << j << "</text>\n";
    s << "<text x=\"" << L + pw / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">concepts intervened</text>\n";
    s << "<text transform=\"translate(16," << T + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">task accuracy</text>\n";
    for (std::size_t c = 0; c < curves.size(); ++c) {
        const auto& pts = curves[c].points;
        const char* col = colours[c % 5];
        if (pts.empty()) continue;
        s << "<polygon fill=\"" << col << "\" fill-opacity=\"0.15\" stroke=\"none\" points=\"";
        for (auto& p : pts) s << num(X(static_cast<double>(p.intervened))) << ',' << num(Y(p.mean + p.std)) << ' ';
        for (auto it = pts.rbegin(); it != pts.rend(); ++it) s << num(X(static_cast<double>(it->intervened))) << ',' << num(Y(it->mean - it->std)) << ' ';
        s << "\"/>\n<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"2\" points=\"";
        for (auto& p : pts) s << num(X(static_cast<double>(p.intervened))) << ',' << num(Y(p.mean)) << ' ';
        s << "\"/>\n";
        const double ly = T + 16 + 18.0 * static_cast<double>(c);
        s << "<line x1=\"" << W - R + 12 << "\" x2=\"" << W - R + 36 << "\" y1=\"" << ly << "\" y2=\"" << ly << "\" stroke=\"" << col
          << "\" stroke-width=\"2\"/><text x=\"" << W - R + 42 << "\" y=\"" << ly + 4 << "\">" << curves[c].target << "</text>\n";
    }
    s << "</svg>\n";
    return s.str();
}

}  // namespace mlcs::eval

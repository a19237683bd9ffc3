#pragma once

// Symbolic PseudoKitchens-2: recipe instances become multi-hot atom vectors,
// which a frozen random encoder maps to d-dimensional "image" features.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <utility>
#include <vector>

#include "mlcs/autodiff/checkpoint.hpp"
#include "mlcs/autodiff/tensor.hpp"
#include "mlcs/data/catalog.hpp"
#include "mlcs/error.hpp"

namespace mlcs::data {

using Rng = std::mt19937_64;

struct DatasetConfig {
    std::size_t n_train = 10000;
    std::size_t n_val = 1000;
    std::size_t n_test = 1000;
    std::size_t dim = 128;
    double noise_sd = 0.05;
    /// Standard deviation of the per-ingredient encoder directions.
    double signal_scale = 0.35;
    /// Relative size of the per-variant deviation from its ingredient direction.
    double variant_spread = 0.5;
    /// Probability that a present atom is hidden from the encoder (labels keep it).
    double occlusion = 0.2;
    std::uint64_t seed = 0;
};

/// Frozen map from multi-hot atom vectors to features: tanh(a·W + b).
struct FeatureEncoder {
    ad::Tensor weight;  // [atoms×dim]
    ad::Tensor bias;    // [dim]

    std::size_t dim() const { return bias.size(); }

    static FeatureEncoder random(const Catalog& catalog, const DatasetConfig& cfg, Rng& rng) {
        const std::size_t n_atoms = catalog.atoms.size();
        if (cfg.dim < n_atoms)
            throw ArgumentError("feature dimension " + std::to_string(cfg.dim) + " is below the atom count " +
                                std::to_string(n_atoms));
        std::normal_distribution<double> unit(0.0, 1.0);
        std::vector<std::vector<double>> ingredient_dirs(catalog.ingredients.size(), std::vector<double>(cfg.dim));
        for (auto& dir : ingredient_dirs)
            for (auto& v : dir) v = cfg.signal_scale * unit(rng);
        std::vector<double> w(n_atoms * cfg.dim);
        for (std::size_t a = 0; a < n_atoms; ++a) {
            const auto& atom = catalog.atoms[a];
            const auto& base = ingredient_dirs[static_cast<std::size_t>(atom.ingredient)];
            for (std::size_t j = 0; j < cfg.dim; ++j) {
                const double offset = atom.variant > 0 ? cfg.variant_spread * cfg.signal_scale * unit(rng) : 0.0;
                w[a * cfg.dim + j] = base[j] + offset;
            }
        }
        std::vector<double> b(cfg.dim);
        for (auto& v : b) v = 0.1 * unit(rng);
        return {ad::Tensor::matrix(n_atoms, cfg.dim, std::move(w)), ad::Tensor({cfg.dim}, std::move(b))};
    }
};

struct Sample {
    std::vector<int> atoms;  // sorted indices into Catalog::atoms
    std::vector<int> visible;  // subset of atoms seen by the encoder
    std::vector<double> features;
    std::vector<std::uint8_t> concepts;  // over Catalog::top_concepts
    int task = 0;                        // recipe index
    std::vector<std::uint8_t> bank;      // over Catalog::bank, evaluation only
};

struct SplitData {
    std::vector<Sample> samples;

    std::size_t size() const { return samples.size(); }

    ad::Tensor features(std::span<const std::size_t> rows) const {
        const std::size_t d = samples.front().features.size();
        std::vector<double> out(rows.size() * d);
        for (std::size_t r = 0; r < rows.size(); ++r)
            std::copy(samples[rows[r]].features.begin(), samples[rows[r]].features.end(), out.begin() + static_cast<std::ptrdiff_t>(r * d));
        return ad::Tensor::matrix(rows.size(), d, std::move(out));
    }
    ad::Tensor all_features() const {
        std::vector<std::size_t> rows(size());
        std::iota(rows.begin(), rows.end(), std::size_t{0});
        return features(rows);
    }
    std::vector<int> tasks() const {
        std::vector<int> t;
        for (auto& s : samples) t.push_back(s.task);
        return t;
    }
    std::vector<double> concept_column(std::size_t c) const {
        std::vector<double> v;
        for (auto& s : samples) v.push_back(s.concepts[c]);
        return v;
    }
    std::vector<double> bank_column(std::size_t b) const {
        std::vector<double> v;
        for (auto& s : samples) v.push_back(s.bank[b]);
        return v;
    }
};

struct Dataset {
    Catalog catalog;
    FeatureEncoder encoder;
    DatasetConfig config;
    SplitData train, val, test;

    const SplitData& split(const std::string& name) const {
        if (name == "train") return train;
        if (name == "val") return val;
        if (name == "test") return test;
        throw NotFoundError("unknown split '" + name + "'");
    }
};

/// Draws the atoms of one recipe instance.
inline std::vector<Atom> sample_recipe_instance(const Catalog& catalog, const Recipe& recipe, Rng& rng) {
    std::vector<Atom> atoms;
    auto include = [&](int ingredient, const std::vector<int>& allowed) {
        for (auto& a : atoms)
            if (a.ingredient == ingredient) return;  // duplicates collapse into one atom
        const int count = catalog.ingredients[static_cast<std::size_t>(ingredient)].variant_count;
        int variant = 0;
        if (count > 0) {
            if (allowed.empty())
                variant = std::uniform_int_distribution<int>(1, count)(rng);
            else
                variant = allowed[std::uniform_int_distribution<std::size_t>(0, allowed.size() - 1)(rng)];
        }
        atoms.push_back({ingredient, variant});
    };
    for (const auto& req : recipe.required) {
        if (req.kind == Requirement::Kind::ingredient) {
            include(req.index, req.variants);
            continue;
        }
        const auto& group = catalog.groups[static_cast<std::size_t>(req.index)];
        const std::size_t n = group.members.size();
        std::size_t take = group.choose_exactly_one ? 1 : std::uniform_int_distribution<std::size_t>(1, n)(rng);
        std::vector<int> members = group.members;
        std::shuffle(members.begin(), members.end(), rng);
        members.resize(take);
        std::sort(members.begin(), members.end());
        for (int m : members) include(m, {});
    }
    std::sort(atoms.begin(), atoms.end());
    return atoms;
}

inline std::vector<int> atom_indices(const Catalog& catalog, const std::vector<Atom>& atoms) {
    std::vector<int> idx;
    for (auto& a : atoms) idx.push_back(catalog.atom_index(a));
    std::sort(idx.begin(), idx.end());
    return idx;
}

/// Features for a set of atom indices; noise_sd = 0 gives the deterministic image.
inline std::vector<double> encode_features(const FeatureEncoder& enc, std::span<const int> atoms, double noise_sd, Rng& rng) {
    const std::size_t d = enc.dim();
    std::vector<double> pre(enc.bias.data().begin(), enc.bias.data().end());
    for (int a : atoms) {
        auto row = enc.weight.data().subspan(static_cast<std::size_t>(a) * d, d);
        for (std::size_t j = 0; j < d; ++j) pre[j] += row[j];
    }
    std::normal_distribution<double> noise(0.0, noise_sd > 0 ? noise_sd : 1.0);
    for (auto& v : pre) {
        v = std::tanh(v);
        if (noise_sd > 0) v += noise(rng);
    }
    return pre;
}

/// Top-level concept labels and bank labels implied by a set of atoms.
inline std::pair<std::vector<std::uint8_t>, std::vector<std::uint8_t>> label_sample(const Catalog& catalog, std::span<const int> atom_ids) {
    std::vector<std::uint8_t> concepts(catalog.top_concepts.size(), 0);
    std::vector<std::uint8_t> bank(catalog.bank.size(), 0);
    for (int id : atom_ids) {
        const Atom& atom = catalog.atoms[static_cast<std::size_t>(id)];
        const auto& ing = catalog.ingredients[static_cast<std::size_t>(atom.ingredient)];
        for (std::size_t c = 0; c < catalog.top_concepts.size(); ++c) {
            const auto& tc = catalog.top_concepts[c];
            if ((tc.group >= 0 && tc.group == ing.group) || tc.ingredient == atom.ingredient) concepts[c] = 1;
        }
        for (std::size_t b = 0; b < catalog.bank.size(); ++b) {
            const auto& bc = catalog.bank[b];
            if (bc.ingredient != atom.ingredient) continue;
            if (bc.level == BankLevel::sub || bc.variant == atom.variant) bank[b] = 1;
        }
    }
    return {std::move(concepts), std::move(bank)};
}

inline std::vector<int> visible_atoms(std::span<const int> atoms, double occlusion, Rng& rng) {
    std::vector<int> out;
    std::bernoulli_distribution hidden(occlusion);
    for (int a : atoms)
        if (occlusion <= 0.0 || !hidden(rng)) out.push_back(a);
    return out;
}

inline Sample make_sample(const Catalog& catalog, const FeatureEncoder& enc, int recipe, double noise_sd, double occlusion, Rng& rng) {
    Sample s;
    s.task = recipe;
    s.atoms = atom_indices(catalog, sample_recipe_instance(catalog, catalog.recipes[static_cast<std::size_t>(recipe)], rng));
    s.visible = visible_atoms(s.atoms, occlusion, rng);
    s.features = encode_features(enc, s.visible, noise_sd, rng);
    std::tie(s.concepts, s.bank) = label_sample(catalog, s.atoms);
    return s;
}

inline SplitData generate_split_samples(const Catalog& catalog, const FeatureEncoder& enc, std::size_t n, double noise_sd,
                                        double occlusion, Rng& rng) {
    SplitData split;
    split.samples.reserve(n);
    std::uniform_int_distribution<int> recipe(0, static_cast<int>(catalog.recipes.size()) - 1);
    for (std::size_t i = 0; i < n; ++i) split.samples.push_back(make_sample(catalog, enc, recipe(rng), noise_sd, occlusion, rng));
    return split;
}

/// Fully seeded: equal configs give bit-identical datasets.
inline Dataset generate_dataset(const DatasetConfig& cfg) {
    if (cfg.n_train == 0 || cfg.n_val == 0 || cfg.n_test == 0) throw ArgumentError("split sizes must be positive");
    Dataset ds;
    ds.catalog = build_catalog();
    ds.config = cfg;
    Rng rng(cfg.seed);
    ds.encoder = FeatureEncoder::random(ds.catalog, cfg, rng);
    ds.train = generate_split_samples(ds.catalog, ds.encoder, cfg.n_train, cfg.noise_sd, cfg.occlusion, rng);
    ds.val = generate_split_samples(ds.catalog, ds.encoder, cfg.n_val, cfg.noise_sd, cfg.occlusion, rng);
    ds.test = generate_split_samples(ds.catalog, ds.encoder, cfg.n_test, cfg.noise_sd, cfg.occlusion, rng);
    return ds;
}

// ---------------------------------------------------------------------------
// Files: catalog.json plus one container per split.

inline nlohmann::json dataset_config_json(const DatasetConfig& c) {
    return {{"n_train", c.n_train}, {"n_val", c.n_val},   {"n_test", c.n_test},
            {"dim", c.dim},         {"noise_sd", c.noise_sd}, {"signal_scale", c.signal_scale},
            {"variant_spread", c.variant_spread}, {"occlusion", c.occlusion}, {"seed", c.seed}};
}

inline DatasetConfig dataset_config_from_json(const nlohmann::json& j) {
    DatasetConfig c;
    c.n_train = j.at("n_train");
    c.n_val = j.at("n_val");
    c.n_test = j.at("n_test");
    c.dim = j.at("dim");
    c.noise_sd = j.at("noise_sd");
    c.signal_scale = j.at("signal_scale");
    c.variant_spread = j.at("variant_spread");
    c.occlusion = j.at("occlusion");
    c.seed = j.at("seed");
    return c;
}

inline void save_split(const std::filesystem::path& path, const Dataset& ds, const std::string& name) {
    const auto& split = ds.split(name);
    const std::size_t n = split.size(), d = ds.encoder.dim();
    const std::size_t nc = ds.catalog.top_concepts.size(), nb = ds.catalog.bank.size(), na = ds.catalog.atoms.size();
    std::vector<double> feats(n * d), concepts(n * nc), bank(n * nb), atoms(n * na, 0.0), visible(n * na, 0.0), tasks(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& s = split.samples[i];
        std::copy(s.features.begin(), s.features.end(), feats.begin() + static_cast<std::ptrdiff_t>(i * d));
        for (std::size_t c = 0; c < nc; ++c) concepts[i * nc + c] = s.concepts[c];
        for (std::size_t b = 0; b < nb; ++b) bank[i * nb + b] = s.bank[b];
        for (int a : s.atoms) atoms[i * na + static_cast<std::size_t>(a)] = 1.0;
        for (int a : s.visible) visible[i * na + static_cast<std::size_t>(a)] = 1.0;
        tasks[i] = s.task;
    }
    ad::Container c;
    c.meta = {{"kind", "pseudokitchens2-split"}, {"split", name}, {"config", dataset_config_json(ds.config)}};
    c.put("features", ad::Tensor::matrix(n, d, std::move(feats)));
    c.put("concepts", ad::Tensor::matrix(n, nc, std::move(concepts)));
    c.put("tasks", ad::Tensor({n}, std::move(tasks)));
    c.put("bank", ad::Tensor::matrix(n, nb, std::move(bank)));
    c.put("atoms", ad::Tensor::matrix(n, na, std::move(atoms)));
    c.put("visible_atoms", ad::Tensor::matrix(n, na, std::move(visible)));
    c.put("encoder.weight", ds.encoder.weight);
    c.put("encoder.bias", ds.encoder.bias);
    ad::save_container(path, c);
}

inline void save_dataset(const std::filesystem::path& dir, const Dataset& ds) {
    std::filesystem::create_directories(dir);
    std::ofstream(dir / "catalog.json") << catalog_to_json(ds.catalog).dump(2) << '\n';
    for (const char* name : {"train", "val", "test"}) save_split(dir / (std::string(name) + ".bin"), ds, name);
}

inline SplitData load_split(const std::filesystem::path& path, const Catalog& catalog, Dataset* into) {
    auto c = ad::load_container(path);
    if (c.meta.value("kind", "") != "pseudokitchens2-split") throw FormatError(path.string() + " is not a dataset split");
    const auto& feats = c.get("features");
    const auto& concepts = c.get("concepts");
    const auto& bank = c.get("bank");
    const auto& atoms = c.get("atoms");
    const auto& tasks = c.get("tasks");
    const auto& visible = c.get("visible_atoms");
    if (concepts.cols() != catalog.top_concepts.size() || bank.cols() != catalog.bank.size() || atoms.cols() != catalog.atoms.size())
        throw FormatError(path.string() + ": label widths do not match the catalog");
    SplitData split;
    const std::size_t n = feats.rows(), d = feats.cols();
    for (std::size_t i = 0; i < n; ++i) {
        Sample s;
        s.features.assign(feats.data().begin() + static_cast<std::ptrdiff_t>(i * d), feats.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
        for (std::size_t k = 0; k < concepts.cols(); ++k) s.concepts.push_back(concepts.at(i, k) > 0.5);
        for (std::size_t k = 0; k < bank.cols(); ++k) s.bank.push_back(bank.at(i, k) > 0.5);
        for (std::size_t k = 0; k < atoms.cols(); ++k)
            if (atoms.at(i, k) > 0.5) s.atoms.push_back(static_cast<int>(k));
        for (std::size_t k = 0; k < visible.cols(); ++k)
            if (visible.at(i, k) > 0.5) s.visible.push_back(static_cast<int>(k));
        s.task = static_cast<int>(tasks[i]);
        split.samples.push_back(std::move(s));
    }
    if (into) {
        into->encoder = {c.get("encoder.weight"), c.get("encoder.bias")};
        into->config = dataset_config_from_json(c.meta.at("config"));
    }
    return split;
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
    for (const char* f : {"catalog.json", "train.bin", "val.bin", "test.bin"})
        if (!std::filesystem::exists(dir / f)) throw PathError("dataset file missing: " + (dir / f).string());
    Dataset ds;
    ds.catalog = build_catalog();
    ds.train = load_split(dir / "train.bin", ds.catalog, &ds);
    ds.val = load_split(dir / "val.bin", ds.catalog, nullptr);
    ds.test = load_split(dir / "test.bin", ds.catalog, nullptr);
    return ds;
}

}  // namespace mlcs::data

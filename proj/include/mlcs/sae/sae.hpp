#pragma once

// Flat top-k / BatchTopK sparse autoencoder on the autodiff tape, plus the
// latent-activation record shared with the hierarchical variant.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mlcs/autodiff/checkpoint.hpp"
#include "mlcs/autodiff/optim.hpp"
#include "mlcs/autodiff/tensor.hpp"
#include "mlcs/error.hpp"

namespace mlcs::sae {

enum class TopKMode { per_sample, batch };

/// Active latents per sample, each with its active sub-latents (empty for flat SAEs).
struct LatentActivation {
    struct Sub {
        int latent;
        double value;
    };
    struct Top {
        int latent;
        double value;
        std::vector<Sub> subs;
    };
    std::vector<std::vector<Top>> samples;

    std::size_t size() const { return samples.size(); }
    std::size_t total_active() const {
        std::size_t n = 0;
        for (auto& s : samples) n += s.size();
        return n;
    }
    /// Magnitude of a top latent on a sample (0 when not selected).
    double value(std::size_t sample, int latent) const {
        for (auto& t : samples[sample])
            if (t.latent == latent) return t.value;
        return 0.0;
    }
    double sub_value(std::size_t sample, int latent, int sub) const {
        for (auto& t : samples[sample])
            if (t.latent == latent)
                for (auto& s : t.subs)
                    if (s.latent == sub) return s.value;
        return 0.0;
    }
};

/// Scales every row of a [K×m] decoder to unit length; all-zero rows stay zero.
inline void normalize_rows(ad::Tensor& w) {
    auto d = w.mutable_data();
    const std::size_t m = w.cols();
    for (std::size_t r = 0; r < w.rows(); ++r) {
        double s = 0;
        for (std::size_t j = 0; j < m; ++j) s += d[r * m + j] * d[r * m + j];
        if (s == 0.0) continue;
        const double inv = 1.0 / std::sqrt(s);
        for (std::size_t j = 0; j < m; ++j) d[r * m + j] *= inv;
    }
}

/// Random unit decoder rows [K×m] with the encoder [m×K] initialised to their transpose.
inline std::pair<ad::Tensor, ad::Tensor> tied_init(std::size_t m, std::size_t K, ad::Rng& rng) {
    auto dec = ad::gaussian({K, m}, 1.0, rng);
    normalize_rows(dec);
    std::vector<double> enc(m * K);
    for (std::size_t l = 0; l < K; ++l)
        for (std::size_t j = 0; j < m; ++j) enc[j * K + l] = dec.at(l, j);
    return {ad::Tensor::matrix(m, K, std::move(enc)), dec};
}

struct SAEParams {
    std::size_t k = 32;
    ad::Parameter enc_w, enc_b, dec_w, dec_b;  // [m×K], [K], [K×m], [1×m]

    std::size_t input_dim() const { return enc_w.value.rows(); }
    std::size_t dictionary_size() const { return enc_w.value.cols(); }

    static SAEParams random(std::size_t m, std::size_t K, std::size_t k, ad::Rng& rng) {
        if (k == 0 || k > K) throw ArgumentError("SAE needs 1 <= k <= K, got k=" + std::to_string(k) + " K=" + std::to_string(K));
        auto [enc, dec] = tied_init(m, K, rng);
        SAEParams p;
        p.k = k;
        p.enc_w = ad::Parameter("enc.w", enc);
        p.enc_b = ad::Parameter("enc.b", ad::Tensor::zeros({K}));
        p.dec_w = ad::Parameter("dec.w", dec);
        p.dec_b = ad::Parameter("dec.b", ad::Tensor::zeros({1, m}));
        return p;
    }

    std::vector<ad::Parameter*> parameters() { return {&enc_w, &enc_b, &dec_w, &dec_b}; }

    ad::Container to_container() const {
        ad::Container c;
        c.meta = {{"kind", "sae"}, {"k", k}};
        for (auto* p : {&enc_w, &enc_b, &dec_w, &dec_b}) c.put(p->name, p->value);
        return c;
    }
    static SAEParams from_container(const ad::Container& c) {
        if (c.meta.value("kind", "") != "sae") throw FormatError("container does not hold an SAE");
        SAEParams p;
        p.k = c.meta.at("k");
        p.enc_w = ad::Parameter("enc.w", c.get("enc.w"));
        p.enc_b = ad::Parameter("enc.b", c.get("enc.b"));
        p.dec_w = ad::Parameter("dec.w", c.get("dec.w"));
        p.dec_b = ad::Parameter("dec.b", c.get("dec.b"));
        return p;
    }
};

struct SaeOutput {
    ad::Tensor reconstruction;
    ad::Tensor codes;  // sparse activations [n×K]
    LatentActivation activation;
};

inline void require_finite(const ad::Tensor& e, const char* who) {
    for (double v : e.data())
        if (!std::isfinite(v)) throw NumericError(std::string(who) + ": non-finite input embedding");
}

inline SaeOutput sae_forward(const SAEParams& p, const ad::Tensor& e, TopKMode mode) {
    if (p.k > p.dictionary_size()) throw ArgumentError("SAE k exceeds dictionary size");
    require_finite(e, "sae_forward");
    const std::size_t m = p.input_dim();
    // decoder bias broadcast over rows as ones[n×1]·b[1×m]
    auto bias = ad::affine(ad::Tensor::filled({e.rows(), 1}, 1.0), p.dec_b.value, ad::Tensor::zeros({m}));
    auto pre = ad::relu(ad::affine(ad::sub(e, bias), p.enc_w.value, p.enc_b.value));
    auto codes = mode == TopKMode::per_sample ? ad::topk_mask(pre, p.k) : ad::batch_topk_mask(pre, p.k);
    SaeOutput out;
    out.reconstruction = ad::add(ad::affine(codes, p.dec_w.value, ad::Tensor::zeros({m})), bias);
    const auto keep = mode == TopKMode::per_sample ? ad::topk_keep(pre, p.k) : std::vector<std::uint8_t>{};
    const std::size_t K = p.dictionary_size();
    out.activation.samples.resize(e.rows());
    if (mode == TopKMode::per_sample) {
        for (std::size_t i = 0; i < e.rows(); ++i)
            for (std::size_t l = 0; l < K; ++l)
                if (keep[i * K + l]) out.activation.samples[i].push_back({static_cast<int>(l), pre.at(i, l), {}});
    } else {
        std::vector<std::size_t> order;
        ad::detail::select_largest(pre.data(), e.rows() * p.k, order);
        std::sort(order.begin(), order.end());
        for (auto idx : order) out.activation.samples[idx / K].push_back({static_cast<int>(idx % K), pre[idx], {}});
    }
    out.codes = codes;
    return out;
}

struct SaeTrainConfig {
    double lr = 3e-4;
    std::size_t epochs = 300;
    std::size_t batch_size = 1000;
    TopKMode mode = TopKMode::batch;
    bool normalize_decoder = true;
    std::uint64_t seed = 0;
};

struct SaeTrainResult {
    std::vector<double> epoch_loss;
    double final_loss = 0.0;
    std::vector<int> dead_latents;  // never selected with positive magnitude in the last epoch
};

inline std::vector<std::size_t> shuffled(std::size_t n, ad::Rng& rng) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    return order;
}

inline ad::Tensor gather_rows(const ad::Tensor& e, std::span<const std::size_t> rows) {
    const std::size_t m = e.cols();
    std::vector<double> out(rows.size() * m);
    for (std::size_t r = 0; r < rows.size(); ++r)
        std::copy_n(e.data().begin() + static_cast<std::ptrdiff_t>(rows[r] * m), m, out.begin() + static_cast<std::ptrdiff_t>(r * m));
    return ad::Tensor::matrix(rows.size(), m, std::move(out));
}

/// Decoder bias starts at the data mean before the first optimizer step.
inline void init_bias_to_mean(ad::Parameter& bias, const ad::Tensor& embeddings) {
    auto b = bias.value.mutable_data();
    const std::size_t n = embeddings.rows();
    for (std::size_t j = 0; j < embeddings.cols(); ++j) {
        double s = 0;
        for (std::size_t i = 0; i < n; ++i) s += embeddings.at(i, j);
        b[j] = s / static_cast<double>(n);
    }
}

inline SaeTrainResult train_sae(SAEParams& p, const ad::Tensor& embeddings, const SaeTrainConfig& cfg) {
    if (embeddings.rank() != 2 || embeddings.rows() == 0) throw ArgumentError("train_sae: no embeddings");
    SaeTrainResult result;
    ad::Rng rng(cfg.seed);
    const ad::AdamConfig adam{.lr = cfg.lr};
    const std::size_t n = embeddings.rows(), K = p.dictionary_size();
    if (p.enc_w.step_count == 0) init_bias_to_mean(p.dec_b, embeddings);
    if (cfg.normalize_decoder) normalize_rows(p.dec_w.value);
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        auto order = shuffled(n, rng);
        std::vector<std::uint8_t> fired(K, 0);
        double total = 0;
        for (std::size_t start = 0; start < n; start += cfg.batch_size) {
            std::span<const std::size_t> rows(order.data() + start, std::min(n, start + cfg.batch_size) - start);
            auto x = gather_rows(embeddings, rows);
            auto out = sae_forward(p, x, cfg.mode);
            auto loss = ad::mse(out.reconstruction, x);
            ad::backward(loss);
            ad::adam_step(p.parameters(), adam);
            if (cfg.normalize_decoder) normalize_rows(p.dec_w.value);
            total += loss.item() * static_cast<double>(rows.size());
            for (auto& s : out.activation.samples)
                for (auto& t : s)
                    if (t.value > 0) fired[static_cast<std::size_t>(t.latent)] = 1;
        }
        result.epoch_loss.push_back(total / static_cast<double>(n));
        if (!std::isfinite(result.epoch_loss.back())) throw TrainingError("SAE loss diverged at epoch " + std::to_string(epoch));
        if (epoch + 1 == cfg.epochs) {
            for (std::size_t l = 0; l < K; ++l)
                if (!fired[l]) result.dead_latents.push_back(static_cast<int>(l));
        }
    }
    result.final_loss = result.epoch_loss.empty() ? ad::mse(sae_forward(p, embeddings, cfg.mode).reconstruction, embeddings).item()
                                                  : result.epoch_loss.back();
    return result;
}

// -- prototypes and activation dumps ---------------------------------------

/// Reference to a top latent, or to one of its sub-latents when sub >= 0.
struct LatentRef {
    int latent = -1;
    int sub = -1;
};

/// The top_n samples with the largest magnitude for a latent, descending, ties by sample id.
inline std::vector<std::size_t> prototypes(const LatentActivation& act, std::span<const std::size_t> sample_ids, LatentRef ref,
                                           std::size_t top_n) {
    if (sample_ids.size() != act.size()) throw DimensionError("prototypes: sample id count does not match activations");
    std::vector<std::pair<double, std::size_t>> hits;
    for (std::size_t i = 0; i < act.size(); ++i) {
        const double v = ref.sub < 0 ? act.value(i, ref.latent) : act.sub_value(i, ref.latent, ref.sub);
        if (v > 0) hits.emplace_back(v, sample_ids[i]);
    }
    std::sort(hits.begin(), hits.end(), [](auto& a, auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); });
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < std::min(top_n, hits.size()); ++i) out.push_back(hits[i].second);
    return out;
}

inline nlohmann::json activations_to_json(const LatentActivation& act, std::span<const std::size_t> sample_ids) {
    if (sample_ids.size() != act.size()) throw DimensionError("activation dump: sample id count does not match activations");
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t i = 0; i < act.size(); ++i) {
        nlohmann::json top = nlohmann::json::array();
        for (auto& t : act.samples[i]) {
            nlohmann::json subs = nlohmann::json::array();
            for (auto& s : t.subs) subs.push_back({s.latent, s.value});
            top.push_back({{"latent", t.latent}, {"value", t.value}, {"subs", subs}});
        }
        rows.push_back({{"sample", sample_ids[i]}, {"active", top}});
    }
    return {{"format", "latent-activations"}, {"version", 1}, {"samples", rows}};
}

inline std::pair<LatentActivation, std::vector<std::size_t>> activations_from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "latent-activations" || j.value("version", 0) != 1)
        throw FormatError("not a version-1 latent activation dump");
    LatentActivation act;
    std::vector<std::size_t> ids;
    for (auto& row : j.at("samples")) {
        ids.push_back(row.at("sample"));
        auto& s = act.samples.emplace_back();
        for (auto& t : row.at("active")) {
            LatentActivation::Top top{t.at("latent"), t.at("value"), {}};
            for (auto& sub : t.at("subs")) top.subs.push_back({sub.at(0), sub.at(1)});
            s.push_back(std::move(top));
        }
    }
    return {std::move(act), std::move(ids)};
}

inline void save_activations(const std::filesystem::path& path, const LatentActivation& act, std::span<const std::size_t> sample_ids) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw PathError("cannot write " + path.string());
    out << activations_to_json(act, sample_ids).dump() << '\n';
}

inline std::pair<LatentActivation, std::vector<std::size_t>> load_activations(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw PathError("cannot read " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    return activations_from_json(j);
}

}  // namespace mlcs::sae

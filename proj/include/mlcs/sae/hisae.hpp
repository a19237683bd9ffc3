#pragma once

// Two-level sparse autoencoder. A top-k top stage over K latents; each
// selected top latent ℓ with positive magnitude gates its own sub-dictionary of K_s latents, whose
// encoder reads e (or the top-stage residual) and keeps its top k_s. The
// reconstruction sums the top decoder, the decoder bias and the decoders of
// every gated sub-dictionary. Encoders read e minus the decoder bias.
// Gradients are written by hand.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "mlcs/sae/sae.hpp"

namespace mlcs::sae {

struct HiSAEConfig {
    std::size_t K = 256;
    std::size_t k = 8;
    std::size_t K_s = 64;
    std::size_t k_s = 4;  // 0 disables the sub stage
    bool residual_sub_input = false;

    nlohmann::json to_json() const {
        return {{"K", K}, {"k", k}, {"K_s", K_s}, {"k_s", k_s}, {"residual_sub_input", residual_sub_input}};
    }
    static HiSAEConfig from_json(const nlohmann::json& j) {
        HiSAEConfig c;
        c.K = j.at("K");
        c.k = j.at("k");
        c.K_s = j.at("K_s");
        c.k_s = j.at("k_s");
        c.residual_sub_input = j.at("residual_sub_input");
        return c;
    }
    void validate() const {
        if (k == 0 || k > K) throw ArgumentError("HiSAE needs 1 <= k <= K, got k=" + std::to_string(k) + " K=" + std::to_string(K));
        if (k_s > K_s) throw ArgumentError("HiSAE needs k_s <= K_s, got k_s=" + std::to_string(k_s) + " K_s=" + std::to_string(K_s));
    }
};

struct SubDictionary {
    ad::Parameter enc_w, enc_b, dec_w;  // [m×K_s], [K_s], [K_s×m]
};

struct HiSAEParams {
    HiSAEConfig config;
    ad::Parameter enc_w, enc_b, dec_w, dec_b;  // [m×K], [K], [K×m], [m]
    std::vector<SubDictionary> subs;           // one per top latent

    std::size_t input_dim() const { return enc_w.value.rows(); }
    bool has_sub_stage() const { return config.k_s > 0; }

    static HiSAEParams random(std::size_t m, const HiSAEConfig& cfg, ad::Rng& rng) {
        cfg.validate();
        HiSAEParams p;
        p.config = cfg;
        auto [enc, dec] = tied_init(m, cfg.K, rng);
        p.enc_w = ad::Parameter("enc.w", enc);
        p.enc_b = ad::Parameter("enc.b", ad::Tensor::zeros({cfg.K}));
        p.dec_w = ad::Parameter("dec.w", dec);
        p.dec_b = ad::Parameter("dec.b", ad::Tensor::zeros({m}));
        if (cfg.k_s > 0) {
            p.subs.reserve(cfg.K);
            for (std::size_t l = 0; l < cfg.K; ++l) {
                auto [senc, sdec] = tied_init(m, cfg.K_s, rng);
                const std::string pre = "sub." + std::to_string(l) + ".";
                p.subs.push_back({ad::Parameter(pre + "enc.w", senc), ad::Parameter(pre + "enc.b", ad::Tensor::zeros({cfg.K_s})),
                                  ad::Parameter(pre + "dec.w", sdec)});
            }
        }
        return p;
    }

    std::vector<ad::Parameter*> parameters() {
        std::vector<ad::Parameter*> out{&enc_w, &enc_b, &dec_w, &dec_b};
        for (auto& s : subs) {
            out.push_back(&s.enc_w);
            out.push_back(&s.enc_b);
            out.push_back(&s.dec_w);
        }
        return out;
    }

    void normalize_decoders() {
        normalize_rows(dec_w.value);
        for (auto& s : subs) normalize_rows(s.dec_w.value);
    }

    ad::Container to_container() const {
        ad::Container c;
        c.meta = {{"kind", "hisae"}, {"config", config.to_json()}, {"input_dim", input_dim()}};
        c.put(enc_w.name, enc_w.value);
        c.put(enc_b.name, enc_b.value);
        c.put(dec_w.name, dec_w.value);
        c.put(dec_b.name, dec_b.value);
        for (auto& s : subs) {
            c.put(s.enc_w.name, s.enc_w.value);
            c.put(s.enc_b.name, s.enc_b.value);
            c.put(s.dec_w.name, s.dec_w.value);
        }
        return c;
    }
    static HiSAEParams from_container(const ad::Container& c) {
        if (c.meta.value("kind", "") != "hisae") throw FormatError("container does not hold a HiSAE");
        HiSAEParams p;
        p.config = HiSAEConfig::from_json(c.meta.at("config"));
        p.enc_w = ad::Parameter("enc.w", c.get("enc.w"));
        p.enc_b = ad::Parameter("enc.b", c.get("enc.b"));
        p.dec_w = ad::Parameter("dec.w", c.get("dec.w"));
        p.dec_b = ad::Parameter("dec.b", c.get("dec.b"));
        if (p.config.k_s > 0)
            for (std::size_t l = 0; l < p.config.K; ++l) {
                const std::string pre = "sub." + std::to_string(l) + ".";
                p.subs.push_back({ad::Parameter(pre + "enc.w", c.get(pre + "enc.w")), ad::Parameter(pre + "enc.b", c.get(pre + "enc.b")),
                                  ad::Parameter(pre + "dec.w", c.get(pre + "dec.w"))});
            }
        return p;
    }
};

struct HiSaeOutput {
    std::vector<double> reconstruction;  // [n×m] row-major
    LatentActivation activation;         // every selected latent, magnitudes may be 0
};

namespace detail {

// relu(x·W + b) for one row; W is [m×K] row-major.
inline void encode_row(const double* x, std::size_t m, const ad::Tensor& w, const ad::Tensor& b, std::vector<double>& out) {
    const std::size_t K = w.cols();
    out.assign(b.data().begin(), b.data().end());
    const double* wd = w.data().data();
    for (std::size_t j = 0; j < m; ++j) {
        const double xj = x[j];
        const double* wr = wd + j * K;
        for (std::size_t l = 0; l < K; ++l) out[l] += xj * wr[l];
    }
    for (auto& v : out) v = v > 0 ? v : 0.0;
}

inline void select_sorted(const std::vector<double>& v, std::size_t k, std::vector<std::size_t>& order) {
    ad::detail::select_largest(v, k, order);
    std::sort(order.begin(), order.end());
}

}  // namespace detail

/// Forward pass; when `grad_scale` is non-zero, also accumulates gradients of
/// grad_scale · Σ (reconstruction − e)² into the parameters.
inline HiSaeOutput hisae_pass(HiSAEParams& p, const ad::Tensor& e, double grad_scale) {
    const auto& cfg = p.config;
    cfg.validate();
    if (e.rank() != 2 || e.cols() != p.input_dim())
        throw DimensionError("HiSAE expects [n×" + std::to_string(p.input_dim()) + "], got " + ad::to_string(e.shape()));
    require_finite(e, "hisae_forward");
    const std::size_t n = e.rows(), m = e.cols(), K = cfg.K;
    const bool grads = grad_scale != 0.0;
    HiSaeOutput out;
    out.reconstruction.assign(n * m, 0.0);
    out.activation.samples.resize(n);

    double *g_enc_w = nullptr, *g_enc_b = nullptr, *g_dec_w = nullptr, *g_dec_b = nullptr;
    if (grads) {
        g_enc_w = p.enc_w.value.mutable_grad().data();
        g_enc_b = p.enc_b.value.mutable_grad().data();
        g_dec_w = p.dec_w.value.mutable_grad().data();
        g_dec_b = p.dec_b.value.mutable_grad().data();
    }
    const double* dec = p.dec_w.value.data().data();
    const double* dec_b = p.dec_b.value.data().data();
    const double* enc_w = p.enc_w.value.data().data();
    std::vector<double> z, s, xc(m), sub_in(m), g(m);
    std::vector<std::size_t> top, subtop;

    for (std::size_t i = 0; i < n; ++i) {
        const double* x = e.data().data() + i * m;
        double* r = out.reconstruction.data() + i * m;
        for (std::size_t j = 0; j < m; ++j) xc[j] = x[j] - dec_b[j];
        detail::encode_row(xc.data(), m, p.enc_w.value, p.enc_b.value, z);
        detail::select_sorted(z, cfg.k, top);
        for (std::size_t j = 0; j < m; ++j) r[j] = dec_b[j];
        for (auto l : top) {
            const double v = z[l];
            out.activation.samples[i].push_back({static_cast<int>(l), v, {}});
            if (v != 0.0)
                for (std::size_t j = 0; j < m; ++j) r[j] += v * dec[l * m + j];
        }
        if (cfg.k_s > 0) {
            for (std::size_t j = 0; j < m; ++j) sub_in[j] = cfg.residual_sub_input ? x[j] - r[j] : xc[j];
            for (std::size_t t = 0; t < top.size(); ++t) {
                if (z[top[t]] <= 0.0) continue;
                auto& sd = p.subs[top[t]];
                detail::encode_row(sub_in.data(), m, sd.enc_w.value, sd.enc_b.value, s);
                detail::select_sorted(s, cfg.k_s, subtop);
                const double* sdec = sd.dec_w.value.data().data();
                auto& subs = out.activation.samples[i][t].subs;
                for (auto q : subtop) {
                    subs.push_back({static_cast<int>(q), s[q]});
                    if (s[q] != 0.0)
                        for (std::size_t j = 0; j < m; ++j) r[j] += s[q] * sdec[q * m + j];
                }
            }
        }
        if (!grads) continue;

        for (std::size_t j = 0; j < m; ++j) {
            g[j] = 2.0 * grad_scale * (r[j] - x[j]);
            g_dec_b[j] += g[j];
        }
        for (auto& a : out.activation.samples[i]) {
            const auto l = static_cast<std::size_t>(a.latent);
            double dz = 0;
            for (std::size_t j = 0; j < m; ++j) {
                g_dec_w[l * m + j] += a.value * g[j];
                dz += g[j] * dec[l * m + j];
            }
            if (a.value > 0) {
                for (std::size_t j = 0; j < m; ++j) {
                    g_enc_w[j * K + l] += xc[j] * dz;
                    g_dec_b[j] -= enc_w[j * K + l] * dz;
                }
                g_enc_b[l] += dz;
            }
            if (cfg.k_s == 0) continue;
            // The sub-stage input is treated as a constant in residual mode.
            auto& sd = p.subs[l];
            const std::size_t Ks = cfg.K_s;
            const double* sdec = sd.dec_w.value.data().data();
            double* gs_dec = sd.dec_w.value.mutable_grad().data();
            double* gs_enc = sd.enc_w.value.mutable_grad().data();
            double* gs_b = sd.enc_b.value.mutable_grad().data();
            for (auto& sa : a.subs) {
                const auto q = static_cast<std::size_t>(sa.latent);
                double ds = 0;
                for (std::size_t j = 0; j < m; ++j) {
                    gs_dec[q * m + j] += sa.value * g[j];
                    ds += g[j] * sdec[q * m + j];
                }
                if (sa.value > 0) {
                    const double* senc = sd.enc_w.value.data().data();
                    for (std::size_t j = 0; j < m; ++j) {
                        gs_enc[j * Ks + q] += sub_in[j] * ds;
                        if (!cfg.residual_sub_input) g_dec_b[j] -= senc[j * Ks + q] * ds;
                    }
                    gs_b[q] += ds;
                }
            }
        }
    }
    return out;
}

inline HiSaeOutput hisae_forward(const HiSAEParams& p, const ad::Tensor& e) {
    return hisae_pass(const_cast<HiSAEParams&>(p), e, 0.0);
}

inline double reconstruction_mse(const std::vector<double>& recon, const ad::Tensor& e) {
    double s = 0;
    for (std::size_t i = 0; i < recon.size(); ++i) s += (recon[i] - e[i]) * (recon[i] - e[i]);
    return s / static_cast<double>(recon.size());
}

/// 1 − SSE / total sum of squares about the per-dimension mean.
inline double explained_variance(const HiSAEParams& p, const ad::Tensor& e) {
    auto out = hisae_forward(p, e);
    const std::size_t n = e.rows(), m = e.cols();
    std::vector<double> mean(m, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) mean[j] += e.at(i, j) / static_cast<double>(n);
    double sse = 0, sst = 0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
            sse += std::pow(out.reconstruction[i * m + j] - e.at(i, j), 2);
            sst += std::pow(e.at(i, j) - mean[j], 2);
        }
    return sst > 0 ? 1.0 - sse / sst : (sse == 0 ? 1.0 : 0.0);
}

struct HiSaeTrainConfig {
    double lr = 3e-4;
    std::size_t epochs = 100;
    std::size_t batch_size = 1000;
    bool normalize_decoder = true;
    std::uint64_t seed = 0;
};

struct HiSaeTrainResult {
    std::vector<double> epoch_loss;
    double final_loss = 0.0;
    std::vector<int> dead_latents;  // top latents never active with positive magnitude in the last epoch
};

inline HiSaeTrainResult train_hisae(HiSAEParams& p, const ad::Tensor& embeddings, const HiSaeTrainConfig& cfg) {
    if (embeddings.rank() != 2 || embeddings.rows() == 0) throw ArgumentError("train_hisae: no embeddings");
    HiSaeTrainResult result;
    ad::Rng rng(cfg.seed);
    const ad::AdamConfig adam{.lr = cfg.lr};
    const std::size_t n = embeddings.rows();
    if (p.enc_w.step_count == 0) init_bias_to_mean(p.dec_b, embeddings);
    if (cfg.normalize_decoder) p.normalize_decoders();
    auto params = p.parameters();
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        auto order = shuffled(n, rng);
        std::vector<std::uint8_t> fired(p.config.K, 0);
        double total = 0;
        for (std::size_t start = 0; start < n; start += cfg.batch_size) {
            std::span<const std::size_t> rows(order.data() + start, std::min(n, start + cfg.batch_size) - start);
            auto x = gather_rows(embeddings, rows);
            auto out = hisae_pass(p, x, 1.0 / static_cast<double>(x.size()));
            ad::adam_step(params, adam);
            if (cfg.normalize_decoder) p.normalize_decoders();
            total += reconstruction_mse(out.reconstruction, x) * static_cast<double>(rows.size());
            for (auto& s : out.activation.samples)
                for (auto& t : s)
                    if (t.value > 0) fired[static_cast<std::size_t>(t.latent)] = 1;
        }
        result.epoch_loss.push_back(total / static_cast<double>(n));
        if (!std::isfinite(result.epoch_loss.back())) throw TrainingError("HiSAE loss diverged at epoch " + std::to_string(epoch));
        if (epoch + 1 == cfg.epochs)
            for (std::size_t l = 0; l < p.config.K; ++l)
                if (!fired[l]) result.dead_latents.push_back(static_cast<int>(l));
    }
    result.final_loss = result.epoch_loss.empty() ? reconstruction_mse(hisae_forward(p, embeddings).reconstruction, embeddings)
                                                  : result.epoch_loss.back();
    return result;
}

}  // namespace mlcs::sae

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <random>
#include <set>

#include "mlcs/sae/hisae.hpp"

using namespace mlcs;
using namespace mlcs::sae;

namespace {

ad::Tensor random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed, double sd = 1.0) {
    ad::Rng rng(seed);
    return ad::gaussian({rows, cols}, sd, rng);
}

HiSAEParams small_hisae(std::size_t m, HiSAEConfig cfg, std::uint64_t seed) {
    ad::Rng rng(seed);
    auto p = HiSAEParams::random(m, cfg, rng);
    // random biases so some pre-activations are negative
    for (auto* par : p.parameters())
        if (par->name.ends_with("enc.b"))
            for (auto& v : par->value.mutable_data()) v = std::normal_distribution<double>(0.0, 0.3)(rng);
    return p;
}

double loss_of(HiSAEParams& p, const ad::Tensor& e) {
    auto out = hisae_forward(p, e);
    double s = 0;
    for (std::size_t i = 0; i < out.reconstruction.size(); ++i) s += std::pow(out.reconstruction[i] - e[i], 2);
    return s / static_cast<double>(e.size());
}

// Embeddings that are one of `dirs` times a positive magnitude plus small noise; returns cluster ids.
std::vector<int> planted(std::size_t n, std::size_t m, std::size_t clusters, std::uint64_t seed, ad::Tensor& out) {
    ad::Rng rng(seed);
    std::vector<std::vector<double>> dirs(clusters, std::vector<double>(m, 0.0));
    for (std::size_t c = 0; c < clusters; ++c) dirs[c][c] = 3.0;
    std::uniform_int_distribution<int> pick(0, static_cast<int>(clusters) - 1);
    std::uniform_real_distribution<double> mag(0.5, 1.5);
    std::normal_distribution<double> noise(0.0, 0.05);
    std::vector<double> v(n * m);
    std::vector<int> ids(n);
    for (std::size_t i = 0; i < n; ++i) {
        ids[i] = pick(rng);
        const double a = mag(rng);
        for (std::size_t j = 0; j < m; ++j) v[i * m + j] = a * dirs[static_cast<std::size_t>(ids[i])][j] + noise(rng);
    }
    out = ad::Tensor::matrix(n, m, std::move(v));
    return ids;
}

}  // namespace

TEST(Sae, FullDictionaryIsPlainAutoencoder) {
    ad::Rng rng(1);
    auto p = SAEParams::random(5, 6, 6, rng);
    auto e = random_matrix(4, 5, 2);
    auto out = sae_forward(p, e, TopKMode::per_sample);
    auto dense = ad::affine(ad::relu(ad::affine(e, p.enc_w.value, p.enc_b.value)), p.dec_w.value, ad::Tensor::zeros({5}));
    for (std::size_t i = 0; i < dense.size(); ++i) EXPECT_DOUBLE_EQ(out.reconstruction[i], dense[i]);
}

TEST(Sae, ZeroInputZeroBiasGivesZero) {
    ad::Rng rng(1);
    auto p = SAEParams::random(5, 8, 2, rng);
    auto out = sae_forward(p, ad::Tensor::zeros({3, 5}), TopKMode::batch);
    for (double v : out.reconstruction.data()) EXPECT_EQ(v, 0.0);
}

TEST(Sae, RejectsKAboveDictionary) {
    ad::Rng rng(1);
    EXPECT_THROW(SAEParams::random(5, 4, 5, rng), ArgumentError);
    HiSAEConfig cfg{.K = 4, .k = 2, .K_s = 3, .k_s = 4};
    EXPECT_THROW(HiSAEParams::random(5, cfg, rng), ArgumentError);
}

TEST(Sparsity, ExactCountsOnRandomBatches) {
    ad::Rng rng(3);
    auto sae = SAEParams::random(6, 32, 4, rng);
    auto hi = small_hisae(6, {.K = 16, .k = 3, .K_s = 8, .k_s = 2}, 4);
    std::uniform_int_distribution<std::size_t> rows(1, 20);
    for (int b = 0; b < 1000; ++b) {
        const std::size_t n = rows(rng);
        auto e = random_matrix(n, 6, 100 + static_cast<std::uint64_t>(b));
        auto per = sae_forward(sae, e, TopKMode::per_sample);
        for (auto& s : per.activation.samples) ASSERT_EQ(s.size(), 4u);
        std::size_t nz_rows = 0;
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t c = 0;
            for (std::size_t l = 0; l < 32; ++l) c += per.codes.at(i, l) != 0.0;
            nz_rows += c <= 4;
        }
        ASSERT_EQ(nz_rows, n);
        auto batch = sae_forward(sae, e, TopKMode::batch);
        ASSERT_EQ(batch.activation.total_active(), n * 4);
        auto h = hisae_forward(hi, e);
        for (auto& s : h.activation.samples) {
            ASSERT_EQ(s.size(), 3u);
            for (auto& t : s) ASSERT_EQ(t.subs.size(), t.value > 0 ? 2u : 0u);
        }
    }
}

TEST(Gating, InactiveParentSubStageHasNoEffect) {
    auto p = small_hisae(6, {.K = 8, .k = 2, .K_s = 5, .k_s = 2}, 5);
    auto e = random_matrix(40, 6, 6);
    auto base = hisae_forward(p, e);
    ad::Rng rng(7);
    std::normal_distribution<double> big(0.0, 5.0);
    for (std::size_t i = 0; i < 40; ++i) {
        auto q = HiSAEParams::from_container(p.to_container());
        std::set<int> active;
        for (auto& t : base.activation.samples[i]) active.insert(t.latent);
        for (int l = 0; l < 8; ++l) {
            if (active.count(l)) continue;
            auto& sd = q.subs[static_cast<std::size_t>(l)];
            for (auto* par : {&sd.enc_w, &sd.enc_b, &sd.dec_w})
                for (auto& v : par->value.mutable_data()) v = big(rng);
        }
        auto row = sae::gather_rows(e, std::vector<std::size_t>{i});
        auto out = hisae_forward(q, row);
        for (std::size_t j = 0; j < 6; ++j) ASSERT_EQ(out.reconstruction[j], base.reconstruction[i * 6 + j]);
    }
}

TEST(Gating, ParentOneOfTwo) {
    // K=2, k=1: the unselected parent's sub-decoder contributes nothing.
    auto p = small_hisae(3, {.K = 2, .k = 1, .K_s = 2, .k_s = 1}, 8);
    auto e = ad::Tensor::matrix(1, 3, {1.0, 0.2, -0.4});
    auto out = hisae_forward(p, e);
    const int active = out.activation.samples[0][0].latent;
    auto& other = p.subs[static_cast<std::size_t>(1 - active)];
    for (auto& v : other.dec_w.value.mutable_data()) v = 1e6;
    auto again = hisae_forward(p, e);
    EXPECT_EQ(again.reconstruction, out.reconstruction);
}

TEST(HiSae, ZeroSubDecodersMatchTopStage) {
    HiSAEConfig cfg{.K = 8, .k = 3, .K_s = 4, .k_s = 2};
    auto p = small_hisae(5, cfg, 9);
    for (auto& s : p.subs)
        for (auto& v : s.dec_w.value.mutable_data()) v = 0.0;
    auto c = p.to_container();
    HiSAEConfig flat = cfg;
    flat.k_s = 0;
    c.meta["config"] = flat.to_json();
    auto top_only = HiSAEParams::from_container(c);
    auto e = random_matrix(10, 5, 10);
    EXPECT_EQ(hisae_forward(p, e).reconstruction, hisae_forward(top_only, e).reconstruction);
}

TEST(HiSae, GradientsMatchFiniteDifferences) {
    for (bool residual : {false, true}) {
        auto p = small_hisae(4, {.K = 6, .k = 2, .K_s = 4, .k_s = 2, .residual_sub_input = residual}, 11);
        auto e = random_matrix(5, 4, 12);
        for (auto* par : p.parameters()) par->zero_grad();
        hisae_pass(p, e, 1.0 / static_cast<double>(e.size()));
        double worst = 0;
        int checked = 0;
        for (auto* par : p.parameters()) {
            if (residual && par->name.rfind("sub.", 0) != 0) continue;  // stop-gradient path differs by design
            std::vector<double> analytic(par->value.size(), 0.0);
            if (par->value.has_grad()) std::copy(par->value.grad().begin(), par->value.grad().end(), analytic.begin());
            auto w = par->value.mutable_data();
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double orig = w[i], h = 1e-6;
                w[i] = orig + h;
                const double up = loss_of(p, e);
                w[i] = orig - h;
                const double down = loss_of(p, e);
                w[i] = orig;
                const double numeric = (up - down) / (2 * h);
                const double err = std::abs(numeric - analytic[i]) / std::max(1e-6, std::abs(numeric) + std::abs(analytic[i]));
                worst = std::max(worst, err);
                ++checked;
            }
        }
        EXPECT_GT(checked, 50);
        EXPECT_LT(worst, 1e-4) << "residual=" << residual;
    }
}

TEST(HiSae, DictionaryPermutationInvariance) {
    HiSAEConfig cfg{.K = 5, .k = 2, .K_s = 3, .k_s = 1};
    auto p = small_hisae(4, cfg, 13);
    auto q = HiSAEParams::from_container(p.to_container());
    const std::vector<std::size_t> perm{3, 1, 4, 0, 2};  // new latent l is old latent perm[l]
    auto pw = p.enc_w.value.data(), pb = p.enc_b.value.data(), pd = p.dec_w.value.data();
    auto qw = q.enc_w.value.mutable_data(), qb = q.enc_b.value.mutable_data(), qd = q.dec_w.value.mutable_data();
    for (std::size_t l = 0; l < 5; ++l) {
        qb[l] = pb[perm[l]];
        for (std::size_t j = 0; j < 4; ++j) {
            qw[j * 5 + l] = pw[j * 5 + perm[l]];
            qd[l * 4 + j] = pd[perm[l] * 4 + j];
        }
        q.subs[l] = {ad::Parameter(q.subs[l].enc_w.name, p.subs[perm[l]].enc_w.value),
                     ad::Parameter(q.subs[l].enc_b.name, p.subs[perm[l]].enc_b.value),
                     ad::Parameter(q.subs[l].dec_w.name, p.subs[perm[l]].dec_w.value)};
    }
    // continuous inputs make ties in the top-k selection improbable
    auto e = random_matrix(30, 4, 14);
    auto a = hisae_forward(p, e).reconstruction, b = hisae_forward(q, e).reconstruction;
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(Training, SaeMemorizesOneSample) {
    ad::Rng rng(15);
    auto p = SAEParams::random(6, 4, 1, rng);
    auto e = random_matrix(1, 6, 16);
    SaeTrainConfig cfg;
    cfg.lr = 1e-2;
    cfg.epochs = 1500;
    cfg.mode = TopKMode::per_sample;
    auto r = train_sae(p, e, cfg);
    EXPECT_LT(r.final_loss, 1e-6);
    EXPECT_LT(ad::mse(sae_forward(p, e, TopKMode::per_sample).reconstruction, e).item(), 1e-6);
}

TEST(Training, SaeLossTrendsDown) {
    ad::Tensor e;
    planted(400, 8, 4, 17, e);
    ad::Rng rng(18);
    auto p = SAEParams::random(8, 16, 2, rng);
    SaeTrainConfig cfg;
    cfg.lr = 3e-3;
    cfg.epochs = 60;
    cfg.batch_size = 100;
    auto r = train_sae(p, e, cfg);
    for (std::size_t w = 10; w + 10 <= r.epoch_loss.size(); w += 10) {
        double prev = 0, cur = 0;
        for (std::size_t i = 0; i < 10; ++i) prev += r.epoch_loss[w - 10 + i], cur += r.epoch_loss[w + i];
        EXPECT_LE(cur, prev * 1.001) << "window " << w;
    }
}

TEST(Training, TwoClusterOracle) {
    ad::Tensor e;
    auto ids = planted(600, 6, 2, 19, e);
    auto p = small_hisae(6, {.K = 2, .k = 1, .K_s = 2, .k_s = 1}, 20);
    HiSaeTrainConfig cfg;
    cfg.lr = 1e-2;
    cfg.epochs = 100;
    cfg.batch_size = 100;
    train_hisae(p, e, cfg);
    auto act = hisae_forward(p, e).activation;
    std::size_t same = 0;
    for (std::size_t i = 0; i < 600; ++i) same += act.samples[i][0].latent == ids[i];
    const double agreement = std::max(same, 600 - same) / 600.0;
    EXPECT_GE(agreement, 0.9);
}

TEST(Training, SubStageDisabledEqualsTopKSae) {
    ad::Tensor e;
    planted(300, 6, 3, 21, e);
    HiSAEConfig cfg{.K = 10, .k = 2, .K_s = 4, .k_s = 0};
    auto hi = small_hisae(6, cfg, 22);
    SAEParams sae;
    sae.k = 2;
    sae.enc_w = ad::Parameter("enc.w", hi.enc_w.value);
    sae.enc_b = ad::Parameter("enc.b", hi.enc_b.value);
    sae.dec_w = ad::Parameter("dec.w", hi.dec_w.value);
    sae.dec_b = ad::Parameter("dec.b", ad::Tensor::matrix(1, 6, {hi.dec_b.value.data().begin(), hi.dec_b.value.data().end()}));
    HiSaeTrainConfig hc;
    hc.lr = 3e-3;
    hc.epochs = 20;
    hc.batch_size = 64;
    hc.seed = 5;
    SaeTrainConfig sc;
    sc.lr = hc.lr;
    sc.epochs = hc.epochs;
    sc.batch_size = hc.batch_size;
    sc.seed = hc.seed;
    sc.mode = TopKMode::per_sample;
    auto rh = train_hisae(hi, e, hc);
    auto rs = train_sae(sae, e, sc);
    for (std::size_t i = 0; i < rh.epoch_loss.size(); ++i) EXPECT_NEAR(rh.epoch_loss[i], rs.epoch_loss[i], 1e-9);
    for (std::size_t i = 0; i < hi.dec_w.value.size(); ++i) EXPECT_NEAR(hi.dec_w.value[i], sae.dec_w.value[i], 1e-8);
}

TEST(Training, DeadLatentsReported) {
    ad::Tensor e;
    planted(200, 6, 2, 23, e);
    auto p = small_hisae(6, {.K = 12, .k = 1, .K_s = 2, .k_s = 1}, 24);
    // a latent whose encoder can never fire
    auto w = p.enc_w.value.mutable_data();
    for (std::size_t j = 0; j < 6; ++j) w[j * 12 + 11] = 0.0;
    p.enc_b.value.mutable_data()[11] = -100.0;
    HiSaeTrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 50;
    auto r = train_hisae(p, e, cfg);
    EXPECT_NE(std::find(r.dead_latents.begin(), r.dead_latents.end(), 11), r.dead_latents.end());
}

TEST(Training, RejectsEmptyInput) {
    auto p = small_hisae(3, {.K = 2, .k = 1, .K_s = 2, .k_s = 1}, 1);
    EXPECT_THROW(train_hisae(p, ad::Tensor::zeros({3}), {}), ArgumentError);
}

TEST(Prototypes, Basics) {
    LatentActivation act;
    act.samples = {{{0, 0.5, {}}}, {{1, 2.0, {{3, 0.7}}}}, {{1, 2.0, {}}}, {{1, 1.0, {}}}};
    std::vector<std::size_t> ids{10, 11, 12, 13};
    EXPECT_EQ(prototypes(act, ids, {0, -1}, 5), (std::vector<std::size_t>{10}));
    EXPECT_EQ(prototypes(act, ids, {1, -1}, 10), (std::vector<std::size_t>{11, 12, 13}));
    EXPECT_EQ(prototypes(act, ids, {1, -1}, 2), (std::vector<std::size_t>{11, 12}));
    EXPECT_EQ(prototypes(act, ids, {1, 3}, 2), (std::vector<std::size_t>{11}));
    EXPECT_TRUE(prototypes(act, ids, {7, -1}, 2).empty());
}

TEST(Prototypes, PlantedFeaturesShareTheFeature) {
    ad::Tensor e;
    auto ids = planted(800, 8, 4, 25, e);
    auto p = small_hisae(8, {.K = 4, .k = 1, .K_s = 2, .k_s = 1}, 26);
    HiSaeTrainConfig cfg;
    cfg.lr = 1e-2;
    cfg.epochs = 100;
    cfg.batch_size = 100;
    train_hisae(p, e, cfg);
    auto act = hisae_forward(p, e).activation;
    std::vector<std::size_t> sample_ids(800);
    std::iota(sample_ids.begin(), sample_ids.end(), std::size_t{0});
    int used = 0;
    for (int l = 0; l < 4; ++l) {
        auto protos = prototypes(act, sample_ids, {l, -1}, 10);
        if (protos.empty()) continue;
        ++used;
        for (auto s : protos) EXPECT_EQ(ids[s], ids[protos.front()]) << "latent " << l;
    }
    EXPECT_GE(used, 2);
}

TEST(Persistence, ActivationDumpAndCheckpointRoundTrip) {
    auto p = small_hisae(5, {.K = 6, .k = 2, .K_s = 3, .k_s = 1}, 27);
    auto e = random_matrix(7, 5, 28);
    auto act = hisae_forward(p, e).activation;
    std::vector<std::size_t> ids{3, 4, 5, 6, 7, 8, 9};
    auto dir = std::filesystem::temp_directory_path() / "mlcs_sae_test";
    std::filesystem::remove_all(dir);
    save_activations(dir / "act.json", act, ids);
    auto [back, back_ids] = load_activations(dir / "act.json");
    EXPECT_EQ(back_ids, ids);
    ASSERT_EQ(back.size(), act.size());
    for (std::size_t i = 0; i < act.size(); ++i)
        for (std::size_t t = 0; t < act.samples[i].size(); ++t) {
            EXPECT_EQ(back.samples[i][t].latent, act.samples[i][t].latent);
            EXPECT_DOUBLE_EQ(back.samples[i][t].value, act.samples[i][t].value);
            EXPECT_EQ(back.samples[i][t].subs.size(), act.samples[i][t].subs.size());
        }
    ad::save_container(dir / "hisae.ckpt", p.to_container());
    auto q = HiSAEParams::from_container(ad::load_container(dir / "hisae.ckpt"));
    EXPECT_EQ(hisae_forward(q, e).reconstruction, hisae_forward(p, e).reconstruction);
    EXPECT_THROW(load_activations(dir / "missing.json"), PathError);
    std::filesystem::remove_all(dir);
}

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include "mlcs/models/training.hpp"
#include "support/oracles.hpp"

using namespace mlcs;
using namespace mlcs::models;

namespace {

ModelConfig small_config(ModelKind kind = ModelKind::cem) {
    ModelConfig c;
    c.kind = kind;
    c.input_dim = 6;
    c.backbone_width = 7;
    c.n_hidden = 5;
    c.m = 3;
    c.n_tasks = 4;
    c.seed = 11;
    return c;
}

ad::Tensor random_input(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<double> v(rows * cols);
    for (auto& x : v) x = g(rng);
    return ad::Tensor::matrix(rows, cols, std::move(v));
}

// Two roots; root A has positive children a1 (with child a11) and a2 and a negative child an.
struct SmallTree {
    ConceptTree tree;
    int a, b, a1, a2, an, a11;
    SmallTree() {
        a = tree.add_top("A", 0);
        b = tree.add_top("B", 1);
        a1 = tree.add_child(a, Polarity::positive, "A1");
        a2 = tree.add_child(a, Polarity::positive, "A2");
        an = tree.add_child(a, Polarity::negative, "A-neg");
        a11 = tree.add_child(a1, Polarity::positive, "A1a");
    }
};

data::SplitData tiny_split(std::size_t n, std::uint64_t seed) {
    data::DatasetConfig cfg;
    cfg.seed = seed;
    cfg.n_train = n;
    cfg.n_val = 1;
    cfg.n_test = 1;
    return data::generate_dataset(cfg).train;
}

}  // namespace

TEST(DeepHiCEM, FlatTreeMatchesReferenceCem) {
    DeepHiCEM model(flat_tree({"a", "b", "c", "d", "e"}), small_config());
    testkit::ReferenceCem ref{model};
    auto x = random_input(100, 6, 3);
    auto out = model.forward(x);
    double worst = 0;
    for (std::size_t r = 0; r < 100; ++r) {
        std::vector<double> row(x.data().begin() + static_cast<std::ptrdiff_t>(r * 6), x.data().begin() + static_cast<std::ptrdiff_t>(r * 6 + 6));
        auto expect = ref.logits(row);
        for (std::size_t j = 0; j < 4; ++j) worst = std::max(worst, std::abs(expect[j] - out.logits.at(r, j)));
    }
    EXPECT_LT(worst, 1e-10);
}

TEST(DeepHiCEM, MixtureEndpointsUnderIntervention) {
    SmallTree t;
    DeepHiCEM model(t.tree, small_config());
    auto x = random_input(4, 6, 5);
    BatchInterventions iv(t.tree.size(), 4);
    iv.set(t.b, 0, 1);
    iv.set(t.b, 1, 0);
    auto out = model.forward(x, &iv);
    const auto& nb = out.nodes[static_cast<std::size_t>(t.b)];
    for (std::size_t j = 0; j < 3; ++j) {
        EXPECT_DOUBLE_EQ(nb.mixture.at(0, j), nb.pos.at(0, j));
        EXPECT_DOUBLE_EQ(nb.mixture.at(1, j), nb.neg.at(1, j));
    }
    EXPECT_DOUBLE_EQ(out.prob(t.b, 0), 1.0);
    EXPECT_DOUBLE_EQ(out.prob(t.b, 1), 0.0);
    const double p = out.prob(t.b, 2);
    for (std::size_t j = 0; j < 3; ++j)
        EXPECT_NEAR(nb.mixture.at(2, j), p * nb.pos.at(2, j) + (1 - p) * nb.neg.at(2, j), 1e-12);
}

TEST(DeepHiCEM, LeafUsesPreliminaryEmbeddings) {
    SmallTree t;
    DeepHiCEM model(t.tree, small_config());
    auto out = model.forward(random_input(3, 6, 6));
    for (int id : {t.b, t.a2, t.an, t.a11}) {
        const auto& n = out.nodes[static_cast<std::size_t>(id)];
        EXPECT_EQ(n.pos.data()[0], n.pre_pos.data()[0]);
        EXPECT_TRUE(std::equal(n.pos.data().begin(), n.pos.data().end(), n.pre_pos.data().begin()));
        EXPECT_TRUE(std::equal(n.neg.data().begin(), n.neg.data().end(), n.pre_neg.data().begin()));
    }
    const auto& na = out.nodes[static_cast<std::size_t>(t.a)];
    EXPECT_FALSE(std::equal(na.pos.data().begin(), na.pos.data().end(), na.pre_pos.data().begin()));
    EXPECT_FALSE(static_cast<bool>(model.node_params(t.b).comp_pos));
    EXPECT_TRUE(static_cast<bool>(model.node_params(t.a).comp_neg));
}

TEST(DeepHiCEM, SubConceptGeneratorsReadParentPreliminary) {
    SmallTree t;
    DeepHiCEM model(t.tree, small_config());
    EXPECT_EQ(model.node_params(t.a).gen_pos.w->value.rows(), 5u);  // n_hidden
    EXPECT_EQ(model.node_params(t.a1).gen_pos.w->value.rows(), 3u);  // m
    EXPECT_EQ(model.node_params(t.a).comp_pos.w->value.rows(), 6u);  // two positive children × m
    EXPECT_EQ(model.label_predictor().w->value.rows(), 6u);          // two roots × m
}

TEST(DeepHiCEM, ScorerIsShared) {
    SmallTree t;
    DeepHiCEM model(t.tree, small_config());
    int scorers = 0;
    for (auto* p : model.parameters()) scorers += p->name.rfind("scorer.", 0) == 0;
    EXPECT_EQ(scorers, 2);
    auto x = random_input(2, 6, 7);
    auto before = model.forward(x);
    model.parameter("scorer.b").value.mutable_data()[0] += 0.5;
    auto after = model.forward(x);
    for (std::size_t n = 0; n < t.tree.size(); ++n) EXPECT_NE(before.prob(static_cast<int>(n), 0), after.prob(static_cast<int>(n), 0));
}

TEST(DeepHiCEM, InterventionIsLocal) {
    SmallTree t;
    DeepHiCEM model(t.tree, small_config());
    auto x = random_input(5, 6, 8);
    auto base = model.forward(x);
    BatchInterventions iv(t.tree.size(), 5);
    for (std::size_t r = 0; r < 5; ++r) iv.set(t.a11, r, base.prob(t.a11, r) > 0.5 ? 0 : 1);
    auto out = model.forward(x, &iv);
    auto same = [](const ad::Tensor& u, const ad::Tensor& v) { return std::equal(u.data().begin(), u.data().end(), v.data().begin()); };
    // other root, siblings and probabilities above the override stay put
    EXPECT_TRUE(same(out.nodes[static_cast<std::size_t>(t.b)].mixture, base.nodes[static_cast<std::size_t>(t.b)].mixture));
    EXPECT_TRUE(same(out.nodes[static_cast<std::size_t>(t.a2)].mixture, base.nodes[static_cast<std::size_t>(t.a2)].mixture));
    EXPECT_TRUE(same(out.nodes[static_cast<std::size_t>(t.an)].mixture, base.nodes[static_cast<std::size_t>(t.an)].mixture));
    EXPECT_TRUE(same(out.nodes[static_cast<std::size_t>(t.a)].prob, base.nodes[static_cast<std::size_t>(t.a)].prob));
    // the path from the overridden node to its root changes
    EXPECT_FALSE(same(out.nodes[static_cast<std::size_t>(t.a1)].mixture, base.nodes[static_cast<std::size_t>(t.a1)].mixture));
    EXPECT_FALSE(same(out.nodes[static_cast<std::size_t>(t.a)].mixture, base.nodes[static_cast<std::size_t>(t.a)].mixture));
}

TEST(DeepHiCEM, RowPermutationCommutes) {
    SmallTree t;
    DeepHiCEM model(t.tree, small_config());
    auto x = random_input(6, 6, 9);
    std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
    std::vector<double> px;
    for (auto r : perm) px.insert(px.end(), x.data().begin() + static_cast<std::ptrdiff_t>(r * 6), x.data().begin() + static_cast<std::ptrdiff_t>(r * 6 + 6));
    auto a = model.forward(x), b = model.forward(ad::Tensor::matrix(6, 6, px));
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(b.logits.at(i, j), a.logits.at(perm[i], j), 1e-12);
}

TEST(DeepHiCEM, RejectsWrongInputWidth) {
    DeepHiCEM model(flat_tree({"a"}), small_config());
    try {
        model.forward(random_input(2, 5, 1));
        FAIL();
    } catch (const DimensionError& e) {
        EXPECT_NE(std::string(e.what()).find("[2x5]"), std::string::npos);
    }
}

TEST(DeepHiCEM, BaselineShapes) {
    auto x = random_input(3, 6, 2);
    DeepHiCEM bb(flat_tree({"a", "b"}), small_config(ModelKind::black_box));
    auto o1 = bb.forward(x);
    EXPECT_TRUE(o1.nodes.empty());
    EXPECT_EQ(o1.logits.shape(), (ad::Shape{3, 4}));
    DeepHiCEM cbm(flat_tree({"a", "b"}), small_config(ModelKind::cbm));
    auto o2 = cbm.forward(x);
    EXPECT_EQ(o2.probabilities().shape(), (ad::Shape{3, 2}));
    EXPECT_EQ(cbm.label_predictor().w->value.rows(), 2u);
}

TEST(DeepHiCEM, SaveLoadRoundTrip) {
    SmallTree t;
    DeepHiCEM model(t.tree, small_config());
    auto dir = std::filesystem::temp_directory_path() / "mlcs_models_test";
    std::filesystem::remove_all(dir);
    model.save(dir / "model.ckpt", dir / "tree.json");
    auto loaded = DeepHiCEM::load(dir / "model.ckpt", dir / "tree.json");
    auto x = random_input(4, 6, 4);
    auto a = model.forward(x), b = loaded.forward(x);
    EXPECT_TRUE(std::equal(a.logits.data().begin(), a.logits.data().end(), b.logits.data().begin()));
    EXPECT_EQ(loaded.tree().to_json(), t.tree.to_json());
    save_tree(dir / "flat.json", flat_tree({"a", "b"}));
    EXPECT_THROW(DeepHiCEM::load(dir / "model.ckpt", dir / "flat.json"), FormatError);
    EXPECT_THROW(DeepHiCEM::load(dir / "missing.ckpt", dir / "tree.json"), PathError);
    std::filesystem::remove_all(dir);
}

TEST(ConceptTreeTest, JsonRoundTripAndQueries) {
    SmallTree t;
    auto back = ConceptTree::from_json(t.tree.to_json());
    EXPECT_EQ(back.to_json(), t.tree.to_json());
    EXPECT_EQ(back.max_depth(), 2);
    EXPECT_EQ(back.root_of(t.a11), t.a);
    EXPECT_EQ(back.find("A-neg"), t.an);
    EXPECT_EQ(back.node(t.an).polarity, Polarity::negative);
}

TEST(Intervene, PositiveChainPropagatesToRoot) {
    SmallTree t;
    auto s = intervene(t.tree, {}, t.a11, 1);
    EXPECT_EQ(s.propagated.at(t.a1), 1);
    EXPECT_EQ(s.propagated.at(t.a), 1);
    EXPECT_TRUE(s.is_induced(t.a));
    EXPECT_FALSE(s.is_induced(t.a11));
}

TEST(Intervene, NegativeChildForcesParentOff) {
    SmallTree t;
    auto s = intervene(t.tree, {}, t.an, 1);
    EXPECT_EQ(s.propagated.at(t.a), 0);
    EXPECT_EQ(s.propagated.size(), 2u);
}

TEST(Intervene, ZeroDoesNotPropagate) {
    SmallTree t;
    auto s = intervene(t.tree, {}, t.a11, 0);
    EXPECT_EQ(s.propagated.size(), 1u);
}

TEST(Intervene, LaterOverridesWinAndRemovalRecomputes) {
    SmallTree t;
    auto s = intervene(t.tree, {}, t.a, 0);
    s = intervene(t.tree, s, t.a1, 1);
    EXPECT_EQ(s.propagated.at(t.a), 1);
    s = intervene(t.tree, s, t.a, 0);
    EXPECT_EQ(s.propagated.at(t.a), 0);
    s = remove_intervention(t.tree, s, t.a);
    EXPECT_EQ(s.propagated.at(t.a), 1);
    s = remove_intervention(t.tree, s, t.a1);
    EXPECT_TRUE(s.propagated.empty());
    EXPECT_THROW(remove_intervention(t.tree, s, t.a1), NotFoundError);
}

TEST(Intervene, RejectsBadInput) {
    SmallTree t;
    EXPECT_THROW(intervene(t.tree, {}, 99, 1), NotFoundError);
    EXPECT_THROW(intervene(t.tree, {}, t.a, 2), ArgumentError);
}

TEST(RandInt, Rates) {
    SmallTree t;
    Supervision sup;
    const std::size_t n = 10000;
    sup.labels.assign(t.tree.size(), std::vector<double>(n, 0.0));
    sup.defined.assign(t.tree.size(), std::vector<std::uint8_t>(n, 0));
    for (std::size_t i = 0; i < n; ++i) {
        sup.defined[static_cast<std::size_t>(t.b)][i] = 1;
        sup.labels[static_cast<std::size_t>(t.b)][i] = static_cast<double>(i % 2);
    }
    std::mt19937_64 rng(1);
    for (std::size_t i = 0; i < 100; ++i) {
        EXPECT_TRUE(randint_mask(t.tree, sup, i, 0.0, rng).empty());
        auto all = randint_mask(t.tree, sup, i, 1.0, rng);
        ASSERT_EQ(all.overrides.size(), 1u);
        EXPECT_EQ(all.overrides[0], (std::pair<int, int>{t.b, static_cast<int>(i % 2)}));
    }
    std::size_t hits = 0;
    for (std::size_t i = 0; i < n; ++i) hits += !randint_mask(t.tree, sup, i, 0.25, rng).empty();
    EXPECT_NEAR(static_cast<double>(hits) / n, 0.25, 0.02);
    EXPECT_THROW(randint_mask(t.tree, sup, 0, 1.5, rng), ArgumentError);
}

TEST(TrainingLoss, LambdaHandling) {
    DeepHiCEM model(flat_tree({"a", "b"}), small_config());
    auto x = random_input(4, 6, 12);
    auto out = model.forward(x);
    Supervision sup;
    sup.labels = {{1, 0, 1, 0}, {0, 0, 1, 1}};
    sup.defined = {{1, 1, 1, 1}, {1, 1, 0, 1}};
    std::vector<std::size_t> rows{0, 1, 2, 3};
    std::vector<int> tasks{0, 1, 2, 3};
    std::vector<double> w{1.0, 2.0};
    const double task = ad::softmax_ce(out.logits, tasks).item();
    EXPECT_DOUBLE_EQ(training_loss(out, sup, rows, tasks, w, 0.0).item(), task);
    EXPECT_THROW(training_loss(out, sup, rows, tasks, w, -1.0), ArgumentError);
    // oracle: mean over concepts of the weighted per-concept BCE over defined rows
    double concept_loss = 0;
    for (int c = 0; c < 2; ++c) {
        double s = 0, cnt = 0;
        for (std::size_t r = 0; r < 4; ++r) {
            if (!sup.defined[static_cast<std::size_t>(c)][r]) continue;
            const double p = out.prob(c, r), y = sup.labels[static_cast<std::size_t>(c)][r];
            s += -(w[static_cast<std::size_t>(c)] * y * std::log(p) + (1 - y) * std::log(1 - p));
            cnt += 1;
        }
        concept_loss += s / cnt / 2;
    }
    EXPECT_NEAR(training_loss(out, sup, rows, tasks, w, 10.0).item(), task + 10 * concept_loss, 1e-10);
}

TEST(PositiveWeights, NegOverPos) {
    Supervision sup;
    sup.labels = {{1, 0, 0, 0}, {1, 1, 1, 1}};
    sup.defined = {{1, 1, 1, 1}, {1, 1, 1, 1}};
    auto w = positive_weights(sup);
    EXPECT_DOUBLE_EQ(w[0], 3.0);
    EXPECT_DOUBLE_EQ(w[1], 1.0);
}

TEST(Training, ZeroEpochsLeavesModelUntouched) {
    auto split = tiny_split(50, 3);
    std::vector<std::string> names(20, "c");
    ModelConfig mc;
    mc.seed = 2;
    DeepHiCEM model(flat_tree(names), mc);
    auto before = model.snapshot();
    auto sup = provided_supervision(model.tree(), split);
    TrainConfig tc;
    tc.epochs = 0;
    auto h = train_model(model, split, sup, split, sup, tc);
    EXPECT_TRUE(h.train_loss.empty());
    EXPECT_EQ(model.snapshot(), before);
}

TEST(Training, LossDecreasesOnSmallData) {
    auto split = tiny_split(500, 4);
    std::vector<std::string> names(20, "c");
    ModelConfig mc;
    mc.seed = 5;
    DeepHiCEM model(flat_tree(names), mc);
    auto sup = provided_supervision(model.tree(), split);
    TrainConfig tc;
    tc.epochs = 5;
    tc.batch_size = 64;
    tc.seed = 1;
    auto h = train_model(model, split, sup, split, sup, tc);
    ASSERT_EQ(h.train_loss.size(), 5u);
    EXPECT_LT(h.train_loss.back(), h.train_loss.front());
    EXPECT_LT(h.val_loss.back(), h.val_loss.front());
    EXPECT_DOUBLE_EQ(split_loss(model, split, sup, positive_weights(sup), tc.lambda), h.best_val_loss);
}

TEST(Training, Deterministic) {
    auto split = tiny_split(200, 6);
    std::vector<std::string> names(20, "c");
    auto run = [&] {
        ModelConfig mc;
        mc.seed = 9;
        DeepHiCEM model(flat_tree(names), mc);
        auto sup = provided_supervision(model.tree(), split);
        TrainConfig tc;
        tc.epochs = 2;
        tc.batch_size = 50;
        tc.seed = 3;
        train_model(model, split, sup, split, sup, tc);
        return model.snapshot();
    };
    EXPECT_EQ(run(), run());
}

#include "support.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <set>

using namespace crs;
using namespace crs::testing;

namespace {

constexpr double kGradTol = 1e-4;

nn::GradCheckResult check(const std::function<double(bool)>& loss, nn::ParamStore& store,
                          std::uint64_t seed) {
    return nn::grad_check(loss, store, 40, 1e-6, seed);
}

}  // namespace

TEST(Losses, ValuesMatchOracle) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        auto fx = random_fixture(4, 10, 5, 3, seed);
        fx.model.tau = 0.7;
        auto& m = fx.model;
        const double infonce = o_mean(fx.batch, [&](const auto& t) { return o_infonce(m, fx.items, t); });
        const double kl = o_mean(fx.batch, [&](const auto& t) { return o_m_kl(m, t); });
        const double mrec = o_mean(fx.batch, [&](const auto& t) { return o_m_rec(m, fx.items, t); });
        const double elbo = o_mean(fx.batch, [&](const auto& t) { return o_elbo(m, fx.items, t); });
        const double erec = o_mean(fx.batch, [&](const auto& t) { return o_e_rec(m, fx.items, t); });

        const auto mt = m_step_loss(fx.batch, m, fx.items, {1.0, 0.3, 0.6}, false);
        EXPECT_NEAR(mt.infonce, infonce, 1e-9);
        EXPECT_NEAR(mt.kl, kl, 1e-9);
        EXPECT_NEAR(mt.m_rec, mrec, 1e-9);
        EXPECT_NEAR(mt.total, infonce + 0.3 * kl + 0.6 * mrec, 1e-9);

        const auto et = e_step_loss(fx.batch, m, fx.items, {1.0, 0.4}, false);
        EXPECT_NEAR(et.elbo, elbo, 1e-9);
        EXPECT_NEAR(et.e_rec, erec, 1e-9);
        EXPECT_NEAR(et.total, elbo + 0.4 * erec, 1e-9);
    }
}

TEST(Losses, AreNonNegative) {
    for (std::uint64_t seed = 10; seed < 30; ++seed) {
        auto fx = random_fixture(3, 8, 4, 2, seed);
        const auto mt = m_step_loss(fx.batch, fx.model, fx.items, {1, 1, 1}, false);
        const auto et = e_step_loss(fx.batch, fx.model, fx.items, {1, 1}, false);
        EXPECT_GE(mt.infonce, 0.0);
        EXPECT_GE(mt.kl, -1e-12);
        EXPECT_GE(mt.m_rec, 0.0);
        EXPECT_GE(et.elbo, -1e-12);
        EXPECT_GE(et.e_rec, 0.0);
    }
}

class GradientCheck : public ::testing::TestWithParam<bool> {};

TEST_P(GradientCheck, EachMTermMatchesFiniteDifferences) {
    const bool trainable = GetParam();
    for (std::uint64_t seed = 1; seed <= 4; ++seed) {
        for (const MWeights w : {MWeights{1, 0, 0}, MWeights{0, 1, 0}, MWeights{0, 0, 1}, MWeights{1, 0.5, 0.5}}) {
            auto fx = random_fixture(4, 10, 5, 3, seed, small_dims(), trainable);
            fx.model.tau = 0.8;
            auto loss = [&](bool acc) { return m_step_loss(fx.batch, fx.model, fx.items, w, acc).total; };
            const auto r = check(loss, fx.model.generative.store, seed);
            EXPECT_LT(r.max_rel_error, kGradTol) << "worst " << r.worst << " w=" << w.infonce << ","
                                                 << w.kl << "," << w.rec;
        }
    }
}

TEST_P(GradientCheck, EachETermMatchesFiniteDifferences) {
    const bool trainable = GetParam();
    for (std::uint64_t seed = 1; seed <= 4; ++seed) {
        for (const EWeights w : {EWeights{1, 0}, EWeights{0, 1}, EWeights{1, 0.5}}) {
            auto fx = random_fixture(3, 9, 4, 3, seed, small_dims(5, 4), trainable);
            fx.model.tau = 1.3;
            auto loss = [&](bool acc) { return e_step_loss(fx.batch, fx.model, fx.items, w, acc).total; };
            const auto r = check(loss, fx.model.inference.store, seed);
            EXPECT_LT(r.max_rel_error, kGradTol) << "worst " << r.worst;
        }
    }
}

INSTANTIATE_TEST_SUITE_P(IntentMode, GradientCheck, ::testing::Values(false, true));

TEST(Losses, MStepTouchesOnlyGenerativeGradients) {
    auto fx = random_fixture(4, 10, 5, 2, 3);
    fx.model.inference.store.zero_grad();
    fx.model.generative.store.zero_grad();
    m_step_loss(fx.batch, fx.model, fx.items, {1, 1, 1}, true);
    for (const auto& p : fx.model.inference.store) EXPECT_EQ(p.grad.norm(), 0.0) << p.name;
    double g = 0;
    for (const auto& p : fx.model.generative.store) g += p.grad.norm();
    EXPECT_GT(g, 0.0);

    fx.model.inference.store.zero_grad();
    fx.model.generative.store.zero_grad();
    e_step_loss(fx.batch, fx.model, fx.items, {1, 1}, true);
    for (const auto& p : fx.model.generative.store) EXPECT_EQ(p.grad.norm(), 0.0) << p.name;
}

TEST(Losses, InfoNCEWithOneHotQIsSoftmaxCrossEntropy) {
    // With all inference mass on one intent j the loss is the cross-entropy
    // of softmax over that intent's g scores.
    auto fx = random_fixture(3, 10, 6, 1, 42);
    auto& m = fx.model;
    auto& Wq = m.inference.store.at("W_q").value;
    auto& Wk = m.inference.store.at("W_k").value;
    Wk = Matrix::Identity(Wk.rows(), Wk.cols());
    Wq = Matrix::Identity(Wq.rows(), Wq.cols()) * 1e4;
    const auto& t = fx.batch[0];
    const auto q = o_q(m, t.behavior);
    const auto j = static_cast<std::size_t>(std::max_element(q.begin(), q.end()) - q.begin());
    ASSERT_GT(q[j], 1.0 - 1e-9);
    std::vector<double> g;
    for (auto c : candidates_of(t)) g.push_back(o_g(m, t.behavior, t.text, item_of(fx.items, c))[j]);
    const double ce = -std::log(o_softmax(g)[0]);
    EXPECT_NEAR(loss_infonce(fx.batch, m, fx.items, false), ce, 1e-6);
}

TEST(Negatives, ExcludeTargetAndHistoryAndAreDistinct) {
    std::mt19937_64 rng(5);
    const std::vector<std::size_t> hist{1, 4, 7};
    for (int trial = 0; trial < 200; ++trial) {
        const auto neg = sample_negatives(3, hist, 20, 10, rng);
        ASSERT_EQ(neg.size(), 10u);
        std::set<std::size_t> s(neg.begin(), neg.end());
        EXPECT_EQ(s.size(), neg.size());
        for (auto n : neg) {
            EXPECT_LT(n, 20u);
            EXPECT_NE(n, 3u);
            EXPECT_FALSE(std::binary_search(hist.begin(), hist.end(), n));
        }
    }
}

TEST(Negatives, TooFewEligibleThrows) {
    std::mt19937_64 rng(1);
    const std::vector<std::size_t> hist{0, 1};
    EXPECT_THROW(sample_negatives(2, hist, 5, 3, rng), std::invalid_argument);
    EXPECT_EQ(sample_negatives(2, hist, 5, 2, rng).size(), 2u);
}

TEST(Negatives, RoughlyUniform) {
    std::mt19937_64 rng(9);
    std::vector<int> counts(10, 0);
    const std::vector<std::size_t> hist{};
    for (int i = 0; i < 9000; ++i)
        for (auto n : sample_negatives(0, hist, 10, 1, rng)) ++counts[n];
    EXPECT_EQ(counts[0], 0);
    for (int i = 1; i < 10; ++i) EXPECT_NEAR(counts[static_cast<std::size_t>(i)], 1000, 150);
}

TEST(Negatives, SeedDependsOnEveryComponent) {
    const auto base = negative_seed(1, 2, 3, 4);
    EXPECT_EQ(base, negative_seed(1, 2, 3, 4));
    EXPECT_NE(base, negative_seed(9, 2, 3, 4));
    EXPECT_NE(base, negative_seed(1, 9, 3, 4));
    EXPECT_NE(base, negative_seed(1, 2, 9, 4));
    EXPECT_NE(base, negative_seed(1, 2, 3, 9));
}

TEST(KL, MatchesOracleAndIsZeroOnEqualInputs) {
    nn::Vector q(3), p(3);
    q << 0.2, 0.5, 0.3;
    p << 0.4, 0.4, 0.2;
    EXPECT_NEAR(kl_divergence(q, p), o_kl({0.2, 0.5, 0.3}, {0.4, 0.4, 0.2}), 1e-12);
    EXPECT_NEAR(kl_divergence(q, q), 0.0, 1e-15);
}

TEST(TrainConfig, ValidateRejectsNonsense) {
    TrainConfig c;
    EXPECT_NO_THROW(c.validate());
    auto bad = [](auto mutate) {
        TrainConfig c;
        mutate(c);
        return c;
    };
    EXPECT_THROW(bad([](auto& c) { c.num_intents = 0; }).validate(), ConfigError);
    EXPECT_THROW(bad([](auto& c) { c.lambda = -1; }).validate(), ConfigError);
    EXPECT_THROW(bad([](auto& c) { c.tau = 0; }).validate(), ConfigError);
    EXPECT_THROW(bad([](auto& c) { c.negatives = 0; }).validate(), ConfigError);
    EXPECT_THROW(bad([](auto& c) { c.stage2.lr = 0; }).validate(), ConfigError);
}

TEST(TrainConfig, FingerprintIsStableAndSensitive) {
    TrainConfig a, b;
    EXPECT_EQ(a.fingerprint(), b.fingerprint());
    b.alpha_e = 0.25;
    EXPECT_NE(a.fingerprint(), b.fingerprint());
}

TEST(TrainingVariant, ParsesAndPrints) {
    for (auto v : {TrainingVariant::full, TrainingVariant::no_inference_model, TrainingVariant::direct_kl}) {
        EXPECT_EQ(parse_training_variant(to_string(v)), v);
    }
    EXPECT_THROW(parse_training_variant("bogus"), std::invalid_argument);
}

namespace {

std::vector<TrainInstance> one_batch(const Fixture& fx) { return fx.batch; }

}  // namespace

TEST(Losses, IdenticalScoresGiveLogNPlusOne) {
    for (int n : {1, 4, 9}) {
        auto fx = random_fixture(3, 12, n, 4, 20 + static_cast<std::uint64_t>(n));
        fx.model.generative.store.at("W_v").value.setZero();  // every g is 0
        fx.model.inference.store.at("W_e").value.setZero();   // every e score is 0
        const double expect = std::log(n + 1.0);
        EXPECT_NEAR(loss_infonce(fx.batch, fx.model, fx.items, false), expect, 1e-12);
        EXPECT_NEAR(loss_m_rec(fx.batch, fx.model, fx.items, false), expect, 1e-12);
        EXPECT_NEAR(loss_e_rec(fx.batch, fx.model, fx.items, false), expect, 1e-12);
    }
}

TEST(Losses, InfoNCESaturates) {
    auto fx = random_fixture(1, 8, 5, 1, 31);
    auto& t = fx.batch[0];
    for (auto neg : t.negatives) fx.items.row(static_cast<Eigen::Index>(neg)).setZero();
    const Vector v = item_of(fx.items, t.target);
    const double g = o_g(fx.model, t.behavior, t.text, v)[0];
    ASSERT_NE(g, 0.0);
    fx.items.row(static_cast<Eigen::Index>(t.target)) *= 50.0 / g;
    EXPECT_NEAR(o_g(fx.model, t.behavior, t.text, item_of(fx.items, t.target))[0], 50.0, 1e-9);
    EXPECT_NEAR(loss_infonce(fx.batch, fx.model, fx.items, false), 0.0, 1e-8);
}

TEST(Losses, MRecDecreasesAsPositiveScoreGrows) {
    auto fx = random_fixture(1, 8, 5, 1, 32);
    auto& t = fx.batch[0];
    const Vector v = item_of(fx.items, t.target);
    const double sign = o_g(fx.model, t.behavior, t.text, v)[0] > 0 ? 1.0 : -1.0;
    double prev = INFINITY;
    for (double scale = 0.01; scale < 0.2; scale += 0.02) {
        fx.items.row(static_cast<Eigen::Index>(t.target)) = sign * scale * v.transpose();
        const double l = loss_m_rec(fx.batch, fx.model, fx.items, false);
        ASSERT_GT(l, 0.0);
        EXPECT_LT(l, prev);
        prev = l;
    }
}

TEST(KL, HandArithmetic) {
    nn::Vector q(2), p(2);
    q << 0.75, 0.25;
    p << 0.25, 0.75;
    EXPECT_NEAR(kl_divergence(q, p), 0.5 * std::log(3.0), 1e-15);
    EXPECT_NEAR(kl_divergence(q, p), 0.5493, 5e-5);
}

TEST(KL, NonNegativeOnRandomPairs) {
    std::mt19937_64 rng(1);
    for (int t = 0; t < 1000; ++t) {
        const int K = 1 + t % 10;
        const Vector q = nn::softmax(random_vector(K, rng, 4.0));
        const Vector p = nn::softmax(random_vector(K, rng, 4.0));
        EXPECT_GE(kl_divergence(q, p), -1e-12);
    }
}

TEST(Losses, WeightedTotalsAreLinear) {
    auto fx = random_fixture(4, 10, 5, 3, 33);
    const auto batch = one_batch(fx);
    const double nce = loss_infonce(batch, fx.model, fx.items, false);
    const double kl = loss_m_kl(batch, fx.model, fx.items, false);
    const double rec = loss_m_rec(batch, fx.model, fx.items, false);
    TrainConfig cfg;
    cfg.lambda = 0;
    cfg.alpha_m = 0;
    EXPECT_EQ(loss_m_total(batch, fx.model, fx.items, cfg, false).total, nce);
    cfg.lambda = 0.3;
    cfg.alpha_m = 0.7;
    EXPECT_NEAR(loss_m_total(batch, fx.model, fx.items, cfg, false).total, nce + 0.3 * kl + 0.7 * rec, 1e-12);

    const double elbo = loss_e_elbo(batch, fx.model, fx.items, false);
    const double erec = loss_e_rec(batch, fx.model, fx.items, false);
    cfg.alpha_e = 0;
    EXPECT_EQ(loss_e_total(batch, fx.model, fx.items, cfg, false).total, elbo);
    cfg.alpha_e = 0.4;
    EXPECT_NEAR(loss_e_total(batch, fx.model, fx.items, cfg, false).total, elbo + 0.4 * erec, 1e-12);
}

TEST(Losses, ElboVanishesForOneIntentOrMatchingPosterior) {
    auto fx = random_fixture(1, 10, 5, 3, 34);
    EXPECT_NEAR(loss_e_elbo(fx.batch, fx.model, fx.items, false), 0.0, 1e-15);
    // With W_v = 0 the posterior equals the prior; with identical centroids
    // both q and f are uniform.
    auto fy = random_fixture(3, 10, 5, 3, 35);
    for (int j = 1; j < 3; ++j) fy.model.intents.centroids.row(j) = fy.model.intents.centroids.row(0);
    EXPECT_NEAR(loss_e_elbo(fy.batch, fy.model, fy.items, false), 0.0, 1e-12);
    EXPECT_NEAR(loss_m_kl(fy.batch, fy.model, fy.items, false), 0.0, 1e-12);
}

TEST(Losses, ERecSymmetricWhenCentroidsCoincide) {
    auto fx = random_fixture(3, 10, 4, 1, 36);
    for (int j = 1; j < 3; ++j) fx.model.intents.centroids.row(j) = fx.model.intents.centroids.row(0);
    for (const auto& t : fx.batch)
        for (auto n : t.negatives) fx.items.row(static_cast<Eigen::Index>(n)) = fx.items.row(static_cast<Eigen::Index>(t.target));
    EXPECT_NEAR(loss_e_rec(fx.batch, fx.model, fx.items, false), std::log(5.0), 1e-12);
}

TEST(Negatives, ForcedChoice) {
    std::mt19937_64 rng(3);
    const std::vector<std::size_t> hist{0};
    auto neg = sample_negatives(0, hist, 3, 2, rng);
    std::sort(neg.begin(), neg.end());
    EXPECT_EQ(neg, (std::vector<std::size_t>{1, 2}));
}

TEST(Negatives, SameSeedSameSet) {
    const std::vector<std::size_t> hist{3, 8};
    std::mt19937_64 a(negative_seed(7, 2, 5, 1)), b(negative_seed(7, 2, 5, 1));
    EXPECT_EQ(sample_negatives(5, hist, 40, 10, a), sample_negatives(5, hist, 40, 10, b));
}

TEST(Negatives, UniformWithinThreeSigma) {
    std::mt19937_64 rng(4);
    const std::size_t V = 100, n = 10, draws = 10000;
    std::vector<int> counts(V, 0);
    const std::vector<std::size_t> hist{};
    for (std::size_t d = 0; d < draws; ++d)
        for (auto i : sample_negatives(0, hist, V, n, rng)) ++counts[i];
    const double p = static_cast<double>(n) / static_cast<double>(V - 1);
    const double mean = static_cast<double>(draws) * p;
    const double sd = std::sqrt(static_cast<double>(draws) * p * (1 - p));
    int outside = 0;
    double chi2 = 0;
    for (std::size_t i = 1; i < V; ++i) {
        outside += std::abs(counts[i] - mean) > 3 * sd;
        chi2 += (counts[i] - mean) * (counts[i] - mean) / mean;
    }
    EXPECT_LE(outside, 2);  // ~0.27% expected of 99 cells
    EXPECT_LT(chi2, 99 + 4 * std::sqrt(2.0 * 98));
}

namespace {

struct TinyTraining {
    TrainingData data;
    LatentModel model;
    TrainConfig cfg;
};

TinyTraining tiny_training(int epochs) {
    TinyTraining t;
    t.cfg.num_intents = 3;
    t.cfg.negatives = 5;
    t.cfg.batch_size = 16;
    t.cfg.augment_factor = 1;
    t.cfg.dims = small_dims(6, 5);
    t.cfg.stage1 = {epochs, 0.01};
    t.cfg.stage2 = {epochs, 0.01};
    t.cfg.stage3 = {epochs, 0.01};
    t.cfg.eval_k = 5;
    t.cfg.seed = 3;
    auto env = random_fixture(3, 20, 5, 40, 9, t.cfg.dims);
    for (std::size_t i = 0; i < env.batch.size(); ++i) {
        env.batch[i].user = i % 10;
        env.batch[i].context = {env.batch[i].negatives[0]};
        env.batch[i].negatives.clear();
    }
    t.data.train.assign(env.batch.begin(), env.batch.begin() + 30);
    t.data.valid.assign(env.batch.begin() + 30, env.batch.end());
    for (std::size_t u = 0; u < 10; ++u) t.data.users.push_back("u" + std::to_string(u));
    t.data.user_history.assign(10, {});
    t.data.item_table = env.items;
    t.data.population_behavior = Vector::Zero(6);
    t.model = env.model;
    return t;
}

}  // namespace

TEST(RunTraining, ZeroEpochsReturnsInitialModel) {
    for (auto variant : {TrainingVariant::full, TrainingVariant::direct_kl, TrainingVariant::no_inference_model}) {
        auto t = tiny_training(0);
        t.cfg.variant = variant;
        const auto r = run_training(t.data, t.model, t.cfg);
        EXPECT_TRUE(r.history.empty());
        EXPECT_EQ(r.model.inference.store.fingerprint(), t.model.inference.store.fingerprint());
        EXPECT_EQ(r.model.generative.store.fingerprint(), t.model.generative.store.fingerprint());
    }
}

TEST(RunTraining, DeterministicHistoryAndDisciplinedSteps) {
    for (auto variant : {TrainingVariant::full, TrainingVariant::direct_kl, TrainingVariant::no_inference_model}) {
        auto t = tiny_training(2);
        t.cfg.variant = variant;
        const auto a = run_training(t.data, t.model, t.cfg);
        const auto b = run_training(t.data, t.model, t.cfg);
        ASSERT_FALSE(a.history.empty());
        EXPECT_EQ(history_jsonl(a.history), history_jsonl(b.history));
        EXPECT_EQ(a.model.generative.store.fingerprint(), b.model.generative.store.fingerprint());
        for (const auto& au : a.audits) {
            if (au.step == "E") EXPECT_EQ(au.generative_before, au.generative_after);
            if (au.step == "M") EXPECT_EQ(au.inference_before, au.inference_after);
        }
        for (const auto& h : a.history) {
            EXPECT_TRUE(std::isfinite(h.loss.total));
            EXPECT_GE(h.valid_recall, 0.0);
            EXPECT_LE(h.valid_recall, 1.0);
        }
    }
}

TEST(RunTraining, FullScheduleVisitsEveryStage) {
    auto t = tiny_training(2);
    t.cfg.patience = 0;
    const auto r = run_training(t.data, t.model, t.cfg);
    std::set<std::pair<int, std::string>> seen;
    for (const auto& h : r.history) seen.insert({h.stage, h.step});
    EXPECT_TRUE(seen.count({1, "E"}));
    EXPECT_TRUE(seen.count({2, "M"}));
    EXPECT_TRUE(seen.count({3, "E"}));
    EXPECT_TRUE(seen.count({3, "M"}));
    const auto jsonl = history_jsonl(r.history);
    EXPECT_EQ(static_cast<std::size_t>(std::count(jsonl.begin(), jsonl.end(), '\n')), r.history.size());
}

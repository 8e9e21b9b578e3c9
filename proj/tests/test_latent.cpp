#include "support.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

using namespace crs;
using namespace crs::testing;

namespace {

struct Inputs {
    Vector S, x;
    Matrix items;
};

Inputs inputs(const LatentDims& d, int V, std::uint64_t seed) {
    std::mt19937_64 rng(seed + 1000);
    return {random_vector(d.behavior, rng), random_vector(d.text, rng), random_matrix(V, d.item, rng)};
}

void expect_distribution(const Vector& p) {
    EXPECT_NEAR(p.sum(), 1.0, 1e-9);
    EXPECT_GT(p.minCoeff(), 0.0);
}

std::vector<std::size_t> all_of(int V) {
    std::vector<std::size_t> c(static_cast<std::size_t>(V));
    std::iota(c.begin(), c.end(), 0);
    return c;
}

}  // namespace

TEST(InferQ, ZeroWeightsGiveUniform) {
    const auto d = small_dims();
    auto m = random_model(d, 5, 1);
    m.inference.store.at("W_k").value.setZero();
    const auto in = inputs(d, 3, 1);
    const Vector q = infer_q(in.S, m);
    for (int j = 0; j < 5; ++j) EXPECT_NEAR(q[j], 0.2, 1e-15);
    auto m2 = random_model(d, 5, 2);
    m2.inference.store.at("W_q").value.setZero();
    EXPECT_NEAR(infer_q(in.S, m2).maxCoeff(), 0.2, 1e-15);
}

TEST(InferQ, SingleIntentIsCertain) {
    const auto d = small_dims();
    const auto m = random_model(d, 1, 3);
    const Vector q = infer_q(inputs(d, 2, 3).S, m);
    ASSERT_EQ(q.size(), 1);
    EXPECT_EQ(q[0], 1.0);
}

TEST(Oracle, AllQuantitiesAgree) {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        for (bool trainable : {false, true}) {
            const auto d = small_dims(5 + static_cast<int>(seed % 3), 4);
            auto m = random_model(d, 2 + static_cast<int>(seed % 4), seed, 0.5, trainable);
            m.tau = 0.5 + 0.1 * static_cast<double>(seed);
            const auto in = inputs(d, 5, seed);
            const auto q = o_q(m, in.S);
            const auto f = o_f(m, in.S, in.x);
            const Vector iq = infer_q(in.S, m), pf = prior_f(in.S, in.x, m);
            for (std::size_t j = 0; j < q.size(); ++j) {
                EXPECT_NEAR(iq[static_cast<Eigen::Index>(j)], q[j], 1e-10);
                EXPECT_NEAR(pf[static_cast<Eigen::Index>(j)], f[j], 1e-10);
            }
            for (int v = 0; v < 5; ++v) {
                const Vector item = in.items.row(v).transpose();
                const auto g = o_g(m, in.S, in.x, item);
                for (int j = 0; j < m.num_intents(); ++j)
                    EXPECT_NEAR(ratio_g(item, j, in.S, in.x, m), g[static_cast<std::size_t>(j)], 1e-10);
                EXPECT_NEAR(mixture_h(item, in.S, in.x, m), o_h(m, in.S, in.x, item), 1e-10);
                const auto post = o_posterior(m, in.S, in.x, item);
                const Vector p = posterior(item, in.S, in.x, m);
                for (std::size_t j = 0; j < post.size(); ++j)
                    EXPECT_NEAR(p[static_cast<Eigen::Index>(j)], post[j], 1e-10);
                const auto a = o_a(m, item);
                const Vector ia = item_affinity(item, m, project_intents(m));
                for (std::size_t j = 0; j < a.size(); ++j) EXPECT_NEAR(ia[static_cast<Eigen::Index>(j)], a[j], 1e-10);
            }
        }
    }
}

TEST(PriorF, ZeroContextGivesUniform) {
    const auto d = small_dims();
    auto m = random_model(d, 4, 4);
    const std::string last = "ctx.W" + std::to_string(d.hidden.size());
    m.generative.store.at(last).value.setZero();
    m.generative.store.at("ctx.b" + std::to_string(d.hidden.size())).value.setZero();
    const auto in = inputs(d, 1, 4);
    const Vector f = prior_f(in.S, in.x, m);
    for (int j = 0; j < 4; ++j) EXPECT_NEAR(f[j], 0.25, 1e-15);
}

TEST(PriorF, DuplicatedCentroidsShareProbability) {
    const auto d = small_dims();
    auto m = random_model(d, 4, 5);
    m.intents.centroids.row(2) = m.intents.centroids.row(1);
    const auto in = inputs(d, 1, 5);
    const Vector f = prior_f(in.S, in.x, m);
    EXPECT_EQ(f[1], f[2]);
    EXPECT_EQ(infer_q(in.S, m)[1], infer_q(in.S, m)[2]);
}

TEST(RatioG, ZeroItemProjectionAndBilinearity) {
    const auto d = small_dims();
    auto m = random_model(d, 3, 6);
    const auto in = inputs(d, 2, 6);
    const Vector v = in.items.row(0).transpose();
    for (int j = 0; j < 3; ++j) {
        EXPECT_NEAR(ratio_g(2.0 * v, j, in.S, in.x, m), 2.0 * ratio_g(v, j, in.S, in.x, m), 1e-12);
        const Vector w = in.items.row(1).transpose();
        EXPECT_NEAR(ratio_g(v + w, j, in.S, in.x, m),
                    ratio_g(v, j, in.S, in.x, m) + ratio_g(w, j, in.S, in.x, m), 1e-12);
    }
    m.generative.store.at("W_v").value.setZero();
    for (int j = 0; j < 3; ++j) EXPECT_EQ(ratio_g(v, j, in.S, in.x, m), 0.0);
}

TEST(MixtureH, SingleIntentAndConstantG) {
    const auto d = small_dims();
    const auto m1 = random_model(d, 1, 7);
    const auto in = inputs(d, 1, 7);
    const Vector v = in.items.row(0).transpose();
    EXPECT_NEAR(mixture_h(v, in.S, in.x, m1), ratio_g(v, 0, in.S, in.x, m1), 1e-15);

    // Identical centroids make every g_j the same value.
    auto m = random_model(d, 4, 8);
    for (int j = 1; j < 4; ++j) m.intents.centroids.row(j) = m.intents.centroids.row(0);
    const double g0 = ratio_g(v, 0, in.S, in.x, m);
    EXPECT_NEAR(mixture_h(v, in.S, in.x, m), g0, 1e-12);
    const Vector post = posterior(v, in.S, in.x, m);
    const Vector f = prior_f(in.S, in.x, m);
    EXPECT_LT((post - f).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Posterior, ConstantGEqualsPrior) {
    std::mt19937_64 rng(9);
    for (int t = 0; t < 100; ++t) {
        const int K = 1 + t % 6;
        const Vector f = nn::softmax(random_vector(K, rng, 3.0));
        const Vector g = Vector::Constant(K, random_vector(1, rng, 10.0)[0]);
        const Vector p = posterior_from(f.array().log().matrix(), g, 1.7);
        EXPECT_LT((p - f).cwiseAbs().maxCoeff(), 1e-12);
        expect_distribution(p);
    }
    const Vector one = posterior_from(Vector::Zero(1), Vector::Constant(1, 3.0), 1.0);
    EXPECT_EQ(one[0], 1.0);
}

TEST(Distributions, AlwaysValid) {
    for (std::uint64_t seed = 1; seed <= 30; ++seed) {
        const auto d = small_dims();
        const auto m = random_model(d, 1 + static_cast<int>(seed % 7), seed, 1.0);
        const auto in = inputs(d, 3, seed);
        expect_distribution(infer_q(in.S, m));
        expect_distribution(prior_f(in.S, in.x, m));
        for (int v = 0; v < 3; ++v) expect_distribution(posterior(in.items.row(v).transpose(), in.S, in.x, m));
    }
}

TEST(Shapes, MismatchThrows) {
    const auto d = small_dims();
    const auto m = random_model(d, 3, 1);
    EXPECT_THROW(infer_q(Vector::Zero(d.behavior + 1), m), std::invalid_argument);
    EXPECT_THROW(prior_f(Vector::Zero(d.behavior), Vector::Zero(d.text + 2), m), std::invalid_argument);
}

TEST(Rank, BruteForceOracle) {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const auto d = small_dims();
        const auto m = random_model(d, 3, seed);
        const auto in = inputs(d, 5, seed);
        const auto cands = all_of(5);
        for (auto mode : {RankMode::full, RankMode::cond_indep}) {
            std::vector<std::pair<double, std::size_t>> ref;
            for (std::size_t v = 0; v < 5; ++v) {
                const Vector item = in.items.row(static_cast<Eigen::Index>(v)).transpose();
                double s = 0;
                if (mode == RankMode::full) {
                    s = o_h(m, in.S, in.x, item);
                } else {
                    const auto f = o_f(m, in.S, in.x);
                    const auto a = o_a(m, item);
                    for (std::size_t j = 0; j < f.size(); ++j) s += f[j] * a[j];
                }
                ref.emplace_back(-s, v);
            }
            std::sort(ref.begin(), ref.end());
            const auto got = rank_items(in.S, in.x, in.items, cands, mode, 5, m);
            ASSERT_EQ(got.size(), 5u);
            for (std::size_t r = 0; r < 5; ++r) {
                EXPECT_EQ(got[r].index, ref[r].second);
                EXPECT_NEAR(got[r].score, -ref[r].first, 1e-10);
            }
        }
    }
}

TEST(Rank, SingleIntentModesAgreeWhenLogitPositive) {
    const auto d = small_dims();
    int checked = 0;
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        const auto m = random_model(d, 1, seed);
        const auto in = inputs(d, 8, seed);
        const auto gen = generative_context(in.S, in.x, m, project_intents(m));
        if (gen.b[0] <= 0) continue;
        ++checked;
        const auto cands = all_of(8);
        const auto a = rank_items(in.S, in.x, in.items, cands, RankMode::full, 8, m);
        const auto b = rank_items(in.S, in.x, in.items, cands, RankMode::cond_indep, 8, m);
        for (std::size_t r = 0; r < 8; ++r) EXPECT_EQ(a[r].index, b[r].index);
    }
    EXPECT_GT(checked, 0);
}

TEST(Rank, HigherAffinityFirstWithOneIntent) {
    const auto d = small_dims();
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const auto m = random_model(d, 1, seed);
        const auto in = inputs(d, 2, seed);
        const auto proj = project_intents(m);
        const double a0 = item_affinity(in.items.row(0).transpose(), m, proj)[0];
        const double a1 = item_affinity(in.items.row(1).transpose(), m, proj)[0];
        const std::size_t better = a0 > a1 ? 0 : 1;
        const auto cands = all_of(2);
        EXPECT_EQ(rank_items(in.S, in.x, in.items, cands, RankMode::cond_indep, 2, m)[0].index, better);
    }
}

TEST(Rank, PermutationInvariantWithCanonicalTies) {
    const auto d = small_dims();
    const auto m = random_model(d, 3, 11);
    auto in = inputs(d, 12, 11);
    in.items.row(7) = in.items.row(2);  // exact tie
    in.items.row(9) = in.items.row(2);
    auto cands = all_of(12);
    const auto ref = rank_items(in.S, in.x, in.items, cands, RankMode::full, 12, m);
    std::mt19937_64 rng(1);
    for (int t = 0; t < 20; ++t) {
        std::shuffle(cands.begin(), cands.end(), rng);
        const auto got = rank_items(in.S, in.x, in.items, cands, RankMode::full, 12, m);
        for (std::size_t r = 0; r < ref.size(); ++r) EXPECT_EQ(got[r].index, ref[r].index);
    }
    std::vector<std::size_t> tied;
    for (const auto& s : ref)
        if (s.index == 2 || s.index == 7 || s.index == 9) tied.push_back(s.index);
    EXPECT_EQ(tied, (std::vector<std::size_t>{2, 7, 9}));
    EXPECT_EQ(rank_items(in.S, in.x, in.items, cands, RankMode::full, 3, m).size(), 3u);
    EXPECT_THROW(rank_items(in.S, in.x, in.items, std::vector<std::size_t>{}, RankMode::full, 3, m),
                 std::invalid_argument);
}

TEST(Rank, ModeParsing) {
    EXPECT_EQ(parse_rank_mode("full"), RankMode::full);
    EXPECT_EQ(parse_rank_mode("cond_indep"), RankMode::cond_indep);
    EXPECT_THROW(parse_rank_mode("other"), std::invalid_argument);
}

TEST(Create, TrainableIntentsLiveInGenerativeStore) {
    const auto d = small_dims();
    std::mt19937_64 rng(1);
    const IntentSpace s{random_matrix(3, d.behavior, rng)};
    const auto frozen = LatentModel::create(d, s, 1, false);
    const auto live = LatentModel::create(d, s, 1, true);
    EXPECT_FALSE(frozen.generative.store.contains("intents"));
    ASSERT_TRUE(live.generative.store.contains("intents"));
    EXPECT_EQ(live.generative.store.at("intents").value, s.centroids);
    EXPECT_EQ(&live.intent_matrix(), &live.generative.store.at("intents").value);
    EXPECT_TRUE(frozen.inference.store.all_finite());
}

TEST(Bundle, SaveLoadPreservesScores) {
    EncoderConfig ec;
    ec.item_dim = 6;
    ec.user_dim = 6;
    ec.hidden = {6};
    std::vector<ItemId> ids{"a", "b", "c", "d"};
    ModelBundle b;
    b.encoder = BehaviorEncoder(ids, ec);
    auto d = small_dims(6, 5);
    b.latent = random_model(d, 3, 4, 0.5, true);
    b.latent.tau = 0.6;
    b.population_behavior = Vector::Constant(6, 0.25);
    b.text_provider = "local-hash3-v1/5";
    b.config_fingerprint = "k=3";
    const auto path = (temp_dir("bundle") / "m.ckpt").string();
    b.save(path);
    const auto back = ModelBundle::load(path);
    EXPECT_EQ(back.fingerprint(), b.fingerprint());
    EXPECT_EQ(back.latent.tau, 0.6);
    EXPECT_EQ(back.population_behavior, b.population_behavior);
    EXPECT_EQ(back.text_provider, b.text_provider);
    const auto in = inputs(d, 4, 4);
    const auto cands = all_of(4);
    const auto r1 = rank_items(in.S, in.x, in.items, cands, RankMode::full, 4, b.latent);
    const auto r2 = rank_items(in.S, in.x, in.items, cands, RankMode::full, 4, back.latent);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(r1[i].score, r2[i].score);
    auto other = b;
    other.config_fingerprint = "k=4";
    EXPECT_NE(other.fingerprint(), b.fingerprint());
}

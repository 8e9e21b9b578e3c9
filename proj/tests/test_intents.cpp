#include "support.hpp"

#include "crs/intents.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace crs;
using namespace crs::testing;

namespace {

struct Blobs {
    Matrix points;
    std::vector<int> label;
    Matrix centers;
};

Blobs two_blobs(std::uint64_t seed, int per = 100) {
    std::mt19937_64 rng(seed);
    Blobs b;
    b.centers = Matrix::Zero(2, 3);
    b.centers(1, 0) = 10.0;
    b.points = Matrix(2 * per, 3);
    for (int i = 0; i < 2 * per; ++i) {
        const int l = i % 2;
        b.points.row(i) = b.centers.row(l) + random_vector(3, rng, 0.01).transpose();
        b.label.push_back(l);
    }
    return b;
}

double inertia(const Matrix& pts, const Matrix& c) {
    double s = 0;
    for (Eigen::Index i = 0; i < pts.rows(); ++i) {
        double best = INFINITY;
        for (Eigen::Index j = 0; j < c.rows(); ++j) best = std::min(best, (pts.row(i) - c.row(j)).squaredNorm());
        s += best;
    }
    return s;
}

}  // namespace

TEST(KMeans, KEqualsNRecoversThePoints) {
    std::mt19937_64 rng(1);
    const Matrix pts = random_matrix(6, 4, rng);
    const auto r = fit_kmeans(pts, 6, 3);
    EXPECT_NEAR(r.final_inertia, 0.0, 1e-20);
    for (int i = 0; i < 6; ++i) {
        double best = INFINITY;
        for (int j = 0; j < 6; ++j) best = std::min(best, (pts.row(i) - r.space.centroids.row(j)).norm());
        EXPECT_LT(best, 1e-12);
    }
}

TEST(KMeans, SingleClusterIsTheMean) {
    std::mt19937_64 rng(2);
    const Matrix pts = random_matrix(40, 5, rng);
    const auto r = fit_kmeans(pts, 1, 0);
    EXPECT_LT((r.space.centroids.row(0) - pts.colwise().mean()).norm(), 1e-12);
}

TEST(KMeans, WellSeparatedBlobs) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const auto b = two_blobs(seed);
        const auto r = fit_kmeans(b.points, 2, seed);
        for (int l = 0; l < 2; ++l) {
            double best = INFINITY;
            for (int j = 0; j < 2; ++j) best = std::min(best, (b.centers.row(l) - r.space.centroids.row(j)).norm());
            EXPECT_LT(best, 0.1);
        }
        // ≥ 99% of points go to their blob's centroid.
        const int c0 = assign(b.centers.row(0).transpose(), r.space);
        int hits = 0;
        for (Eigen::Index i = 0; i < b.points.rows(); ++i) {
            const int a = assign(b.points.row(i).transpose(), r.space);
            hits += (a == c0) == (b.label[static_cast<std::size_t>(i)] == 0);
        }
        EXPECT_GE(hits, static_cast<int>(0.99 * static_cast<double>(b.points.rows())));
    }
}

TEST(Assign, NearestAndTies) {
    Matrix c(3, 2);
    c << 0, 0, 2, 0, 5, 5;
    const IntentSpace s{c};
    EXPECT_EQ(assign(c.row(2).transpose(), s), 2);
    Vector mid(2);
    mid << 1, 0;
    EXPECT_EQ(assign(mid, s), 0);
    EXPECT_THROW(assign(Vector::Zero(3), s), nn::ShapeError);
}

TEST(KMeans, InertiaNeverIncreases) {
    std::mt19937_64 rng(7);
    const Matrix pts = random_matrix(300, 4, rng);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto r = fit_kmeans(pts, 8, seed);
        ASSERT_FALSE(r.inertia_history.empty());
        for (std::size_t i = 1; i < r.inertia_history.size(); ++i)
            EXPECT_LE(r.inertia_history[i], r.inertia_history[i - 1] + 1e-9);
        EXPECT_NEAR(r.final_inertia, inertia(pts, r.space.centroids), 1e-9 * r.final_inertia);
    }
}

TEST(KMeans, DeterministicAndNoEmptyClusters) {
    std::mt19937_64 rng(8);
    Matrix pts = random_matrix(50, 3, rng);
    // A far outlier plus heavy duplication invites empty clusters.
    for (int i = 0; i < 40; ++i) pts.row(i) = pts.row(0);
    pts.row(49) *= 100.0;
    for (int k : {2, 5, 10}) {
        const auto a = fit_kmeans(pts, k, 4);
        const auto b = fit_kmeans(pts, k, 4);
        EXPECT_EQ(a.space.centroids, b.space.centroids);
        EXPECT_EQ(a.assignments, b.assignments);
        EXPECT_EQ(std::set<int>(a.assignments.begin(), a.assignments.end()).size(), static_cast<std::size_t>(k));
        EXPECT_TRUE(a.space.centroids.allFinite());
    }
}

TEST(KMeans, RestartsNeverWorsenInertia) {
    std::mt19937_64 rng(9);
    const Matrix pts = random_matrix(200, 3, rng);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto one = fit_kmeans(pts, 6, seed, 200, 1e-6, 1);
        const auto many = fit_kmeans(pts, 6, seed, 200, 1e-6, 8);
        EXPECT_LE(many.final_inertia, one.final_inertia + 1e-12);
    }
}

TEST(KMeans, RejectsBadArguments) {
    Matrix pts(4, 2);
    pts << 0, 0, 0, 0, 1, 1, 1, 1;
    EXPECT_THROW(fit_kmeans(pts, 3, 0), ConfigError);  // only 2 distinct points
    EXPECT_NO_THROW(fit_kmeans(pts, 2, 0));
    EXPECT_THROW(fit_kmeans(pts, 0, 0), ConfigError);
    EXPECT_THROW(fit_kmeans(pts, 1, 0, 0), ConfigError);
    EXPECT_THROW(fit_kmeans(pts, 1, 0, 10, 1e-6, 0), ConfigError);
}

TEST(IntentSpace, SaveLoad) {
    std::mt19937_64 rng(10);
    const IntentSpace s{random_matrix(4, 6, rng)};
    const auto path = (temp_dir("intents") / "m.bin").string();
    s.save(path);
    EXPECT_EQ(IntentSpace::load(path).centroids, s.centroids);
}

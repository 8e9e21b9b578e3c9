#include "crs/intents.hpp"

#include "crs/binary_io.hpp"

#include <algorithm>
#include <limits>
#include <random>
#include <set>

namespace crs {

namespace {

constexpr std::string_view kIntentMagic = "CRSI";
constexpr std::uint32_t kIntentVersion = 1;

std::size_t count_distinct(const nn::Matrix& points) {
    std::set<std::vector<double>> seen;
    for (Eigen::Index i = 0; i < points.rows(); ++i) {
        std::vector<double> row(static_cast<std::size_t>(points.cols()));
        for (Eigen::Index c = 0; c < points.cols(); ++c) row[static_cast<std::size_t>(c)] = points(i, c);
        seen.insert(std::move(row));
    }
    return seen.size();
}

}  // namespace

void IntentSpace::save(const std::string& path) const {
    io::BinaryWriter w(path, kIntentMagic, kIntentVersion);
    w.matrix(centroids);
    w.close();
}

IntentSpace IntentSpace::load(const std::string& path) {
    io::BinaryReader r(path, kIntentMagic, kIntentVersion);
    return {r.matrix()};
}

int assign(const nn::Vector& embedding, const IntentSpace& space) {
    if (embedding.size() != space.dim()) {
        throw nn::ShapeError("embedding dim " + std::to_string(embedding.size()) +
                             " does not match intent dim " + std::to_string(space.dim()));
    }
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int j = 0; j < space.count(); ++j) {
        const double d = (space.centroids.row(j).transpose() - embedding).squaredNorm();
        if (d < best_d) {
            best_d = d;
            best = j;
        }
    }
    return best;
}

namespace {

KMeansResult fit_once(const nn::Matrix& points, int k, std::uint64_t seed, int max_iters, double tol) {
    const auto n = static_cast<std::size_t>(points.rows());
    std::mt19937_64 rng(seed);

    // k-means++ seeding
    nn::Matrix centroids(k, points.cols());
    std::uniform_int_distribution<std::size_t> first(0, n - 1);
    centroids.row(0) = points.row(static_cast<Eigen::Index>(first(rng)));
    std::vector<double> d2(n);
    for (int c = 1; c < k; ++c) {
        for (std::size_t i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::infinity();
            for (int j = 0; j < c; ++j) {
                best = std::min(best, (points.row(static_cast<Eigen::Index>(i)) - centroids.row(j)).squaredNorm());
            }
            d2[i] = best;
        }
        std::discrete_distribution<std::size_t> pick(d2.begin(), d2.end());
        centroids.row(c) = points.row(static_cast<Eigen::Index>(pick(rng)));
    }

    KMeansResult result;
    result.assignments.assign(n, 0);
    std::vector<double> dist(n);
    IntentSpace space{centroids};
    for (int iter = 0; iter < max_iters; ++iter) {
        double inertia = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const nn::Vector p = points.row(static_cast<Eigen::Index>(i)).transpose();
            result.assignments[i] = assign(p, space);
            dist[i] = (space.centroids.row(result.assignments[i]).transpose() - p).squaredNorm();
            inertia += dist[i];
        }
        result.inertia_history.push_back(inertia);

        std::vector<std::size_t> sizes(static_cast<std::size_t>(k), 0);
        for (int a : result.assignments) ++sizes[static_cast<std::size_t>(a)];
        for (int j = 0; j < k; ++j) {
            if (sizes[static_cast<std::size_t>(j)] != 0) continue;
            // Reseed with the point farthest from its centroid, taken from a
            // cluster that keeps at least one member.
            std::size_t far = n;
            for (std::size_t i = 0; i < n; ++i) {
                if (sizes[static_cast<std::size_t>(result.assignments[i])] < 2) continue;
                if (far == n || dist[i] > dist[far]) far = i;
            }
            if (far == n) break;
            --sizes[static_cast<std::size_t>(result.assignments[far])];
            result.assignments[far] = j;
            sizes[static_cast<std::size_t>(j)] = 1;
            dist[far] = 0.0;
        }

        nn::Matrix next = nn::Matrix::Zero(k, points.cols());
        for (std::size_t i = 0; i < n; ++i) {
            next.row(result.assignments[i]) += points.row(static_cast<Eigen::Index>(i));
        }
        double shift = 0.0;
        for (int j = 0; j < k; ++j) {
            if (sizes[static_cast<std::size_t>(j)] == 0) {
                next.row(j) = space.centroids.row(j);
                continue;
            }
            next.row(j) /= static_cast<double>(sizes[static_cast<std::size_t>(j)]);
            shift = std::max(shift, (next.row(j) - space.centroids.row(j)).norm());
        }
        space.centroids = std::move(next);
        result.iterations = iter + 1;
        if (shift < tol) break;
    }
    // Final assignment against the converged centroids.
    for (std::size_t i = 0; i < n; ++i) {
        result.assignments[i] = assign(points.row(static_cast<Eigen::Index>(i)).transpose(), space);
    }
    result.final_inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        result.final_inertia +=
            (space.centroids.row(result.assignments[i]) - points.row(static_cast<Eigen::Index>(i))).squaredNorm();
    }
    result.space = std::move(space);
    return result;
}

}  // namespace

KMeansResult fit_kmeans(const nn::Matrix& points, int k, std::uint64_t seed, int max_iters, double tol,
                        int restarts) {
    if (k < 1) throw ConfigError("K must be >= 1");
    if (max_iters < 1) throw ConfigError("max_iters must be >= 1");
    if (restarts < 1) throw ConfigError("restarts must be >= 1");
    if (static_cast<std::size_t>(k) > count_distinct(points)) {
        throw ConfigError("K=" + std::to_string(k) + " exceeds the number of distinct points");
    }
    KMeansResult best = fit_once(points, k, seed, max_iters, tol);
    for (int r = 1; r < restarts; ++r) {
        auto next = fit_once(points, k, seed ^ (0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(r)), max_iters, tol);
        if (next.final_inertia < best.final_inertia) best = std::move(next);
    }
    return best;
}

}  // namespace crs

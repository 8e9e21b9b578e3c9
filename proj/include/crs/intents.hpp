#pragma once

#include "crs/neural.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace crs {

/// K centroids in behaviour-embedding space; row j is intent j.
struct IntentSpace {
    nn::Matrix centroids;

    int count() const { return static_cast<int>(centroids.rows()); }
    int dim() const { return static_cast<int>(centroids.cols()); }

    void save(const std::string& path) const;
    static IntentSpace load(const std::string& path);
};

class ConfigError : public std::invalid_argument {
public:
    explicit ConfigError(const std::string& what) : std::invalid_argument(what) {}
};

struct KMeansResult {
    IntentSpace space;
    std::vector<int> assignments;
    /// Inertia after every assignment step.
    std::vector<double> inertia_history;
    int iterations = 0;
    double final_inertia = 0.0;
};

/// k-means++ seeding followed by Lloyd iterations until the largest centroid
/// shift drops below `tol` or `max_iters` is reached. A cluster that empties
/// is reseeded with the point farthest from its current centroid.
/// `points` holds one embedding per row. With `restarts` > 1 the whole
/// procedure is repeated from differently seeded initialisations and the
/// run with the lowest final inertia is kept.
KMeansResult fit_kmeans(const nn::Matrix& points, int k, std::uint64_t seed, int max_iters = 200,
                        double tol = 1e-6, int restarts = 1);

/// Nearest centroid by Euclidean distance; ties go to the lowest index.
int assign(const nn::Vector& embedding, const IntentSpace& space);

}  // namespace crs

#pragma once

// Shared fixtures and straight-line reference implementations used as
// oracles. The oracles read raw parameter matrices and recompute every
// quantity with explicit loops; they share no code with the library's
// scoring paths.

#include "crs/em_trainer.hpp"
#include "crs/latent_model.hpp"

#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace crs::testing {

using nn::Matrix;
using nn::Vector;

inline Matrix random_matrix(int r, int c, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> n(0.0, scale);
    Matrix m(r, c);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) m(i, j) = n(rng);
    return m;
}

inline Vector random_vector(int n, std::mt19937_64& rng, double scale = 1.0) {
    return random_matrix(n, 1, rng, scale).col(0);
}

inline LatentDims small_dims(int d = 6, int text = 5) {
    LatentDims dims;
    dims.behavior = d;
    dims.text = text;
    dims.item = d;
    dims.attention = d;
    dims.proj = d;
    dims.context = d;
    dims.bilinear = d;
    dims.hidden = {d};
    dims.activation = nn::Activation::tanh;
    return dims;
}

/// Model with every parameter redrawn from N(0, scale^2) so that no term is
/// degenerate.
inline LatentModel random_model(const LatentDims& dims, int K, std::uint64_t seed,
                                double scale = 0.5, bool trainable = false) {
    std::mt19937_64 rng(seed);
    IntentSpace space{random_matrix(K, dims.behavior, rng)};
    auto m = LatentModel::create(dims, space, seed + 1, trainable);
    for (auto* store : {&m.inference.store, &m.generative.store}) {
        for (std::size_t i = 0; i < store->size(); ++i) {
            auto& p = (*store)[i].value;
            p = random_matrix(static_cast<int>(p.rows()), static_cast<int>(p.cols()), rng, scale);
        }
    }
    return m;
}

struct Fixture {
    LatentModel model;
    Matrix items;
    std::vector<TrainInstance> batch;
};

inline Fixture random_fixture(int K, int V, int negatives, int batch, std::uint64_t seed,
                              const LatentDims& dims = small_dims(), bool trainable = false) {
    std::mt19937_64 rng(seed * 7919 + 3);
    Fixture f{random_model(dims, K, seed, 0.5, trainable), random_matrix(V, dims.item, rng), {}};
    for (int b = 0; b < batch; ++b) {
        TrainInstance inst;
        inst.user = static_cast<std::size_t>(b);
        inst.behavior = random_vector(dims.behavior, rng);
        inst.text = random_vector(dims.text, rng);
        std::vector<std::size_t> perm(static_cast<std::size_t>(V));
        for (int i = 0; i < V; ++i) perm[static_cast<std::size_t>(i)] = static_cast<std::size_t>(i);
        std::shuffle(perm.begin(), perm.end(), rng);
        inst.target = perm[0];
        inst.negatives.assign(perm.begin() + 1, perm.begin() + 1 + negatives);
        f.batch.push_back(std::move(inst));
    }
    return f;
}

// ---- oracles ---------------------------------------------------------------

inline double o_lse(const std::vector<double>& v) {
    double m = -INFINITY;
    for (double x : v) m = std::max(m, x);
    double s = 0.0;
    for (double x : v) s += std::exp(x - m);
    return m + std::log(s);
}

inline std::vector<double> o_softmax(const std::vector<double>& z) {
    const double l = o_lse(z);
    std::vector<double> p;
    for (double x : z) p.push_back(std::exp(x - l));
    return p;
}

inline double o_dot(const Vector& a, const Vector& b) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline Vector o_matvec(const Matrix& W, const Vector& x) {
    Vector y = Vector::Zero(W.rows());
    for (Eigen::Index i = 0; i < W.rows(); ++i)
        for (Eigen::Index j = 0; j < W.cols(); ++j) y[i] += W(i, j) * x[j];
    return y;
}

inline Vector o_row(const Matrix& M, Eigen::Index j) {
    Vector v(M.cols());
    for (Eigen::Index c = 0; c < M.cols(); ++c) v[c] = M(j, c);
    return v;
}

inline const Matrix& P(const nn::ParamStore& s, const std::string& name) { return s.at(name).value; }

inline const Matrix& o_intents(const LatentModel& m) {
    return m.generative.store.contains("intents") ? P(m.generative.store, "intents")
                                                   : m.intents.centroids;
}

inline std::vector<double> o_q(const LatentModel& m, const Vector& S) {
    const Matrix& M = o_intents(m);
    const Vector qs = o_matvec(P(m.inference.store, "W_q"), S);
    std::vector<double> z;
    for (Eigen::Index j = 0; j < M.rows(); ++j) {
        const Vector k = o_matvec(P(m.inference.store, "W_k"), o_row(M, j));
        z.push_back(o_dot(qs, k) / std::sqrt(static_cast<double>(M.cols())));
    }
    return o_softmax(z);
}

inline Vector o_context(const LatentModel& m, const Vector& S, const Vector& x) {
    const auto& g = m.generative.store;
    const Vector ps = o_matvec(P(g, "P_s"), S);
    Vector px = o_matvec(P(g, "P_x"), x);
    for (Eigen::Index i = 0; i < px.size(); ++i) px[i] += P(g, "b_x")(i, 0);
    Vector h(ps.size() + px.size());
    for (Eigen::Index i = 0; i < ps.size(); ++i) h[i] = ps[i];
    for (Eigen::Index i = 0; i < px.size(); ++i) h[ps.size() + i] = px[i];
    const std::size_t layers = m.dims.hidden.size() + 1;
    for (std::size_t l = 0; l < layers; ++l) {
        const Matrix& W = P(g, "ctx.W" + std::to_string(l));
        const Matrix& b = P(g, "ctx.b" + std::to_string(l));
        Vector y = o_matvec(W, h);
        for (Eigen::Index i = 0; i < y.size(); ++i) {
            y[i] += b(i, 0);
            if (l + 1 < layers) {
                y[i] = m.dims.activation == nn::Activation::tanh ? std::tanh(y[i]) : std::max(0.0, y[i]);
            }
        }
        h = y;
    }
    return h;
}

inline std::vector<double> o_b(const LatentModel& m, const Vector& S, const Vector& x) {
    const Vector c = o_context(m, S, x);
    const Matrix& M = o_intents(m);
    std::vector<double> b;
    for (Eigen::Index j = 0; j < M.rows(); ++j) {
        b.push_back(o_dot(c, o_matvec(P(m.generative.store, "W_m"), o_row(M, j))));
    }
    return b;
}

inline std::vector<double> o_f(const LatentModel& m, const Vector& S, const Vector& x) {
    return o_softmax(o_b(m, S, x));
}

inline std::vector<double> o_a(const LatentModel& m, const Vector& v) {
    const Matrix& M = o_intents(m);
    const Vector wv = o_matvec(P(m.generative.store, "W_v"), v);
    std::vector<double> a;
    for (Eigen::Index j = 0; j < M.rows(); ++j) {
        a.push_back(o_dot(o_matvec(P(m.generative.store, "W_j"), o_row(M, j)), wv));
    }
    return a;
}

inline std::vector<double> o_g(const LatentModel& m, const Vector& S, const Vector& x, const Vector& v) {
    const auto a = o_a(m, v);
    const auto b = o_b(m, S, x);
    std::vector<double> g;
    for (std::size_t j = 0; j < a.size(); ++j) g.push_back(a[j] * b[j]);
    return g;
}

inline double o_h(const LatentModel& m, const Vector& S, const Vector& x, const Vector& v) {
    const auto f = o_f(m, S, x);
    const auto g = o_g(m, S, x, v);
    double h = 0.0;
    for (std::size_t j = 0; j < f.size(); ++j) h += f[j] * g[j];
    return h;
}

inline std::vector<double> o_posterior(const LatentModel& m, const Vector& S, const Vector& x,
                                       const Vector& v) {
    const auto f = o_f(m, S, x);
    const auto g = o_g(m, S, x, v);
    std::vector<double> z;
    for (std::size_t j = 0; j < f.size(); ++j) z.push_back(std::log(f[j]) + m.tau * g[j]);
    return o_softmax(z);
}

inline double o_kl(const std::vector<double>& q, const std::vector<double>& p) {
    double s = 0.0;
    for (std::size_t j = 0; j < q.size(); ++j) s += q[j] * (std::log(q[j]) - std::log(p[j]));
    return s;
}

inline Vector item_of(const Matrix& items, std::size_t i) { return o_row(items, static_cast<Eigen::Index>(i)); }

inline std::vector<std::size_t> candidates_of(const TrainInstance& t) {
    std::vector<std::size_t> c{t.target};
    c.insert(c.end(), t.negatives.begin(), t.negatives.end());
    return c;
}

/// Per-instance infoNCE.
inline double o_infonce(const LatentModel& m, const Matrix& items, const TrainInstance& t) {
    const auto q = o_q(m, t.behavior);
    const auto cands = candidates_of(t);
    std::vector<std::vector<double>> g;
    for (auto c : cands) g.push_back(o_g(m, t.behavior, t.text, item_of(items, c)));
    double loss = 0.0;
    for (std::size_t j = 0; j < q.size(); ++j) {
        std::vector<double> row;
        for (const auto& gk : g) row.push_back(gk[j]);
        loss += q[j] * (o_lse(row) - row[0]);
    }
    return loss;
}

inline double o_m_kl(const LatentModel& m, const TrainInstance& t) {
    return o_kl(o_q(m, t.behavior), o_f(m, t.behavior, t.text));
}

inline double o_s(const LatentModel& m, const Vector& S, const Vector& x, const Vector& v) {
    const auto f = o_f(m, S, x);
    const auto g = o_g(m, S, x, v);
    std::vector<double> z;
    for (std::size_t j = 0; j < f.size(); ++j) z.push_back(std::log(f[j]) + m.tau * g[j]);
    return o_lse(z);
}

inline double o_m_rec(const LatentModel& m, const Matrix& items, const TrainInstance& t) {
    std::vector<double> s;
    for (auto c : candidates_of(t)) s.push_back(o_s(m, t.behavior, t.text, item_of(items, c)));
    return o_lse(s) - s[0];
}

inline double o_elbo(const LatentModel& m, const Matrix& items, const TrainInstance& t) {
    return o_kl(o_q(m, t.behavior), o_posterior(m, t.behavior, t.text, item_of(items, t.target)));
}

inline double o_e_rec(const LatentModel& m, const Matrix& items, const TrainInstance& t) {
    const auto q = o_q(m, t.behavior);
    const Matrix& M = o_intents(m);
    Vector r = Vector::Zero(M.cols());
    for (Eigen::Index j = 0; j < M.rows(); ++j)
        for (Eigen::Index c = 0; c < M.cols(); ++c) r[c] += q[static_cast<std::size_t>(j)] * M(j, c);
    const Matrix& We = P(m.inference.store, "W_e");
    std::vector<double> e;
    for (auto c : candidates_of(t)) e.push_back(o_dot(r, o_matvec(We, item_of(items, c))));
    return o_lse(e) - e[0];
}

template <typename F>
double o_mean(const std::vector<TrainInstance>& batch, F&& f) {
    double s = 0.0;
    for (const auto& t : batch) s += f(t);
    return s / static_cast<double>(batch.size());
}

inline std::filesystem::path temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() /
             ("crs_test_" + name + "_" + std::to_string(std::random_device{}()));
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace crs::testing

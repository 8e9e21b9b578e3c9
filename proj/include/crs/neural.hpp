#pragma once

// Small trainable-parameter substrate: named parameter matrices with Adam
// state, feed-forward stacks with hand-written backward passes, stable
// softmax helpers and a central-difference gradient checker.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace crs::nn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Raised when a loss, gradient or parameter becomes NaN/Inf.
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

class ShapeError : public std::invalid_argument {
public:
    explicit ShapeError(const std::string& what) : std::invalid_argument(what) {}
};

struct Param {
    std::string name;
    Matrix value;
    Matrix grad;
    Matrix adam_m;
    Matrix adam_v;
};

/// Ordered collection of named parameters. Shapes are fixed at add() time.
class ParamStore {
public:
    std::size_t add(std::string name, Eigen::Index rows, Eigen::Index cols);

    Param& operator[](std::size_t i) { return params_.at(i); }
    const Param& operator[](std::size_t i) const { return params_.at(i); }
    Param& at(std::string_view name);
    const Param& at(std::string_view name) const;
    bool contains(std::string_view name) const;
    std::size_t index_of(std::string_view name) const;

    std::size_t size() const { return params_.size(); }
    std::size_t num_scalars() const;
    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

    void zero_grad();
    bool all_finite() const;
    /// FNV-1a over names, shapes and value bytes.
    std::uint64_t fingerprint() const;

    std::int64_t adam_steps = 0;

private:
    std::vector<Param> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

void init_uniform(ParamStore& store, double lo, double hi, std::mt19937_64& rng);

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// One bias-corrected Adam update using the gradients held in the store.
/// Throws NumericError on a non-finite gradient (before touching any value).
void adam_step(ParamStore& store, const AdamConfig& cfg);

enum class Activation { relu, tanh };

Activation parse_activation(std::string_view s);
std::string_view to_string(Activation a);

struct FFNSpec {
    int input_dim = 0;
    std::vector<int> hidden;
    int output_dim = 0;
    Activation activation = Activation::tanh;
};

/// Affine + activation stack; the last layer is linear. Weights live in a
/// ParamStore under "<prefix>.W<l>" / "<prefix>.b<l>".
class FeedForward {
public:
    struct Cache {
        std::vector<Vector> inputs;  // input of each layer
        std::vector<Vector> pre;     // pre-activation of each layer
    };

    FeedForward() = default;
    FeedForward(FFNSpec spec, ParamStore& store, const std::string& prefix);
    /// Rebinds to parameters already present in `store` (checkpoint load).
    static FeedForward bind(FFNSpec spec, const ParamStore& store, const std::string& prefix);

    const FFNSpec& spec() const { return spec_; }
    std::size_t num_layers() const { return weights_.size(); }
    std::size_t weight_index(std::size_t layer) const { return weights_.at(layer); }
    std::size_t bias_index(std::size_t layer) const { return biases_.at(layer); }

    Vector forward(const ParamStore& store, const Vector& x, Cache* cache = nullptr) const;
    /// Accumulates parameter gradients into `store` and returns dL/dx.
    Vector backward(ParamStore& store, const Cache& cache, const Vector& dout) const;

private:
    FFNSpec spec_;
    std::vector<std::size_t> weights_;
    std::vector<std::size_t> biases_;
};

double logsumexp(const Vector& x);
Vector softmax(const Vector& logits);
Vector log_softmax(const Vector& logits);

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    std::string worst;  // "<param>[r,c]"
};

/// Compares analytic gradients against central differences.
///
/// `loss(true)` must zero nothing itself; the checker zeroes the store's
/// gradients, calls loss(true) once to collect analytic gradients, then calls
/// loss(false) at perturbed points. `samples` coordinates are drawn per
/// parameter (all coordinates when the parameter is smaller). Relative error
/// is |a - n| / max(|a|, |n|, floor).
GradCheckResult grad_check(const std::function<double(bool)>& loss, ParamStore& store,
                           std::size_t samples, double eps, std::uint64_t seed = 0,
                           double floor = 1e-4);

}  // namespace crs::nn

#include "crs/neural.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

namespace crs::nn {

std::size_t ParamStore::add(std::string name, Eigen::Index rows, Eigen::Index cols) {
    if (rows <= 0 || cols <= 0) {
        throw ShapeError("parameter '" + name + "' must have positive shape");
    }
    if (index_.count(name) != 0) {
        throw std::invalid_argument("duplicate parameter '" + name + "'");
    }
    Param p;
    p.name = name;
    p.value = Matrix::Zero(rows, cols);
    p.grad = Matrix::Zero(rows, cols);
    p.adam_m = Matrix::Zero(rows, cols);
    p.adam_v = Matrix::Zero(rows, cols);
    index_.emplace(std::move(name), params_.size());
    params_.push_back(std::move(p));
    return params_.size() - 1;
}

std::size_t ParamStore::index_of(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) {
        throw std::out_of_range("unknown parameter '" + std::string(name) + "'");
    }
    return it->second;
}

Param& ParamStore::at(std::string_view name) { return params_[index_of(name)]; }
const Param& ParamStore::at(std::string_view name) const { return params_[index_of(name)]; }

bool ParamStore::contains(std::string_view name) const {
    return index_.count(std::string(name)) != 0;
}

std::size_t ParamStore::num_scalars() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
}

void ParamStore::zero_grad() {
    for (auto& p : params_) p.grad.setZero();
}

bool ParamStore::all_finite() const {
    return std::all_of(params_.begin(), params_.end(),
                       [](const Param& p) { return p.value.allFinite(); });
}

std::uint64_t ParamStore::fingerprint() const {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const void* data, std::size_t n) {
        const auto* bytes = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= bytes[i];
            h *= 1099511628211ULL;
        }
    };
    for (const auto& p : params_) {
        mix(p.name.data(), p.name.size());
        const std::int64_t shape[2] = {p.value.rows(), p.value.cols()};
        mix(shape, sizeof(shape));
        mix(p.value.data(), sizeof(double) * static_cast<std::size_t>(p.value.size()));
    }
    return h;
}

void init_uniform(ParamStore& store, double lo, double hi, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> dist(lo, hi);
    for (auto& p : store) {
        for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = dist(rng);
    }
}

void adam_step(ParamStore& store, const AdamConfig& cfg) {
    for (const auto& p : store) {
        if (!p.grad.allFinite()) {
            throw NumericError("non-finite gradient in parameter '" + p.name + "'");
        }
    }
    store.adam_steps += 1;
    const double t = static_cast<double>(store.adam_steps);
    const double c1 = 1.0 - std::pow(cfg.beta1, t);
    const double c2 = 1.0 - std::pow(cfg.beta2, t);
    for (auto& p : store) {
        p.adam_m = cfg.beta1 * p.adam_m + (1.0 - cfg.beta1) * p.grad;
        p.adam_v = cfg.beta2 * p.adam_v + (1.0 - cfg.beta2) * p.grad.cwiseProduct(p.grad);
        p.value.array() -= cfg.lr * (p.adam_m.array() / c1) /
                           ((p.adam_v.array() / c2).sqrt() + cfg.eps);
        if (!p.value.allFinite()) {
            throw NumericError("parameter '" + p.name + "' became non-finite after Adam step");
        }
    }
}

Activation parse_activation(std::string_view s) {
    if (s == "relu") return Activation::relu;
    if (s == "tanh") return Activation::tanh;
    throw std::invalid_argument("unknown activation '" + std::string(s) + "'");
}

std::string_view to_string(Activation a) { return a == Activation::relu ? "relu" : "tanh"; }

namespace {

std::vector<int> layer_dims(const FFNSpec& spec) {
    if (spec.input_dim <= 0 || spec.output_dim <= 0) {
        throw ShapeError("FFN dims must be positive");
    }
    std::vector<int> dims{spec.input_dim};
    for (int h : spec.hidden) {
        if (h <= 0) throw ShapeError("FFN hidden dims must be positive");
        dims.push_back(h);
    }
    dims.push_back(spec.output_dim);
    return dims;
}

}  // namespace

FeedForward::FeedForward(FFNSpec spec, ParamStore& store, const std::string& prefix)
    : spec_(std::move(spec)) {
    const auto dims = layer_dims(spec_);
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
        weights_.push_back(store.add(prefix + ".W" + std::to_string(l), dims[l + 1], dims[l]));
        biases_.push_back(store.add(prefix + ".b" + std::to_string(l), dims[l + 1], 1));
    }
}

FeedForward FeedForward::bind(FFNSpec spec, const ParamStore& store, const std::string& prefix) {
    FeedForward ffn;
    ffn.spec_ = std::move(spec);
    const auto dims = layer_dims(ffn.spec_);
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
        const auto w = store.index_of(prefix + ".W" + std::to_string(l));
        const auto b = store.index_of(prefix + ".b" + std::to_string(l));
        if (store[w].value.rows() != dims[l + 1] || store[w].value.cols() != dims[l] ||
            store[b].value.rows() != dims[l + 1]) {
            throw ShapeError("stored FFN layer " + std::to_string(l) + " has wrong shape");
        }
        ffn.weights_.push_back(w);
        ffn.biases_.push_back(b);
    }
    return ffn;
}

Vector FeedForward::forward(const ParamStore& store, const Vector& x, Cache* cache) const {
    if (x.size() != spec_.input_dim) {
        throw ShapeError("FFN input has dim " + std::to_string(x.size()) + ", expected " +
                         std::to_string(spec_.input_dim));
    }
    if (cache) {
        cache->inputs.clear();
        cache->pre.clear();
    }
    Vector h = x;
    const std::size_t L = weights_.size();
    for (std::size_t l = 0; l < L; ++l) {
        Vector pre = store[weights_[l]].value * h + store[biases_[l]].value.col(0);
        if (cache) {
            cache->inputs.push_back(h);
            cache->pre.push_back(pre);
        }
        if (l + 1 == L) {
            h = std::move(pre);
        } else if (spec_.activation == Activation::relu) {
            h = pre.cwiseMax(0.0);
        } else {
            h = pre.array().tanh().matrix();
        }
    }
    return h;
}

Vector FeedForward::backward(ParamStore& store, const Cache& cache, const Vector& dout) const {
    const std::size_t L = weights_.size();
    Vector d = dout;
    for (std::size_t l = L; l-- > 0;) {
        if (l + 1 != L) {
            const Vector& pre = cache.pre[l];
            if (spec_.activation == Activation::relu) {
                d = d.cwiseProduct((pre.array() > 0.0).cast<double>().matrix());
            } else {
                d = d.cwiseProduct((1.0 - pre.array().tanh().square()).matrix());
            }
        }
        store[weights_[l]].grad.noalias() += d * cache.inputs[l].transpose();
        store[biases_[l]].grad.col(0) += d;
        d = store[weights_[l]].value.transpose() * d;
    }
    return d;
}

double logsumexp(const Vector& x) {
    const double m = x.maxCoeff();
    return m + std::log((x.array() - m).exp().sum());
}

Vector softmax(const Vector& logits) {
    Vector e = (logits.array() - logits.maxCoeff()).exp().matrix();
    return e / e.sum();
}

Vector log_softmax(const Vector& logits) {
    return (logits.array() - logsumexp(logits)).matrix();
}

GradCheckResult grad_check(const std::function<double(bool)>& loss, ParamStore& store,
                           std::size_t samples, double eps, std::uint64_t seed, double floor) {
    if (!(eps > 0.0)) throw std::invalid_argument("grad_check: eps must be positive");
    store.zero_grad();
    loss(true);
    std::vector<Matrix> analytic;
    analytic.reserve(store.size());
    for (const auto& p : store) analytic.push_back(p.grad);

    std::mt19937_64 rng(seed);
    GradCheckResult result;
    for (std::size_t pi = 0; pi < store.size(); ++pi) {
        auto& p = store[pi];
        const auto n = static_cast<std::size_t>(p.value.size());
        std::vector<std::size_t> coords(n);
        std::iota(coords.begin(), coords.end(), 0);
        if (samples < n) {
            std::shuffle(coords.begin(), coords.end(), rng);
            coords.resize(samples);
        }
        for (std::size_t c : coords) {
            double& x = p.value.data()[c];
            const double orig = x;
            x = orig + eps;
            const double up = loss(false);
            x = orig - eps;
            const double down = loss(false);
            x = orig;
            const double numeric = (up - down) / (2.0 * eps);
            const double a = analytic[pi].data()[c];
            const double rel =
                std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
            ++result.checked;
            if (rel > result.max_rel_error || !std::isfinite(rel)) {
                result.max_rel_error = std::isfinite(rel) ? rel : INFINITY;
                const auto r = static_cast<Eigen::Index>(c) % p.value.rows();
                const auto col = static_cast<Eigen::Index>(c) / p.value.rows();
                result.worst = p.name + "[" + std::to_string(r) + "," + std::to_string(col) + "]";
            }
        }
    }
    store.zero_grad();
    return result;
}

}  // namespace crs::nn

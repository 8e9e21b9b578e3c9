#include "crs/latent_model.hpp"

#include "crs/binary_io.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace crs {

using nn::Matrix;
using nn::Vector;

namespace {

constexpr std::string_view kBundleMagic = "CRSM";
constexpr std::uint32_t kBundleVersion = 1;

void glorot(nn::ParamStore& store, std::size_t idx, std::mt19937_64& rng) {
    auto& m = store[idx].value;
    const double s = std::sqrt(6.0 / static_cast<double>(m.rows() + m.cols()));
    std::uniform_real_distribution<double> dist(-s, s);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
}

void check_dim(const Vector& v, int expected, const char* what) {
    if (v.size() != expected) {
        throw nn::ShapeError(std::string(what) + " has dim " + std::to_string(v.size()) +
                             ", expected " + std::to_string(expected));
    }
}

nn::FFNSpec context_ffn_spec(const LatentDims& d) {
    return {2 * d.proj, d.hidden, d.context, d.activation};
}

void write_dims(io::BinaryWriter& w, const LatentDims& d) {
    for (int v : {d.behavior, d.text, d.item, d.attention, d.proj, d.context, d.bilinear}) w.i64(v);
    w.u64(d.hidden.size());
    for (int h : d.hidden) w.i64(h);
    w.str(nn::to_string(d.activation));
}

LatentDims read_dims(io::BinaryReader& r) {
    LatentDims d;
    for (int* v : {&d.behavior, &d.text, &d.item, &d.attention, &d.proj, &d.context, &d.bilinear}) {
        *v = static_cast<int>(r.i64());
    }
    d.hidden.clear();
    const auto n = r.u64();
    for (std::uint64_t i = 0; i < n; ++i) d.hidden.push_back(static_cast<int>(r.i64()));
    d.activation = nn::parse_activation(r.str());
    return d;
}

}  // namespace

InferenceModel::InferenceModel(const LatentDims& dims, std::mt19937_64& rng) {
    wq = store.add("W_q", dims.attention, dims.behavior);
    wk = store.add("W_k", dims.attention, dims.behavior);
    we = store.add("W_e", dims.behavior, dims.item);
    for (std::size_t i = 0; i < store.size(); ++i) glorot(store, i, rng);
}

void InferenceModel::bind() {
    wq = store.index_of("W_q");
    wk = store.index_of("W_k");
    we = store.index_of("W_e");
}

GenerativeModel::GenerativeModel(const LatentDims& dims, std::mt19937_64& rng,
                                 const Matrix* trainable_intents) {
    ps = store.add("P_s", dims.proj, dims.behavior);
    px = store.add("P_x", dims.proj, dims.text);
    bx = store.add("b_x", dims.proj, 1);
    ffn = nn::FeedForward(context_ffn_spec(dims), store, "ctx");
    wm = store.add("W_m", dims.context, dims.behavior);
    wj = store.add("W_j", dims.bilinear, dims.behavior);
    wv = store.add("W_v", dims.bilinear, dims.item);
    for (std::size_t i = 0; i < store.size(); ++i) {
        if (store[i].value.cols() == 1) continue;  // biases start at zero
        glorot(store, i, rng);
    }
    if (trainable_intents) {
        intents = store.add("intents", trainable_intents->rows(), trainable_intents->cols());
        store[*intents].value = *trainable_intents;
    }
}

void GenerativeModel::bind(const LatentDims& dims) {
    ps = store.index_of("P_s");
    px = store.index_of("P_x");
    bx = store.index_of("b_x");
    wm = store.index_of("W_m");
    wj = store.index_of("W_j");
    wv = store.index_of("W_v");
    intents.reset();
    if (store.contains("intents")) intents = store.index_of("intents");
    ffn = nn::FeedForward::bind(context_ffn_spec(dims), store, "ctx");
}

LatentModel LatentModel::create(const LatentDims& dims, IntentSpace intents, std::uint64_t seed,
                                bool trainable_intents) {
    if (intents.count() < 1) throw ConfigError("intent space is empty");
    if (intents.dim() != dims.behavior) {
        throw nn::ShapeError("intent dim " + std::to_string(intents.dim()) +
                             " differs from behaviour dim " + std::to_string(dims.behavior));
    }
    LatentModel m;
    m.dims = dims;
    m.intents = std::move(intents);
    std::mt19937_64 rng(seed);
    m.inference = InferenceModel(dims, rng);
    m.generative = GenerativeModel(dims, rng, trainable_intents ? &m.intents.centroids : nullptr);
    return m;
}

const Matrix& LatentModel::intent_matrix() const {
    if (generative.intents) return generative.store[*generative.intents].value;
    return intents.centroids;
}

IntentProjections project_intents(const LatentModel& model) {
    const Matrix& M = model.intent_matrix();
    return {model.generative.store[model.generative.wm].value * M.transpose(),
            model.generative.store[model.generative.wj].value * M.transpose(),
            model.inference.W_k() * M.transpose()};
}

Vector inference_logits(const Vector& behavior, const LatentModel& model,
                        const IntentProjections& proj) {
    check_dim(behavior, model.dims.behavior, "behaviour embedding");
    const Vector query = model.inference.W_q() * behavior;
    return proj.attention_keys.transpose() * query / std::sqrt(static_cast<double>(model.dims.behavior));
}

Vector infer_q(const Vector& behavior, const LatentModel& model) {
    return nn::softmax(inference_logits(behavior, model, project_intents(model)));
}

GenerativeModel::Context generative_context(const Vector& behavior, const Vector& text,
                                            const LatentModel& model,
                                            const IntentProjections& proj) {
    check_dim(behavior, model.dims.behavior, "behaviour embedding");
    check_dim(text, model.dims.text, "text embedding");
    const auto& g = model.generative;
    GenerativeModel::Context ctx;
    ctx.input.resize(2 * model.dims.proj);
    ctx.input.head(model.dims.proj) = g.store[g.ps].value * behavior;
    ctx.input.tail(model.dims.proj) = g.store[g.px].value * text + g.store[g.bx].value.col(0);
    ctx.c = g.ffn.forward(g.store, ctx.input, &ctx.cache);
    ctx.b = proj.context_keys.transpose() * ctx.c;
    ctx.logf = nn::log_softmax(ctx.b);
    ctx.f = ctx.logf.array().exp().matrix();
    return ctx;
}

Vector prior_f(const Vector& behavior, const Vector& text, const LatentModel& model) {
    return generative_context(behavior, text, model, project_intents(model)).f;
}

Vector item_affinity(const Vector& item, const LatentModel& model, const IntentProjections& proj) {
    check_dim(item, model.dims.item, "item embedding");
    return proj.item_keys.transpose() * (model.generative.store[model.generative.wv].value * item);
}

double ratio_g(const Vector& item, int intent, const Vector& behavior, const Vector& text,
               const LatentModel& model) {
    if (intent < 0 || intent >= model.num_intents()) {
        throw std::out_of_range("intent index " + std::to_string(intent) + " out of range");
    }
    const auto proj = project_intents(model);
    const auto ctx = generative_context(behavior, text, model, proj);
    return item_affinity(item, model, proj)[intent] * ctx.b[intent];
}

double mixture_h(const Vector& item, const Vector& behavior, const Vector& text,
                 const LatentModel& model) {
    const auto proj = project_intents(model);
    const auto ctx = generative_context(behavior, text, model, proj);
    const Vector g = item_affinity(item, model, proj).cwiseProduct(ctx.b);
    return ctx.f.dot(g);
}

Vector posterior_from(const Vector& logf, const Vector& g, double tau) {
    return nn::softmax(logf + tau * g);
}

Vector posterior(const Vector& item, const Vector& behavior, const Vector& text,
                 const LatentModel& model) {
    const auto proj = project_intents(model);
    const auto ctx = generative_context(behavior, text, model, proj);
    const Vector g = item_affinity(item, model, proj).cwiseProduct(ctx.b);
    return posterior_from(ctx.logf, g, model.tau);
}

RankMode parse_rank_mode(std::string_view s) {
    if (s == "full") return RankMode::full;
    if (s == "cond_indep" || s == "cond-indep") return RankMode::cond_indep;
    throw std::invalid_argument("unknown ranking mode '" + std::string(s) + "'");
}

std::vector<double> score_items(const Vector& behavior, const Vector& text,
                                const Matrix& item_table, std::span<const std::size_t> candidates,
                                RankMode mode, const LatentModel& model) {
    const auto proj = project_intents(model);
    const auto ctx = generative_context(behavior, text, model, proj);
    // Per-intent item weight: full uses f_j b_j, cond_indep uses f_j.
    Vector weight = ctx.f;
    if (mode == RankMode::full) weight = weight.cwiseProduct(ctx.b);
    const Vector user = proj.item_keys * weight;  // d_b
    const Vector query = model.generative.store[model.generative.wv].value.transpose() * user;
    std::vector<double> scores;
    scores.reserve(candidates.size());
    for (std::size_t idx : candidates) {
        if (idx >= static_cast<std::size_t>(item_table.rows())) {
            throw LookupError("candidate index " + std::to_string(idx) + " outside item table");
        }
        scores.push_back(item_table.row(static_cast<Eigen::Index>(idx)).dot(query));
    }
    return scores;
}

std::vector<ScoredItem> top_k_sorted(std::vector<ScoredItem> scored, std::size_t top_k) {
    auto better = [](const ScoredItem& a, const ScoredItem& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.index < b.index;
    };
    const std::size_t k = std::min(top_k, scored.size());
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(k), scored.end(),
                      better);
    scored.resize(k);
    return scored;
}

std::vector<ScoredItem> rank_items(const Vector& behavior, const Vector& text,
                                   const Matrix& item_table, std::span<const std::size_t> candidates,
                                   RankMode mode, std::size_t top_k, const LatentModel& model) {
    if (candidates.empty()) throw std::invalid_argument("rank_items: no candidates");
    const auto scores = score_items(behavior, text, item_table, candidates, mode, model);
    std::vector<ScoredItem> scored;
    scored.reserve(candidates.size());
    for (std::size_t i = 0; i < candidates.size(); ++i) scored.push_back({candidates[i], scores[i]});
    return top_k_sorted(std::move(scored), top_k);
}

void ModelBundle::save(const std::string& path) const {
    io::BinaryWriter w(path, kBundleMagic, kBundleVersion);
    w.str(config_fingerprint);
    w.str(text_provider);
    encoder.write_to(w);
    write_dims(w, latent.dims);
    w.f64(latent.tau);
    w.matrix(latent.intents.centroids);
    w.params(latent.inference.store);
    w.params(latent.generative.store);
    w.matrix(population_behavior);
    w.close();
}

ModelBundle ModelBundle::load(const std::string& path) {
    io::BinaryReader r(path, kBundleMagic, kBundleVersion);
    ModelBundle b;
    b.config_fingerprint = r.str();
    b.text_provider = r.str();
    b.encoder = BehaviorEncoder::read_from(r);
    b.latent.dims = read_dims(r);
    b.latent.tau = r.f64();
    b.latent.intents.centroids = r.matrix();
    b.latent.inference.store = r.params();
    b.latent.inference.bind();
    b.latent.generative.store = r.params();
    b.latent.generative.bind(b.latent.dims);
    b.population_behavior = r.matrix();
    return b;
}

std::string ModelBundle::fingerprint() const {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](std::uint64_t v) {
        for (int i = 0; i < 8; ++i) {
            h ^= (v >> (8 * i)) & 0xFF;
            h *= 1099511628211ULL;
        }
    };
    for (char c : config_fingerprint) mix(static_cast<unsigned char>(c));
    mix(encoder.params().fingerprint());
    mix(latent.inference.store.fingerprint());
    mix(latent.generative.store.fingerprint());
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

Recommender::Recommender(std::shared_ptr<const ModelBundle> bundle,
                         std::shared_ptr<const embed::TextEncoder> text, RankMode mode)
    : bundle_(std::move(bundle)), text_(std::move(text)), mode_(mode) {
    if (!bundle_ || !text_) throw std::invalid_argument("Recommender needs a model and a text encoder");
    if (text_->dim() != bundle_->latent.dims.text) {
        throw embed::ContractError("text provider dim " + std::to_string(text_->dim()) +
                                   " differs from model text dim " +
                                   std::to_string(bundle_->latent.dims.text));
    }
}

Vector Recommender::behavior(std::span<const ItemId> history) const {
    if (history.empty()) return bundle_->population_behavior;
    return bundle_->encoder.encode_ids(history);
}

Vector Recommender::text(std::string_view description) const {
    return text_->embed(description).vector;
}

std::vector<ScoredItem> Recommender::rank(std::span<const ItemId> history,
                                          std::string_view description,
                                          std::span<const std::size_t> candidates,
                                          std::size_t top_k) const {
    return rank_items(behavior(history), text(description), bundle_->encoder.items(), candidates,
                      mode_, top_k, bundle_->latent);
}

}  // namespace crs

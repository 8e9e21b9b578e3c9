#pragma once

// Latent-intent recommender.
//
// Inference model (behaviour only):
//   q(m_j | S) = softmax_j( (W_q S) . (W_k m_j) / sqrt(d_m) )
//
// Generative model (behaviour + text):
//   c      = FFN([P_s S ; P_x x + b_x])
//   b_j    = c . (W_m m_j)                 f = softmax(b)      (intent prior)
//   a_j(v) = (W_j m_j) . (W_v v)                               (intent-item affinity)
//   g_j(v) = a_j(v) * b_j                                      (density-ratio estimate)
//   h(v)   = sum_j f_j g_j(v)
//   p(m_j | v, S, x) ∝ f_j exp(tau g_j(v))
//
// Item vectors v are the frozen rows of the behaviour encoder's table.

#include "crs/encoder.hpp"
#include "crs/intents.hpp"
#include "crs/neural.hpp"
#include "crs/text_embed.hpp"

#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace crs {

struct LatentDims {
    int behavior = 64;   // d_u, also the intent dim d_m
    int text = 256;      // d_x
    int item = 64;       // d_v
    int attention = 64;  // d_a
    int proj = 64;       // d_p
    int context = 64;    // d_c
    int bilinear = 64;   // d_b
    std::vector<int> hidden{64};
    nn::Activation activation = nn::Activation::tanh;
};

class InferenceModel {
public:
    InferenceModel() = default;
    InferenceModel(const LatentDims& dims, std::mt19937_64& rng);

    nn::ParamStore store;
    std::size_t wq = 0;  // d_a x d_u
    std::size_t wk = 0;  // d_a x d_m
    std::size_t we = 0;  // d_u x d_v, auxiliary recommendation head

    const nn::Matrix& W_q() const { return store[wq].value; }
    const nn::Matrix& W_k() const { return store[wk].value; }
    const nn::Matrix& W_e() const { return store[we].value; }

    void bind();
};

class GenerativeModel {
public:
    GenerativeModel() = default;
    GenerativeModel(const LatentDims& dims, std::mt19937_64& rng,
                    const nn::Matrix* trainable_intents = nullptr);

    nn::ParamStore store;
    std::size_t ps = 0;  // d_p x d_u
    std::size_t px = 0;  // d_p x d_x
    std::size_t bx = 0;  // d_p x 1
    std::size_t wm = 0;  // d_c x d_m
    std::size_t wj = 0;  // d_b x d_m
    std::size_t wv = 0;  // d_b x d_v
    std::optional<std::size_t> intents;  // K x d_m when centroids are trainable
    nn::FeedForward ffn;

    void bind(const LatentDims& dims);

    struct Context {
        nn::Vector input;  // [P_s S ; P_x x + b_x]
        nn::FeedForward::Cache cache;
        nn::Vector c;
        nn::Vector b;     // intent logits
        nn::Vector f;     // prior
        nn::Vector logf;
    };
};

struct LatentModel {
    LatentDims dims;
    IntentSpace intents;  // k-means centroids
    InferenceModel inference;
    GenerativeModel generative;
    double tau = 1.0;

    static LatentModel create(const LatentDims& dims, IntentSpace intents, std::uint64_t seed,
                              bool trainable_intents = false);

    /// Centroids as currently used by both models.
    const nn::Matrix& intent_matrix() const;
    int num_intents() const { return static_cast<int>(intent_matrix().rows()); }
};

/// Per-step projections of the intent vectors (recomputed after each update).
struct IntentProjections {
    nn::Matrix context_keys;   // W_m M^T, d_c x K
    nn::Matrix item_keys;      // W_j M^T, d_b x K
    nn::Matrix attention_keys; // W_k M^T, d_a x K
};

IntentProjections project_intents(const LatentModel& model);

nn::Vector inference_logits(const nn::Vector& behavior, const LatentModel& model,
                            const IntentProjections& proj);
nn::Vector infer_q(const nn::Vector& behavior, const LatentModel& model);

GenerativeModel::Context generative_context(const nn::Vector& behavior, const nn::Vector& text,
                                            const LatentModel& model,
                                            const IntentProjections& proj);
nn::Vector prior_f(const nn::Vector& behavior, const nn::Vector& text, const LatentModel& model);

/// a(v, .) for one item vector.
nn::Vector item_affinity(const nn::Vector& item, const LatentModel& model,
                         const IntentProjections& proj);

double ratio_g(const nn::Vector& item, int intent, const nn::Vector& behavior,
               const nn::Vector& text, const LatentModel& model);
double mixture_h(const nn::Vector& item, const nn::Vector& behavior, const nn::Vector& text,
                 const LatentModel& model);
nn::Vector posterior(const nn::Vector& item, const nn::Vector& behavior, const nn::Vector& text,
                     const LatentModel& model);
/// f_j exp(tau g_j) normalised; shared by posterior() and the trainer.
nn::Vector posterior_from(const nn::Vector& logf, const nn::Vector& g, double tau);

enum class RankMode { full, cond_indep };

RankMode parse_rank_mode(std::string_view s);

struct ScoredItem {
    std::size_t index = 0;
    double score = 0.0;
};

/// Scores of `candidates` (indices into `item_table`). full: h(v);
/// cond_indep: sum_j f_j a_j(v).
std::vector<double> score_items(const nn::Vector& behavior, const nn::Vector& text,
                                const nn::Matrix& item_table,
                                std::span<const std::size_t> candidates, RankMode mode,
                                const LatentModel& model);

/// Descending score, ties by ascending index (= ascending item id).
std::vector<ScoredItem> rank_items(const nn::Vector& behavior, const nn::Vector& text,
                                   const nn::Matrix& item_table,
                                   std::span<const std::size_t> candidates, RankMode mode,
                                   std::size_t top_k, const LatentModel& model);

std::vector<ScoredItem> top_k_sorted(std::vector<ScoredItem> scored, std::size_t top_k);

/// Everything needed to serve recommendations.
struct ModelBundle {
    BehaviorEncoder encoder;
    LatentModel latent;
    /// Behaviour embedding used for sessions without interaction history
    /// (mean of the training users' embeddings).
    nn::Vector population_behavior;
    std::string text_provider;
    std::string config_fingerprint;

    void save(const std::string& path) const;
    static ModelBundle load(const std::string& path);
    /// Hex digest over config fingerprint and every parameter value.
    std::string fingerprint() const;
};

/// Ranks catalog items for a behaviour context plus free text.
class Recommender {
public:
    Recommender(std::shared_ptr<const ModelBundle> bundle,
                std::shared_ptr<const embed::TextEncoder> text, RankMode mode = RankMode::full);

    nn::Vector behavior(std::span<const ItemId> history) const;
    nn::Vector text(std::string_view description) const;

    std::vector<ScoredItem> rank(std::span<const ItemId> history, std::string_view description,
                                 std::span<const std::size_t> candidates,
                                 std::size_t top_k) const;

    const ModelBundle& bundle() const { return *bundle_; }
    const embed::TextEncoder& text_encoder() const { return *text_; }
    RankMode mode() const { return mode_; }

private:
    std::shared_ptr<const ModelBundle> bundle_;
    std::shared_ptr<const embed::TextEncoder> text_;
    RankMode mode_;
};

}  // namespace crs

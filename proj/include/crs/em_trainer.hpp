#pragma once

// Training objectives and the staged variational-EM schedule.
//
// Every L-named quantity here is minimised and reported as a mean over the
// batch. Recommendation-step (M) losses send gradients only to the
// generative model, intent-inference-step (E) losses only to the inference
// model.

#include "crs/corpus.hpp"
#include "crs/encoder.hpp"
#include "crs/latent_model.hpp"
#include "crs/text_embed.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace crs {

struct StageConfig {
    int max_epochs = 20;
    double lr = 1e-3;
};

enum class TrainingVariant {
    full,                // stage 1 -> stage 2 -> alternating EM
    no_inference_model,  // generative model on the recommendation loss only
    direct_kl,           // both models trained jointly, no alternation
};

TrainingVariant parse_training_variant(std::string_view s);
std::string_view to_string(TrainingVariant v);

struct TrainConfig {
    int num_intents = 32;
    double lambda = 0.5;   // KL weight in L^M
    double alpha_m = 0.5;  // recommendation weight in L^M
    double alpha_e = 0.5;  // recommendation weight in L^E
    double tau = 1.0;      // positivity surrogate temperature
    int negatives = 64;
    int batch_size = 64;
    StageConfig stage1{20, 1e-3};
    StageConfig stage2{20, 1e-3};
    StageConfig stage3{30, 1e-3};
    /// Rounds without validation NDCG improvement before a stage stops;
    /// <= 0 runs every epoch and keeps the final parameters.
    int patience = 5;
    int eval_k = 20;
    int augment_factor = 5;
    int augment_min_len = 2;
    bool frozen_negatives = false;
    bool trainable_intents = false;
    TrainingVariant variant = TrainingVariant::full;
    LatentDims dims;
    std::uint64_t seed = 7;

    void validate() const;
    /// Canonical "key=value;..." rendering, stable across runs.
    std::string fingerprint() const;
};

struct TrainInstance {
    std::size_t user = 0;
    std::vector<std::size_t> context;
    std::size_t target = 0;
    nn::Vector behavior;
    nn::Vector text;
    std::vector<std::size_t> negatives;
};

struct TrainingData {
    std::vector<TrainInstance> train;
    std::vector<TrainInstance> valid;
    std::vector<UserId> users;
    /// Sorted training items per user (excluded from negative sampling).
    std::vector<std::vector<std::size_t>> user_history;
    nn::Matrix item_table;
    /// Mean behaviour embedding over users' training sequences.
    nn::Vector population_behavior;
};

/// Training instances from the (augmented) train split; validation
/// instances pair each user's training sequence with the held-out
/// validation item. The text of an instance is the soft description of its
/// target item.
TrainingData build_training_data(const Split& split, const Catalog& catalog,
                                 const BehaviorEncoder& encoder,
                                 const embed::TextEncoder& text, const TrainConfig& cfg);

/// `n` distinct items drawn uniformly from {0..num_items-1} minus the target
/// and the user's history. Throws std::invalid_argument if fewer than n are
/// eligible.
std::vector<std::size_t> sample_negatives(std::size_t target,
                                          std::span<const std::size_t> history,
                                          std::size_t num_items, std::size_t n,
                                          std::mt19937_64& rng);

/// Seed for the negatives of (user, target) in a given epoch.
std::uint64_t negative_seed(std::uint64_t seed, std::size_t user, std::size_t target, int epoch);

double kl_divergence(const nn::Vector& q, const nn::Vector& p);

struct LossTerms {
    double infonce = 0.0;
    double kl = 0.0;      // KL(q_hat || f)
    double m_rec = 0.0;
    double elbo = 0.0;    // KL(q || posterior)
    double e_rec = 0.0;
    double total = 0.0;
};

struct MWeights {
    double infonce = 1.0;
    double kl = 0.0;
    double rec = 0.0;
};

struct EWeights {
    double elbo = 1.0;
    double rec = 0.0;
};

/// One pass of the recommendation-step objective. All three components are
/// always evaluated; `total` is the weighted sum and only the weighted sum
/// is differentiated (into model.generative.store) when `accumulate`.
LossTerms m_step_loss(std::span<const TrainInstance> batch, LatentModel& model,
                      const nn::Matrix& items, const MWeights& w, bool accumulate);

/// Intent-inference-step objective; gradients into model.inference.store.
LossTerms e_step_loss(std::span<const TrainInstance> batch, LatentModel& model,
                      const nn::Matrix& items, const EWeights& w, bool accumulate);

double loss_infonce(std::span<const TrainInstance> batch, LatentModel& model,
                    const nn::Matrix& items, bool accumulate);
double loss_m_kl(std::span<const TrainInstance> batch, LatentModel& model,
                 const nn::Matrix& items, bool accumulate);
double loss_m_rec(std::span<const TrainInstance> batch, LatentModel& model,
                  const nn::Matrix& items, bool accumulate);
LossTerms loss_m_total(std::span<const TrainInstance> batch, LatentModel& model,
                       const nn::Matrix& items, const TrainConfig& cfg, bool accumulate);
double loss_e_elbo(std::span<const TrainInstance> batch, LatentModel& model,
                   const nn::Matrix& items, bool accumulate);
double loss_e_rec(std::span<const TrainInstance> batch, LatentModel& model,
                  const nn::Matrix& items, bool accumulate);
LossTerms loss_e_total(std::span<const TrainInstance> batch, LatentModel& model,
                       const nn::Matrix& items, const TrainConfig& cfg, bool accumulate);

struct EpochRecord {
    int stage = 0;
    int epoch = 0;
    std::string step;  // "E", "M", "joint"
    LossTerms loss;
    double valid_ndcg = 0.0;
    double valid_recall = 0.0;
};

/// Parameter fingerprints around one optimisation epoch.
struct StepAudit {
    int stage = 0;
    int epoch = 0;
    std::string step;
    std::uint64_t inference_before = 0, inference_after = 0;
    std::uint64_t generative_before = 0, generative_after = 0;
};

struct TrainResult {
    LatentModel model;
    std::vector<EpochRecord> history;
    std::vector<StepAudit> audits;
};

/// Validation NDCG/Recall at k of the generative model (full mode), or of
/// the inference model's auxiliary head when `inference_head`.
std::pair<double, double> validation_metrics(const TrainingData& data, const LatentModel& model,
                                             int k, bool inference_head);

TrainResult run_training(const TrainingData& data, LatentModel model, const TrainConfig& cfg);

std::string history_jsonl(const std::vector<EpochRecord>& history);

}  // namespace crs

#pragma once

// End-to-end training: encoder pretraining, intent clustering and the staged
// EM schedule, producing a servable bundle.

#include "crs/corpus.hpp"
#include "crs/em_trainer.hpp"
#include "crs/encoder.hpp"
#include "crs/intents.hpp"
#include "crs/latent_model.hpp"
#include "crs/text_embed.hpp"

#include <memory>
#include <vector>

namespace crs {

struct PipelineConfig {
    EncoderConfig encoder;
    TrainConfig train;
    int kmeans_max_iters = 200;
    int kmeans_restarts = 10;
};

/// Behaviour embeddings of every user's training sequence, one row per user
/// in split order.
nn::Matrix user_embeddings(const Split& split, const BehaviorEncoder& encoder,
                           std::vector<UserId>* users = nullptr);

/// Copies the encoder and text dimensions into `dims`.
LatentDims align_dims(LatentDims dims, const BehaviorEncoder& encoder, int text_dim);

struct PipelineArtifacts {
    std::vector<double> encoder_loss;
    KMeansResult kmeans;
    std::vector<UserId> kmeans_users;  // row order of the clustered embeddings
    std::vector<EpochRecord> history;
    std::vector<StepAudit> audits;
    std::shared_ptr<ModelBundle> bundle;
};

/// Trains the latent model given an already pretrained encoder and intents.
ModelBundle train_bundle(const Split& split, const Catalog& catalog, const BehaviorEncoder& encoder,
                         const IntentSpace& intents, const embed::TextEncoder& text,
                         const TrainConfig& cfg, TrainResult* result = nullptr);

PipelineArtifacts run_pipeline(const Split& split, const Catalog& catalog,
                               const embed::TextEncoder& text, const PipelineConfig& cfg);

}  // namespace crs

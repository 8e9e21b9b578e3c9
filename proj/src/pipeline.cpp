#include "crs/pipeline.hpp"

namespace crs {

nn::Matrix user_embeddings(const Split& split, const BehaviorEncoder& encoder,
                           std::vector<UserId>* users) {
    nn::Matrix out(static_cast<Eigen::Index>(split.train.size()), encoder.user_dim());
    Eigen::Index row = 0;
    for (const auto& [user, items] : split.train) {
        out.row(row++) = encoder.encode_ids(items).transpose();
        if (users) users->push_back(user);
    }
    return out;
}

LatentDims align_dims(LatentDims dims, const BehaviorEncoder& encoder, int text_dim) {
    dims.behavior = encoder.user_dim();
    dims.item = encoder.item_dim();
    dims.text = text_dim;
    return dims;
}

ModelBundle train_bundle(const Split& split, const Catalog& catalog, const BehaviorEncoder& encoder,
                         const IntentSpace& intents, const embed::TextEncoder& text,
                         const TrainConfig& cfg_in, TrainResult* result) {
    TrainConfig cfg = cfg_in;
    cfg.dims = align_dims(cfg.dims, encoder, text.dim());
    if (intents.dim() != encoder.user_dim()) {
        throw nn::ShapeError("intent dim " + std::to_string(intents.dim()) +
                             " differs from the encoder's user dim " +
                             std::to_string(encoder.user_dim()));
    }
    cfg.validate();
    const auto data = build_training_data(split, catalog, encoder, text, cfg);
    auto model = LatentModel::create(cfg.dims, intents, cfg.seed, cfg.trainable_intents);
    auto trained = run_training(data, std::move(model), cfg);

    ModelBundle bundle;
    bundle.encoder = encoder;
    bundle.latent = trained.model;
    bundle.population_behavior = data.population_behavior;
    bundle.text_provider = text.provider_id();
    bundle.config_fingerprint = cfg.fingerprint();
    if (result) *result = std::move(trained);
    return bundle;
}

PipelineArtifacts run_pipeline(const Split& split, const Catalog& catalog,
                               const embed::TextEncoder& text, const PipelineConfig& cfg) {
    std::vector<ItemId> ids;
    ids.reserve(catalog.size());
    for (const auto& item : catalog.items()) ids.push_back(item.id);

    PipelineArtifacts out;
    auto pre = pretrain_encoder(split.train, ids, cfg.encoder);
    out.encoder_loss = std::move(pre.loss_history);
    const auto points = user_embeddings(split, pre.encoder, &out.kmeans_users);
    out.kmeans = fit_kmeans(points, cfg.train.num_intents, cfg.train.seed, cfg.kmeans_max_iters, 1e-6,
                            cfg.kmeans_restarts);

    TrainResult trained;
    out.bundle = std::make_shared<ModelBundle>(
        train_bundle(split, catalog, pre.encoder, out.kmeans.space, text, cfg.train, &trained));
    out.history = std::move(trained.history);
    out.audits = std::move(trained.audits);
    return out;
}

}  // namespace crs

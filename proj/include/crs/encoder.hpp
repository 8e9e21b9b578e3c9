#pragma once

// Collaborative backbone: item embedding table, decayed mean-pooling of a
// behaviour sequence and a one-hidden-layer FFN producing the user behaviour
// embedding. Pretrained with a sampled-softmax next-item objective.

#include "crs/binary_io.hpp"
#include "crs/corpus.hpp"
#include "crs/neural.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace crs {

using nn::Matrix;
using nn::Vector;

struct EncoderConfig {
    int item_dim = 64;
    int user_dim = 64;
    std::vector<int> hidden{64};
    nn::Activation activation = nn::Activation::tanh;
    double decay = 0.8;
    int negatives = 64;
    int epochs = 10;
    double lr = 1e-3;
    int batch_size = 64;
    /// Only the most recent `max_context` items are pooled.
    int max_context = 50;
    std::uint64_t seed = 1;
};

class BehaviorEncoder {
public:
    BehaviorEncoder() = default;
    /// Uniform(-0.05, 0.05) initialisation over `item_ids` (catalog order).
    BehaviorEncoder(std::vector<ItemId> item_ids, const EncoderConfig& cfg);

    int item_dim() const { return static_cast<int>(items().cols()); }
    int user_dim() const { return ffn_.spec().output_dim; }
    double decay() const { return decay_; }
    int max_context() const { return max_context_; }
    std::size_t num_items() const { return ids_.size(); }
    const std::vector<ItemId>& item_ids() const { return ids_; }
    std::size_t index_of(std::string_view id) const;  // throws LookupError

    /// |V| x d_v table; row i is item i.
    const Matrix& items() const { return store_[items_idx_].value; }
    Vector item_embedding(std::string_view id) const;

    /// FFN(sum_t w_t v_t / sum_t w_t) with w_t = decay^(L-1-t), over the last
    /// max_context entries.
    Vector encode(std::span<const std::size_t> seq) const;
    Vector encode_ids(std::span<const ItemId> seq) const;

    nn::ParamStore& params() { return store_; }
    const nn::ParamStore& params() const { return store_; }
    const nn::FeedForward& ffn() const { return ffn_; }
    std::size_t items_param() const { return items_idx_; }
    std::size_t scorer_param() const { return scorer_idx_; }

    void save(const std::string& path) const;
    static BehaviorEncoder load(const std::string& path);
    /// Writes the encoder body into an open checkpoint stream.
    void write_to(io::BinaryWriter& w) const;
    static BehaviorEncoder read_from(io::BinaryReader& r);

private:
    std::vector<ItemId> ids_;
    std::unordered_map<std::string, std::size_t> index_;
    nn::ParamStore store_;
    nn::FeedForward ffn_;
    std::size_t items_idx_ = 0;
    std::size_t scorer_idx_ = 0;  // W_p: d_u x d_v
    double decay_ = 0.8;
    int max_context_ = 50;
};

struct PretrainInstance {
    std::vector<std::size_t> context;
    std::size_t target = 0;
    std::vector<std::size_t> negatives;
};

/// Mean sampled-softmax loss; accumulates gradients into encoder.params()
/// when `accumulate` is set.
double pretrain_loss(BehaviorEncoder& encoder, std::span<const PretrainInstance> batch,
                     bool accumulate);

/// Every next-item position (t >= 1) of every training sequence.
std::vector<PretrainInstance> pretrain_instances(const std::map<UserId, std::vector<ItemId>>& train,
                                                 const BehaviorEncoder& encoder, int max_context);

struct PretrainResult {
    BehaviorEncoder encoder;
    std::vector<double> loss_history;  // per epoch mean
};

PretrainResult pretrain_encoder(const std::map<UserId, std::vector<ItemId>>& train,
                                const std::vector<ItemId>& item_ids, const EncoderConfig& cfg);

}  // namespace crs

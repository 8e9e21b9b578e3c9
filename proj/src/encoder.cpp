#include "crs/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace crs {

namespace {

constexpr std::string_view kEncoderMagic = "CRSE";
constexpr std::uint32_t kEncoderVersion = 1;

struct Pooled {
    Vector vector;
    std::vector<double> weights;  // normalised, aligned with the used suffix
    std::size_t offset = 0;       // first pooled position in the sequence
};

Pooled pool(const Matrix& table, std::span<const std::size_t> seq, double decay, int max_context) {
    if (seq.empty()) throw std::invalid_argument("cannot encode an empty sequence");
    Pooled p;
    const std::size_t L = seq.size();
    p.offset = max_context > 0 && L > static_cast<std::size_t>(max_context)
                   ? L - static_cast<std::size_t>(max_context)
                   : 0;
    p.vector = Vector::Zero(table.cols());
    double total = 0.0;
    for (std::size_t t = p.offset; t < L; ++t) {
        const double w = std::pow(decay, static_cast<double>(L - 1 - t));
        p.weights.push_back(w);
        total += w;
    }
    for (std::size_t t = p.offset; t < L; ++t) {
        if (seq[t] >= static_cast<std::size_t>(table.rows())) {
            throw LookupError("item index " + std::to_string(seq[t]) + " outside embedding table");
        }
        auto& w = p.weights[t - p.offset];
        w /= total;
        p.vector.noalias() += w * table.row(static_cast<Eigen::Index>(seq[t])).transpose();
    }
    return p;
}

}  // namespace

BehaviorEncoder::BehaviorEncoder(std::vector<ItemId> item_ids, const EncoderConfig& cfg)
    : ids_(std::move(item_ids)), decay_(cfg.decay), max_context_(cfg.max_context) {
    if (ids_.empty()) throw std::invalid_argument("encoder needs a non-empty item list");
    if (!(cfg.decay > 0.0 && cfg.decay <= 1.0)) {
        throw std::invalid_argument("encoder decay must lie in (0, 1]");
    }
    for (std::size_t i = 0; i < ids_.size(); ++i) {
        if (!index_.emplace(ids_[i], i).second) {
            throw std::invalid_argument("duplicate item id '" + ids_[i] + "'");
        }
    }
    items_idx_ = store_.add("items", static_cast<Eigen::Index>(ids_.size()), cfg.item_dim);
    ffn_ = nn::FeedForward({cfg.item_dim, cfg.hidden, cfg.user_dim, cfg.activation}, store_, "ffn");
    scorer_idx_ = store_.add("scorer", cfg.user_dim, cfg.item_dim);
    std::mt19937_64 rng(cfg.seed);
    nn::init_uniform(store_, -0.05, 0.05, rng);
}

std::size_t BehaviorEncoder::index_of(std::string_view id) const {
    auto it = index_.find(std::string(id));
    if (it == index_.end()) throw LookupError("item '" + std::string(id) + "' not in encoder");
    return it->second;
}

Vector BehaviorEncoder::item_embedding(std::string_view id) const {
    return items().row(static_cast<Eigen::Index>(index_of(id))).transpose();
}

Vector BehaviorEncoder::encode(std::span<const std::size_t> seq) const {
    return ffn_.forward(store_, pool(items(), seq, decay_, max_context_).vector);
}

Vector BehaviorEncoder::encode_ids(std::span<const ItemId> seq) const {
    std::vector<std::size_t> idx;
    idx.reserve(seq.size());
    for (const auto& id : seq) idx.push_back(index_of(id));
    return encode(idx);
}

void BehaviorEncoder::write_to(io::BinaryWriter& w) const {
    w.f64(decay_);
    w.i64(max_context_);
    const auto& spec = ffn_.spec();
    w.i64(spec.input_dim);
    w.i64(spec.output_dim);
    w.str(nn::to_string(spec.activation));
    w.u64(spec.hidden.size());
    for (int h : spec.hidden) w.i64(h);
    w.u64(ids_.size());
    for (const auto& id : ids_) w.str(id);
    w.params(store_);
}

BehaviorEncoder BehaviorEncoder::read_from(io::BinaryReader& r) {
    BehaviorEncoder enc;
    enc.decay_ = r.f64();
    enc.max_context_ = static_cast<int>(r.i64());
    nn::FFNSpec spec;
    spec.input_dim = static_cast<int>(r.i64());
    spec.output_dim = static_cast<int>(r.i64());
    spec.activation = nn::parse_activation(r.str());
    const auto nh = r.u64();
    for (std::uint64_t i = 0; i < nh; ++i) spec.hidden.push_back(static_cast<int>(r.i64()));
    const auto n = r.u64();
    for (std::uint64_t i = 0; i < n; ++i) {
        enc.ids_.push_back(r.str());
        enc.index_.emplace(enc.ids_.back(), i);
    }
    enc.store_ = r.params();
    enc.items_idx_ = enc.store_.index_of("items");
    enc.scorer_idx_ = enc.store_.index_of("scorer");
    enc.ffn_ = nn::FeedForward::bind(spec, enc.store_, "ffn");
    if (enc.items().rows() != static_cast<Eigen::Index>(n)) {
        throw io::FormatError("encoder item table does not match its id list");
    }
    return enc;
}

void BehaviorEncoder::save(const std::string& path) const {
    io::BinaryWriter w(path, kEncoderMagic, kEncoderVersion);
    write_to(w);
    w.close();
}

BehaviorEncoder BehaviorEncoder::load(const std::string& path) {
    io::BinaryReader r(path, kEncoderMagic, kEncoderVersion);
    return read_from(r);
}

double pretrain_loss(BehaviorEncoder& encoder, std::span<const PretrainInstance> batch,
                     bool accumulate) {
    if (batch.empty()) return 0.0;
    auto& store = encoder.params();
    const Matrix& table = encoder.items();
    const Matrix& scorer = store[encoder.scorer_param()].value;
    const double scale = 1.0 / static_cast<double>(batch.size());
    double total = 0.0;
    for (const auto& inst : batch) {
        const auto pooled = pool(table, inst.context, encoder.decay(), encoder.max_context());
        nn::FeedForward::Cache cache;
        const Vector user = encoder.ffn().forward(store, pooled.vector, &cache);
        const Vector query = scorer.transpose() * user;  // d_v

        const std::size_t n = inst.negatives.size() + 1;
        Vector logits(static_cast<Eigen::Index>(n));
        auto candidate = [&](std::size_t k) { return k == 0 ? inst.target : inst.negatives[k - 1]; };
        for (std::size_t k = 0; k < n; ++k) {
            logits[static_cast<Eigen::Index>(k)] =
                table.row(static_cast<Eigen::Index>(candidate(k))).dot(query);
        }
        const double lse = nn::logsumexp(logits);
        const double loss = lse - logits[0];
        if (!std::isfinite(loss)) {
            throw nn::NumericError("non-finite pretraining loss (target " +
                                   std::to_string(inst.target) + ")");
        }
        total += loss;
        if (!accumulate) continue;

        Vector dlogits = (logits.array() - lse).exp().matrix();
        dlogits[0] -= 1.0;
        dlogits *= scale;
        Matrix& dtable = store[encoder.items_param()].grad;
        Vector dquery = Vector::Zero(query.size());
        for (std::size_t k = 0; k < n; ++k) {
            const auto row = static_cast<Eigen::Index>(candidate(k));
            const double g = dlogits[static_cast<Eigen::Index>(k)];
            dquery.noalias() += g * table.row(row).transpose();
            dtable.row(row).noalias() += g * query.transpose();
        }
        store[encoder.scorer_param()].grad.noalias() += user * dquery.transpose();
        const Vector duser = scorer * dquery;
        const Vector dpooled = encoder.ffn().backward(store, cache, duser);
        for (std::size_t t = pooled.offset; t < inst.context.size(); ++t) {
            dtable.row(static_cast<Eigen::Index>(inst.context[t])).noalias() +=
                pooled.weights[t - pooled.offset] * dpooled.transpose();
        }
    }
    return total * scale;
}

std::vector<PretrainInstance> pretrain_instances(const std::map<UserId, std::vector<ItemId>>& train,
                                                 const BehaviorEncoder& encoder, int max_context) {
    std::vector<PretrainInstance> out;
    for (const auto& [user, items] : train) {
        std::vector<std::size_t> idx;
        for (const auto& id : items) idx.push_back(encoder.index_of(id));
        for (std::size_t t = 1; t < idx.size(); ++t) {
            const std::size_t start =
                max_context > 0 && t > static_cast<std::size_t>(max_context) ? t - max_context : 0;
            out.push_back({std::vector<std::size_t>(idx.begin() + static_cast<std::ptrdiff_t>(start),
                                                    idx.begin() + static_cast<std::ptrdiff_t>(t)),
                           idx[t],
                           {}});
        }
    }
    return out;
}

PretrainResult pretrain_encoder(const std::map<UserId, std::vector<ItemId>>& train,
                                const std::vector<ItemId>& item_ids, const EncoderConfig& cfg) {
    if (train.empty()) throw EmptyDatasetError("pretraining needs a non-empty train split");
    PretrainResult result{BehaviorEncoder(item_ids, cfg), {}};
    auto& enc = result.encoder;
    auto instances = pretrain_instances(train, enc, cfg.max_context);
    if (instances.empty() || cfg.epochs <= 0) return result;

    const std::size_t V = enc.num_items();
    const std::size_t n_neg = std::min<std::size_t>(static_cast<std::size_t>(std::max(cfg.negatives, 1)), V - 1);
    const nn::AdamConfig adam{cfg.lr};
    std::vector<std::size_t> order(instances.size());
    std::vector<std::size_t> pool_ids(V);
    const std::size_t bs = static_cast<std::size_t>(std::max(cfg.batch_size, 1));

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::mt19937_64 rng(cfg.seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(epoch) + 1);
        for (auto& inst : instances) {
            std::iota(pool_ids.begin(), pool_ids.end(), 0);
            std::swap(pool_ids[inst.target], pool_ids[V - 1]);
            inst.negatives.clear();
            for (std::size_t k = 0; k < n_neg; ++k) {
                std::uniform_int_distribution<std::size_t> pick(k, V - 2);
                std::swap(pool_ids[k], pool_ids[pick(rng)]);
                inst.negatives.push_back(pool_ids[k]);
            }
        }
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        std::vector<PretrainInstance> batch;
        for (std::size_t b = 0; b < order.size(); b += bs) {
            batch.clear();
            for (std::size_t i = b; i < std::min(order.size(), b + bs); ++i) {
                batch.push_back(instances[order[i]]);
            }
            enc.params().zero_grad();
            const double loss = pretrain_loss(enc, batch, true);
            nn::adam_step(enc.params(), adam);
            epoch_loss += loss * static_cast<double>(batch.size());
        }
        result.loss_history.push_back(epoch_loss / static_cast<double>(instances.size()));
    }
    return result;
}

}  // namespace crs

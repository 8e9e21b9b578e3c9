#include "crs/em_trainer.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <sstream>

namespace crs {

using nn::Matrix;
using nn::Vector;

TrainingVariant parse_training_variant(std::string_view s) {
    if (s == "full") return TrainingVariant::full;
    if (s == "no_inference_model" || s == "no-inference-model") {
        return TrainingVariant::no_inference_model;
    }
    if (s == "direct_kl" || s == "direct-kl") return TrainingVariant::direct_kl;
    throw std::invalid_argument("unknown training variant '" + std::string(s) + "'");
}

std::string_view to_string(TrainingVariant v) {
    switch (v) {
        case TrainingVariant::full: return "full";
        case TrainingVariant::no_inference_model: return "no_inference_model";
        case TrainingVariant::direct_kl: return "direct_kl";
    }
    return "full";
}

void TrainConfig::validate() const {
    if (lambda < 0 || alpha_m < 0 || alpha_e < 0) {
        throw ConfigError("lambda, alpha_m and alpha_e must be non-negative");
    }
    if (negatives < 1) throw ConfigError("negatives must be >= 1");
    if (num_intents < 1) throw ConfigError("num_intents must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(tau > 0)) throw ConfigError("tau must be positive");
    if (eval_k < 1) throw ConfigError("eval_k must be >= 1");
    for (const auto* s : {&stage1, &stage2, &stage3}) {
        if (s->max_epochs < 0 || !(s->lr > 0)) throw ConfigError("bad stage schedule");
    }
}

std::string TrainConfig::fingerprint() const {
    std::ostringstream os;
    os.precision(17);
    os << "K=" << num_intents << ";lambda=" << lambda << ";alpha_m=" << alpha_m
       << ";alpha_e=" << alpha_e << ";tau=" << tau << ";n=" << negatives << ";batch=" << batch_size
       << ";s1=" << stage1.max_epochs << "@" << stage1.lr << ";s2=" << stage2.max_epochs << "@"
       << stage2.lr << ";s3=" << stage3.max_epochs << "@" << stage3.lr << ";patience=" << patience
       << ";eval_k=" << eval_k << ";augment=" << augment_factor << "/" << augment_min_len
       << ";frozen_neg=" << frozen_negatives << ";trainable_intents=" << trainable_intents
       << ";variant=" << to_string(variant) << ";seed=" << seed << ";dims=" << dims.behavior << ","
       << dims.text << "," << dims.item << "," << dims.attention << "," << dims.proj << ","
       << dims.context << "," << dims.bilinear << ",h";
    for (int h : dims.hidden) os << h << ".";
    os << "," << nn::to_string(dims.activation);
    return os.str();
}

std::vector<std::size_t> sample_negatives(std::size_t target, std::span<const std::size_t> history,
                                          std::size_t num_items, std::size_t n,
                                          std::mt19937_64& rng) {
    std::vector<std::size_t> eligible;
    eligible.reserve(num_items);
    for (std::size_t i = 0; i < num_items; ++i) {
        if (i == target) continue;
        if (std::binary_search(history.begin(), history.end(), i)) continue;
        eligible.push_back(i);
    }
    if (eligible.size() < n) {
        throw std::invalid_argument("only " + std::to_string(eligible.size()) +
                                    " eligible negatives, " + std::to_string(n) + " requested");
    }
    for (std::size_t k = 0; k < n; ++k) {
        std::uniform_int_distribution<std::size_t> pick(k, eligible.size() - 1);
        std::swap(eligible[k], eligible[pick(rng)]);
    }
    eligible.resize(n);
    return eligible;
}

std::uint64_t negative_seed(std::uint64_t seed, std::size_t user, std::size_t target, int epoch) {
    std::uint64_t h = seed ^ 0x9E3779B97F4A7C15ULL;
    for (std::uint64_t v : {static_cast<std::uint64_t>(user), static_cast<std::uint64_t>(target),
                            static_cast<std::uint64_t>(epoch)}) {
        h ^= v + 0x9E3779B97F4A7C15ULL + (h << 6) + (h >> 2);
        h *= 0xBF58476D1CE4E5B9ULL;
        h ^= h >> 31;
    }
    return h;
}

double kl_divergence(const Vector& q, const Vector& p) {
    if (q.size() != p.size()) throw nn::ShapeError("KL between distributions of different size");
    double kl = 0.0;
    for (Eigen::Index j = 0; j < q.size(); ++j) {
        if (q[j] > 0.0) kl += q[j] * (std::log(q[j]) - std::log(p[j]));
    }
    return kl;
}

namespace {

void require_finite(double v, const char* what, std::size_t batch_size) {
    if (!std::isfinite(v)) {
        throw nn::NumericError(std::string("non-finite ") + what + " over a batch of " +
                               std::to_string(batch_size));
    }
}

std::size_t candidate_at(const TrainInstance& inst, std::size_t k) {
    return k == 0 ? inst.target : inst.negatives[k - 1];
}

Vector item_row(const Matrix& items, std::size_t idx) {
    return items.row(static_cast<Eigen::Index>(idx)).transpose();
}

}  // namespace

LossTerms m_step_loss(std::span<const TrainInstance> batch, LatentModel& model, const Matrix& items,
                      const MWeights& w, bool accumulate) {
    LossTerms terms;
    if (batch.empty()) return terms;
    auto& gen = model.generative;
    auto& store = gen.store;
    const auto proj = project_intents(model);
    const Matrix& Wv = store[gen.wv].value;
    const Matrix& M = model.intent_matrix();
    const int K = model.num_intents();
    const double scale = 1.0 / static_cast<double>(batch.size());
    const double tau = model.tau;

    Matrix d_context_keys = Matrix::Zero(proj.context_keys.rows(), K);
    Matrix d_item_keys = Matrix::Zero(proj.item_keys.rows(), K);
    // q also reads the centroids, so trainable intents get a gradient through
    // the attention keys even though W_q and W_k stay fixed here.
    Matrix d_attention_keys = Matrix::Zero(proj.attention_keys.rows(), K);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(model.dims.behavior));

    for (const auto& inst : batch) {
        const Vector q = nn::softmax(inference_logits(inst.behavior, model, proj));
        Vector dq = Vector::Zero(K);
        const auto ctx = generative_context(inst.behavior, inst.text, model, proj);
        const std::size_t n = inst.negatives.size() + 1;

        std::vector<Vector> wv(n);
        Matrix A(K, static_cast<Eigen::Index>(n));  // a_j(v_k)
        for (std::size_t k = 0; k < n; ++k) {
            wv[k] = Wv * item_row(items, candidate_at(inst, k));
            A.col(static_cast<Eigen::Index>(k)) = proj.item_keys.transpose() * wv[k];
        }
        const Matrix G = ctx.b.asDiagonal() * A;  // g_j(v_k)

        // infoNCE: sum_j q_j (lse_k G_jk - G_j0)
        Matrix dG = Matrix::Zero(K, static_cast<Eigen::Index>(n));
        double nce = 0.0;
        for (int j = 0; j < K; ++j) {
            const Vector row = G.row(j).transpose();
            const double lse = nn::logsumexp(row);
            nce += q[j] * (lse - row[0]);
            dq[j] += w.infonce * (lse - row[0]);
            if (accumulate && w.infonce != 0.0) {
                Vector pi = (row.array() - lse).exp().matrix();
                pi[0] -= 1.0;
                dG.row(j) += w.infonce * q[j] * pi.transpose();
            }
        }

        // KL(q || f)
        const double kl = kl_divergence(q, ctx.f);
        Vector db = Vector::Zero(K);
        if (accumulate && w.kl != 0.0) {
            db += w.kl * (ctx.f - q);
            dq += w.kl * (q.array().log() - ctx.logf.array()).matrix();
        }

        // Recommendation loss over s(v) = log sum_j f_j exp(tau g_j(v)).
        Vector s(static_cast<Eigen::Index>(n));
        Matrix rho(K, static_cast<Eigen::Index>(n));
        for (std::size_t k = 0; k < n; ++k) {
            const Vector inner = ctx.logf + tau * G.col(static_cast<Eigen::Index>(k));
            const double lse = nn::logsumexp(inner);
            s[static_cast<Eigen::Index>(k)] = lse;
            rho.col(static_cast<Eigen::Index>(k)) = (inner.array() - lse).exp().matrix();
        }
        const double s_lse = nn::logsumexp(s);
        const double rec = s_lse - s[0];
        if (accumulate && w.rec != 0.0) {
            Vector ds = (s.array() - s_lse).exp().matrix();
            ds[0] -= 1.0;
            ds *= w.rec;
            dG += tau * rho * ds.asDiagonal();
            const Vector dlogf = rho * ds;
            db += dlogf - ctx.f * dlogf.sum();
        }

        terms.infonce += nce;
        terms.kl += kl;
        terms.m_rec += rec;
        if (!accumulate) continue;

        // g_j(v_k) = A_jk * b_j
        db += (dG.cwiseProduct(A)).rowwise().sum();
        const Matrix dA = ctx.b.asDiagonal() * dG;
        Matrix& dWv = store[gen.wv].grad;
        for (std::size_t k = 0; k < n; ++k) {
            const Vector da = dA.col(static_cast<Eigen::Index>(k)) * scale;
            d_item_keys.noalias() += wv[k] * da.transpose();
            const Vector dwv = proj.item_keys * da;
            dWv.noalias() += dwv * item_row(items, candidate_at(inst, k)).transpose();
        }
        const Vector dbs = db * scale;
        d_context_keys.noalias() += ctx.c * dbs.transpose();
        const Vector dc = proj.context_keys * dbs;
        const Vector dinput = gen.ffn.backward(store, ctx.cache, dc);
        const auto p = model.dims.proj;
        store[gen.ps].grad.noalias() += dinput.head(p) * inst.behavior.transpose();
        store[gen.px].grad.noalias() += dinput.tail(p) * inst.text.transpose();
        store[gen.bx].grad.col(0) += dinput.tail(p);
        if (gen.intents) {
            const Vector dz = q.cwiseProduct((dq.array() - q.dot(dq)).matrix()) * (scale * inv_sqrt);
            d_attention_keys.noalias() += (model.inference.W_q() * inst.behavior) * dz.transpose();
        }
    }

    terms.infonce *= scale;
    terms.kl *= scale;
    terms.m_rec *= scale;
    terms.total = w.infonce * terms.infonce + w.kl * terms.kl + w.rec * terms.m_rec;
    require_finite(terms.total, "recommendation-step loss", batch.size());

    if (accumulate) {
        store[gen.wm].grad.noalias() += d_context_keys * M;
        store[gen.wj].grad.noalias() += d_item_keys * M;
        if (gen.intents) {
            store[*gen.intents].grad.noalias() += d_context_keys.transpose() * store[gen.wm].value +
                                                  d_item_keys.transpose() * store[gen.wj].value +
                                                  d_attention_keys.transpose() * model.inference.W_k();
        }
    }
    return terms;
}

LossTerms e_step_loss(std::span<const TrainInstance> batch, LatentModel& model, const Matrix& items,
                      const EWeights& w, bool accumulate) {
    LossTerms terms;
    if (batch.empty()) return terms;
    auto& inf = model.inference;
    const auto proj = project_intents(model);
    const Matrix& M = model.intent_matrix();
    const Matrix& Wv = model.generative.store[model.generative.wv].value;
    const Matrix& We = inf.W_e();
    const double scale = 1.0 / static_cast<double>(batch.size());
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(model.dims.behavior));
    Matrix d_keys = Matrix::Zero(proj.attention_keys.rows(), proj.attention_keys.cols());

    for (const auto& inst : batch) {
        const Vector query = inf.W_q() * inst.behavior;
        const Vector z = proj.attention_keys.transpose() * query * inv_sqrt;
        const Vector logq = nn::log_softmax(z);
        const Vector q = logq.array().exp().matrix();

        // Posterior from the frozen generative model at the target item.
        const auto ctx = generative_context(inst.behavior, inst.text, model, proj);
        const Vector a = proj.item_keys.transpose() * (Wv * item_row(items, inst.target));
        const Vector g = a.cwiseProduct(ctx.b);
        const Vector logpost = nn::log_softmax(ctx.logf + model.tau * g);
        const double elbo = q.dot(logq - logpost);

        // Attention-pooled intent and contrastive head.
        const Vector r = M.transpose() * q;
        const Vector rW = We.transpose() * r;  // d_v
        const std::size_t n = inst.negatives.size() + 1;
        Vector e(static_cast<Eigen::Index>(n));
        for (std::size_t k = 0; k < n; ++k) {
            e[static_cast<Eigen::Index>(k)] = items.row(static_cast<Eigen::Index>(candidate_at(inst, k))).dot(rW);
        }
        const double e_lse = nn::logsumexp(e);
        const double rec = e_lse - e[0];

        terms.elbo += elbo;
        terms.e_rec += rec;
        if (!accumulate) continue;

        Vector dz = Vector::Zero(z.size());
        if (w.elbo != 0.0) {
            dz += w.elbo * q.cwiseProduct((logq - logpost).array().matrix() - Vector::Constant(q.size(), elbo));
        }
        if (w.rec != 0.0) {
            Vector de = (e.array() - e_lse).exp().matrix();
            de[0] -= 1.0;
            de *= w.rec;
            Vector v_sum = Vector::Zero(items.cols());
            for (std::size_t k = 0; k < n; ++k) {
                v_sum.noalias() += de[static_cast<Eigen::Index>(k)] * item_row(items, candidate_at(inst, k));
            }
            inf.store[inf.we].grad.noalias() += scale * r * v_sum.transpose();
            const Vector dr = We * v_sum;
            const Vector dq = M * dr;
            dz += q.cwiseProduct((dq.array() - q.dot(dq)).matrix());
        }
        dz *= scale;
        const Vector dquery = proj.attention_keys * dz * inv_sqrt;
        d_keys.noalias() += query * dz.transpose() * inv_sqrt;
        inf.store[inf.wq].grad.noalias() += dquery * inst.behavior.transpose();
    }

    terms.elbo *= scale;
    terms.e_rec *= scale;
    terms.total = w.elbo * terms.elbo + w.rec * terms.e_rec;
    require_finite(terms.total, "intent-inference-step loss", batch.size());
    if (accumulate) inf.store[inf.wk].grad.noalias() += d_keys * M;
    return terms;
}

double loss_infonce(std::span<const TrainInstance> batch, LatentModel& model, const Matrix& items,
                    bool accumulate) {
    return m_step_loss(batch, model, items, {1.0, 0.0, 0.0}, accumulate).infonce;
}

double loss_m_kl(std::span<const TrainInstance> batch, LatentModel& model, const Matrix& items,
                 bool accumulate) {
    return m_step_loss(batch, model, items, {0.0, 1.0, 0.0}, accumulate).kl;
}

double loss_m_rec(std::span<const TrainInstance> batch, LatentModel& model, const Matrix& items,
                  bool accumulate) {
    return m_step_loss(batch, model, items, {0.0, 0.0, 1.0}, accumulate).m_rec;
}

LossTerms loss_m_total(std::span<const TrainInstance> batch, LatentModel& model,
                       const Matrix& items, const TrainConfig& cfg, bool accumulate) {
    return m_step_loss(batch, model, items, {1.0, cfg.lambda, cfg.alpha_m}, accumulate);
}

double loss_e_elbo(std::span<const TrainInstance> batch, LatentModel& model, const Matrix& items,
                   bool accumulate) {
    return e_step_loss(batch, model, items, {1.0, 0.0}, accumulate).elbo;
}

double loss_e_rec(std::span<const TrainInstance> batch, LatentModel& model, const Matrix& items,
                  bool accumulate) {
    return e_step_loss(batch, model, items, {0.0, 1.0}, accumulate).e_rec;
}

LossTerms loss_e_total(std::span<const TrainInstance> batch, LatentModel& model,
                       const Matrix& items, const TrainConfig& cfg, bool accumulate) {
    return e_step_loss(batch, model, items, {1.0, cfg.alpha_e}, accumulate);
}

TrainingData build_training_data(const Split& split, const Catalog& catalog,
                                 const BehaviorEncoder& encoder, const embed::TextEncoder& text,
                                 const TrainConfig& cfg) {
    if (encoder.num_items() != catalog.size()) {
        throw std::invalid_argument("encoder and catalog disagree on the item set");
    }
    TrainingData data;
    data.item_table = encoder.items();
    std::map<UserId, std::size_t> user_index;
    for (const auto& [user, items] : split.train) {
        user_index.emplace(user, data.users.size());
        data.users.push_back(user);
        std::vector<std::size_t> hist;
        for (const auto& id : items) hist.push_back(catalog.index_of(id));
        std::sort(hist.begin(), hist.end());
        hist.erase(std::unique(hist.begin(), hist.end()), hist.end());
        data.user_history.push_back(std::move(hist));
    }
    if (data.users.empty()) throw EmptyDatasetError("train split is empty");

    std::vector<std::optional<Vector>> item_text(catalog.size());
    auto text_of = [&](std::size_t item) -> const Vector& {
        if (!item_text[item]) {
            item_text[item] = text.embed(soft_description(catalog.item(item), catalog)).vector;
        }
        return *item_text[item];
    };
    auto to_indices = [&](const std::vector<ItemId>& ids) {
        std::vector<std::size_t> out;
        out.reserve(ids.size());
        for (const auto& id : ids) out.push_back(catalog.index_of(id));
        return out;
    };

    data.population_behavior = Vector::Zero(encoder.user_dim());
    for (const auto& [user, items] : split.train) {
        data.population_behavior += encoder.encode(to_indices(items));
    }
    data.population_behavior /= static_cast<double>(split.train.size());

    const auto segments =
        augment_sequences(split.train, cfg.augment_factor, cfg.augment_min_len, cfg.seed);
    for (const auto& seg : segments) {
        if (seg.items.size() < 2) continue;
        TrainInstance inst;
        inst.user = user_index.at(seg.user);
        auto idx = to_indices(seg.items);
        inst.target = idx.back();
        idx.pop_back();
        inst.context = std::move(idx);
        inst.behavior = encoder.encode(inst.context);
        inst.text = text_of(inst.target);
        data.train.push_back(std::move(inst));
    }
    for (const auto& [user, valid_item] : split.valid) {
        TrainInstance inst;
        inst.user = user_index.at(user);
        inst.context = to_indices(split.train.at(user));
        inst.target = catalog.index_of(valid_item);
        inst.behavior = encoder.encode(inst.context);
        inst.text = text_of(inst.target);
        data.valid.push_back(std::move(inst));
    }
    if (data.train.empty()) throw EmptyDatasetError("no training instances (sequences too short)");
    return data;
}

std::pair<double, double> validation_metrics(const TrainingData& data, const LatentModel& model,
                                             int k, bool inference_head) {
    if (data.valid.empty()) return {0.0, 0.0};
    const auto V = static_cast<std::size_t>(data.item_table.rows());
    std::vector<std::size_t> all(V);
    std::iota(all.begin(), all.end(), 0);
    const auto proj = project_intents(model);
    double ndcg = 0.0, recall = 0.0;
    for (const auto& inst : data.valid) {
        Vector scores;
        if (inference_head) {
            const Vector q = nn::softmax(inference_logits(inst.behavior, model, proj));
            const Vector r = model.intent_matrix().transpose() * q;
            scores = data.item_table * (model.inference.W_e().transpose() * r);
        } else {
            const auto s = score_items(inst.behavior, inst.text, data.item_table, all,
                                       RankMode::full, model);
            scores = Eigen::Map<const Vector>(s.data(), static_cast<Eigen::Index>(s.size()));
        }
        // 1-based rank with ties resolved by ascending index.
        const double target_score = scores[static_cast<Eigen::Index>(inst.target)];
        std::size_t rank = 1;
        for (std::size_t i = 0; i < V; ++i) {
            const double s = scores[static_cast<Eigen::Index>(i)];
            if (s > target_score || (s == target_score && i < inst.target)) ++rank;
        }
        if (rank <= static_cast<std::size_t>(k)) {
            recall += 1.0;
            ndcg += 1.0 / std::log2(static_cast<double>(rank) + 1.0);
        }
    }
    const double n = static_cast<double>(data.valid.size());
    return {ndcg / n, recall / n};
}

namespace {

class Trainer {
public:
    Trainer(const TrainingData& data, LatentModel model, const TrainConfig& cfg)
        : data_(data), cfg_(cfg) {
        result_.model = std::move(model);
        result_.model.tau = cfg.tau;
        instances_ = data.train;
    }

    TrainResult run() {
        switch (cfg_.variant) {
            case TrainingVariant::full:
                stage_inference_warmup();
                stage_generative_warmup(cfg_.stage2.max_epochs, {1.0, cfg_.lambda, cfg_.alpha_m});
                stage_alternating();
                break;
            case TrainingVariant::no_inference_model:
                stage_generative_warmup(
                    cfg_.stage2.max_epochs + cfg_.stage3.max_epochs, {0.0, 0.0, 1.0});
                break;
            case TrainingVariant::direct_kl:
                stage_joint(cfg_.stage1.max_epochs + cfg_.stage2.max_epochs + cfg_.stage3.max_epochs);
                break;
        }
        return std::move(result_);
    }

private:
    LatentModel& model() { return result_.model; }

    void refresh_negatives() {
        const int epoch = cfg_.frozen_negatives ? 0 : epoch_counter_;
        ++epoch_counter_;
        if (cfg_.frozen_negatives && negatives_ready_) return;
        const auto V = static_cast<std::size_t>(data_.item_table.rows());
        for (auto& inst : instances_) {
            std::mt19937_64 rng(negative_seed(cfg_.seed, inst.user, inst.target, epoch));
            const auto& hist = data_.user_history[inst.user];
            const std::size_t eligible = V - 1 - static_cast<std::size_t>(std::count_if(
                hist.begin(), hist.end(), [&](std::size_t i) { return i != inst.target; }));
            const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(cfg_.negatives), eligible);
            inst.negatives = sample_negatives(inst.target, hist, V, n, rng);
        }
        negatives_ready_ = true;
    }

    std::vector<std::vector<std::size_t>> batches() {
        std::vector<std::size_t> order(instances_.size());
        std::iota(order.begin(), order.end(), 0);
        std::mt19937_64 rng(negative_seed(cfg_.seed, 0x5eed, 0, shuffle_counter_++));
        std::shuffle(order.begin(), order.end(), rng);
        std::vector<std::vector<std::size_t>> out;
        const auto bs = static_cast<std::size_t>(cfg_.batch_size);
        for (std::size_t b = 0; b < order.size(); b += bs) {
            out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                             order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), b + bs)));
        }
        return out;
    }

    std::vector<TrainInstance> gather(const std::vector<std::size_t>& ids) const {
        std::vector<TrainInstance> batch;
        batch.reserve(ids.size());
        for (auto i : ids) batch.push_back(instances_[i]);
        return batch;
    }

    StepAudit audit_begin(int stage, int epoch, std::string step) {
        StepAudit a;
        a.stage = stage;
        a.epoch = epoch;
        a.step = std::move(step);
        a.inference_before = model().inference.store.fingerprint();
        a.generative_before = model().generative.store.fingerprint();
        return a;
    }

    void audit_end(StepAudit a) {
        a.inference_after = model().inference.store.fingerprint();
        a.generative_after = model().generative.store.fingerprint();
        result_.audits.push_back(a);
    }

    LossTerms m_epoch(const MWeights& w, double lr) {
        refresh_negatives();
        LossTerms sum;
        for (const auto& ids : batches()) {
            const auto batch = gather(ids);
            model().generative.store.zero_grad();
            const auto t = m_step_loss(batch, model(), data_.item_table, w, true);
            nn::adam_step(model().generative.store, {lr});
            accumulate(sum, t, batch.size());
        }
        return finish(sum);
    }

    LossTerms e_epoch(const EWeights& w, double lr) {
        refresh_negatives();
        LossTerms sum;
        for (const auto& ids : batches()) {
            const auto batch = gather(ids);
            model().inference.store.zero_grad();
            const auto t = e_step_loss(batch, model(), data_.item_table, w, true);
            nn::adam_step(model().inference.store, {lr});
            accumulate(sum, t, batch.size());
        }
        return finish(sum);
    }

    void accumulate(LossTerms& sum, const LossTerms& t, std::size_t n) {
        const double w = static_cast<double>(n);
        sum.infonce += t.infonce * w;
        sum.kl += t.kl * w;
        sum.m_rec += t.m_rec * w;
        sum.elbo += t.elbo * w;
        sum.e_rec += t.e_rec * w;
        sum.total += t.total * w;
    }

    LossTerms finish(LossTerms sum) const {
        const double n = static_cast<double>(instances_.size());
        sum.infonce /= n;
        sum.kl /= n;
        sum.m_rec /= n;
        sum.elbo /= n;
        sum.e_rec /= n;
        sum.total /= n;
        return sum;
    }

    void record(int stage, int epoch, std::string step, const LossTerms& loss, bool inference_head) {
        EpochRecord r;
        r.stage = stage;
        r.epoch = epoch;
        r.step = std::move(step);
        r.loss = loss;
        std::tie(r.valid_ndcg, r.valid_recall) =
            validation_metrics(data_, model(), cfg_.eval_k, inference_head);
        result_.history.push_back(r);
    }

    /// Tracks the best validation NDCG and decides when to stop.
    struct EarlyStop {
        explicit EarlyStop(int p) : patience(p) {}
        int patience;
        double best = -1.0;
        int since = 0;
        std::optional<LatentModel> snapshot;

        bool update(double metric, const LatentModel& m) {
            if (patience <= 0) return false;
            if (metric > best) {
                best = metric;
                since = 0;
                snapshot = m;
                return false;
            }
            return ++since >= patience;
        }
        void restore(LatentModel& m) {
            if (patience > 0 && snapshot) m = *snapshot;
        }
    };

    void stage_inference_warmup() {
        EarlyStop stop{cfg_.patience};
        for (int e = 0; e < cfg_.stage1.max_epochs; ++e) {
            auto audit = audit_begin(1, e, "E");
            const auto loss = e_epoch({0.0, 1.0}, cfg_.stage1.lr);
            audit_end(audit);
            record(1, e, "E", loss, true);
            if (stop.update(result_.history.back().valid_ndcg, model())) break;
        }
        stop.restore(model());
    }

    void stage_generative_warmup(int epochs, const MWeights& w) {
        EarlyStop stop{cfg_.patience};
        for (int e = 0; e < epochs; ++e) {
            auto audit = audit_begin(2, e, "M");
            const auto loss = m_epoch(w, cfg_.stage2.lr);
            audit_end(audit);
            record(2, e, "M", loss, false);
            if (stop.update(result_.history.back().valid_ndcg, model())) break;
        }
        stop.restore(model());
    }

    void stage_alternating() {
        EarlyStop stop{cfg_.patience};
        const MWeights mw{1.0, cfg_.lambda, cfg_.alpha_m};
        const EWeights ew{1.0, cfg_.alpha_e};
        for (int e = 0; e < cfg_.stage3.max_epochs; ++e) {
            auto audit_e = audit_begin(3, e, "E");
            const auto le = e_epoch(ew, cfg_.stage3.lr);
            audit_end(audit_e);
            record(3, e, "E", le, false);

            auto audit_m = audit_begin(3, e, "M");
            const auto lm = m_epoch(mw, cfg_.stage3.lr);
            audit_end(audit_m);
            record(3, e, "M", lm, false);
            if (stop.update(result_.history.back().valid_ndcg, model())) break;
        }
        stop.restore(model());
    }

    void stage_joint(int epochs) {
        EarlyStop stop{cfg_.patience};
        const MWeights mw{1.0, cfg_.lambda, cfg_.alpha_m};
        const EWeights ew{1.0, cfg_.alpha_e};
        for (int e = 0; e < epochs; ++e) {
            refresh_negatives();
            LossTerms sum;
            for (const auto& ids : batches()) {
                const auto batch = gather(ids);
                model().generative.store.zero_grad();
                model().inference.store.zero_grad();
                auto tm = m_step_loss(batch, model(), data_.item_table, mw, true);
                const auto te = e_step_loss(batch, model(), data_.item_table, ew, true);
                nn::adam_step(model().generative.store, {cfg_.stage3.lr});
                nn::adam_step(model().inference.store, {cfg_.stage3.lr});
                tm.elbo = te.elbo;
                tm.e_rec = te.e_rec;
                tm.total += te.total;
                accumulate(sum, tm, batch.size());
            }
            record(3, e, "joint", finish(sum), false);
            if (stop.update(result_.history.back().valid_ndcg, model())) break;
        }
        stop.restore(model());
    }

    const TrainingData& data_;
    TrainConfig cfg_;
    TrainResult result_;
    std::vector<TrainInstance> instances_;
    int epoch_counter_ = 0;
    int shuffle_counter_ = 0;
    bool negatives_ready_ = false;
};

}  // namespace

TrainResult run_training(const TrainingData& data, LatentModel model, const TrainConfig& cfg) {
    cfg.validate();
    return Trainer(data, std::move(model), cfg).run();
}

std::string history_jsonl(const std::vector<EpochRecord>& history) {
    std::string out;
    for (const auto& r : history) {
        nlohmann::json j;
        j["stage"] = r.stage;
        j["epoch"] = r.epoch;
        j["step"] = r.step;
        j["loss"] = {{"total", r.loss.total},   {"infonce", r.loss.infonce}, {"kl", r.loss.kl},
                     {"m_rec", r.loss.m_rec},   {"elbo", r.loss.elbo},       {"e_rec", r.loss.e_rec}};
        j["valid"] = {{"ndcg", r.valid_ndcg}, {"recall", r.valid_recall}};
        out += j.dump() + "\n";
    }
    return out;
}

}  // namespace crs

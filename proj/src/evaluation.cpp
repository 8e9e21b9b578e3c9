#include "crs/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <iostream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

namespace crs {

namespace {

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

std::vector<UserId> resolve_users(const Split& split, const std::vector<UserId>& users) {
    if (!users.empty()) return users;
    std::vector<UserId> all;
    all.reserve(split.test.size());
    for (const auto& [u, _] : split.test) all.push_back(u);
    return all;
}

std::vector<ItemId> full_history(const Split& split, const UserId& user) {
    std::vector<ItemId> h = split.train.at(user);
    if (auto it = split.valid.find(user); it != split.valid.end()) h.push_back(it->second);
    return h;
}

std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(10) << v;
    return os.str();
}

}  // namespace

std::optional<std::size_t> rank_of(std::span<const ItemId> ranked, const ItemId& target) {
    auto it = std::find(ranked.begin(), ranked.end(), target);
    if (it == ranked.end()) return std::nullopt;
    return static_cast<std::size_t>(it - ranked.begin()) + 1;
}

double recall_at_k(std::span<const ItemId> ranked, const ItemId& target, int k) {
    if (k < 1) throw std::invalid_argument("k must be >= 1");
    const auto r = rank_of(ranked, target);
    return r && *r <= static_cast<std::size_t>(k) ? 1.0 : 0.0;
}

double ndcg_at_k(std::span<const ItemId> ranked, const ItemId& target, int k) {
    if (k < 1) throw std::invalid_argument("k must be >= 1");
    const auto r = rank_of(ranked, target);
    if (!r || *r > static_cast<std::size_t>(k)) return 0.0;
    return 1.0 / std::log2(static_cast<double>(*r) + 1.0);
}

SimulatedUser SimulatedUser::make(const Item& target, const Catalog& catalog, int max_turns,
                                  std::uint64_t seed, double noise) {
    if (!catalog.find(target.id)) throw LookupError("target '" + target.id + "' is not in the catalog");
    if (max_turns < 1) throw std::invalid_argument("max_turns must be >= 1");
    SimulatedUser u;
    u.target = target.id;
    u.attributes = target.attributes;
    u.seed = seed;
    u.plan.push_back(soft_description(target, catalog));
    const auto order = disclosure_order(target, catalog);
    std::mt19937_64 rng(seed);
    std::bernoulli_distribution confused(std::clamp(noise, 0.0, 1.0));
    std::size_t next = 0;
    std::string last = u.plan.front();
    while (static_cast<int>(u.plan.size()) < max_turns) {
        if (noise > 0.0 && confused(rng)) {
            u.plan.emplace_back(kUninformativeUtterance);
            continue;
        }
        if (next < order.size()) {
            last = order[next] + "=" + target.attributes.at(order[next]);
            ++next;
        }
        u.plan.push_back(last);
    }
    return u;
}

EngineAgent::EngineAgent(const ConversationEngine& engine, Variant variant,
                         std::vector<ItemId> history)
    : engine_(engine), session_("sim", variant, std::move(history)) {}

std::vector<ItemId> EngineAgent::reply(const std::string& utterance) {
    const auto turn = engine_.respond(session_, utterance);
    std::vector<ItemId> ids;
    for (const auto& it : turn.items) ids.push_back(it.id);
    return ids;
}

DialogueResult simulate_dialogue(const SimulatedUser& user, DialogueAgent& agent, int max_turns,
                                 std::size_t items_per_turn) {
    if (static_cast<int>(user.plan.size()) < max_turns) {
        throw std::invalid_argument("simulated user plan is shorter than max_turns");
    }
    DialogueResult r;
    r.target = user.target;
    for (int t = 1; t <= max_turns; ++t) {
        DialogueTurn turn;
        turn.utterance = user.utterance(t);
        turn.shown = agent.reply(turn.utterance);
        if (turn.shown.size() > items_per_turn) turn.shown.resize(items_per_turn);
        const bool hit = std::find(turn.shown.begin(), turn.shown.end(), user.target) != turn.shown.end();
        r.transcript.push_back(std::move(turn));
        r.turns_used = t;
        if (hit) {
            r.success = true;
            break;
        }
    }
    return r;
}

MultiTurnSummary summarize_dialogues(const std::vector<DialogueResult>& results, int max_turns,
                                     const std::vector<int>& success_turns) {
    MultiTurnSummary s;
    s.dialogues = results.size();
    for (int t : success_turns) s.success_at[t] = 0.0;
    if (results.empty()) {
        s.average_turns = max_turns;
        return s;
    }
    double turns = 0.0;
    for (const auto& r : results) {
        turns += r.success ? r.turns_used : max_turns;
        for (int t : success_turns) {
            if (r.success && r.turns_used <= t) s.success_at[t] += 1.0;
        }
    }
    const double n = static_cast<double>(results.size());
    for (auto& [t, v] : s.success_at) v /= n;
    s.average_turns = turns / n;
    return s;
}

nlohmann::json EvalReport::to_json(bool include_runtime) const {
    nlohmann::json users = nlohmann::json::array();
    for (const auto& [user, m] : per_user) users.push_back({{"user", user}, {"metrics", m}});
    nlohmann::json j{{"kind", kind},
                     {"metrics", metrics},
                     {"skipped", skipped},
                     {"config_fingerprint", config_fingerprint},
                     {"users", users}};
    if (include_runtime) j["runtime_seconds"] = runtime_seconds;
    return j;
}

std::string EvalReport::to_csv() const {
    std::string out = "metric,value\n";
    for (const auto& [name, v] : metrics) out += name + "," + fmt(v) + "\n";
    return out;
}

EvalReport one_turn_eval(const Split& split, const Catalog& catalog, const OneTurnRanker& ranker,
                         const std::vector<int>& ks, const std::vector<UserId>& users) {
    if (ks.empty()) throw std::invalid_argument("no cutoffs given");
    for (int k : ks) {
        if (k < 1) throw std::invalid_argument("k must be >= 1");
    }
    const auto start = std::chrono::steady_clock::now();
    const std::size_t max_k = static_cast<std::size_t>(*std::max_element(ks.begin(), ks.end()));
    EvalReport report;
    report.kind = "one_turn";
    for (int k : ks) {
        report.metrics["recall@" + std::to_string(k)] = 0.0;
        report.metrics["ndcg@" + std::to_string(k)] = 0.0;
    }
    std::size_t evaluated = 0;
    for (const auto& user : resolve_users(split, users)) {
        auto test = split.test.find(user);
        const auto idx = test == split.test.end() ? std::nullopt : catalog.find(test->second);
        if (!idx) {
            ++report.skipped;
            continue;
        }
        const auto history = full_history(split, user);
        const std::string text = soft_description(catalog.item(*idx), catalog);
        const auto ranked = ranker(user, history, text, max_k);
        std::map<std::string, double> m;
        for (int k : ks) {
            m["recall@" + std::to_string(k)] = recall_at_k(ranked, test->second, k);
            m["ndcg@" + std::to_string(k)] = ndcg_at_k(ranked, test->second, k);
        }
        for (const auto& [name, v] : m) report.metrics[name] += v;
        report.per_user.emplace_back(user, std::move(m));
        ++evaluated;
    }
    if (report.skipped) {
        std::cerr << "one-turn eval: skipped " << report.skipped << " users without a describable test item\n";
    }
    if (evaluated) {
        for (auto& [_, v] : report.metrics) v /= static_cast<double>(evaluated);
    }
    report.runtime_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return report;
}

OneTurnRanker recommender_ranker(const Recommender& recommender) {
    return [&recommender](const UserId&, std::span<const ItemId> history, const std::string& text,
                          std::size_t k) {
        const auto& ids = recommender.bundle().encoder.item_ids();
        std::vector<std::size_t> all(ids.size());
        std::iota(all.begin(), all.end(), std::size_t{0});
        std::vector<ItemId> out;
        for (const auto& s : recommender.rank(history, text, all, k)) out.push_back(ids[s.index]);
        return out;
    };
}

EvalReport multi_turn_eval(const Split& split, const Catalog& catalog, const AgentFactory& agents,
                           const MultiTurnOptions& options, const std::vector<UserId>& users,
                           std::vector<DialogueResult>* dialogues) {
    const auto start = std::chrono::steady_clock::now();
    EvalReport report;
    report.kind = "multi_turn";
    std::vector<DialogueResult> results;
    for (const auto& user : resolve_users(split, users)) {
        auto test = split.test.find(user);
        const auto idx = test == split.test.end() ? std::nullopt : catalog.find(test->second);
        if (!idx) {
            ++report.skipped;
            continue;
        }
        const auto history = full_history(split, user);
        const auto sim = SimulatedUser::make(catalog.item(*idx), catalog, options.max_turns,
                                             options.seed ^ fnv1a(user), options.noise);
        auto agent = agents(user, history);
        auto r = simulate_dialogue(sim, *agent, options.max_turns, options.items_per_turn);
        report.per_user.emplace_back(
            user, std::map<std::string, double>{{"success", r.success ? 1.0 : 0.0},
                                                {"turns", static_cast<double>(r.turns_used)}});
        results.push_back(std::move(r));
    }
    const auto summary = summarize_dialogues(results, options.max_turns, {3, 5});
    report.metrics["S@3"] = summary.success_at.at(3);
    report.metrics["S@5"] = summary.success_at.at(5);
    report.metrics["AT"] = summary.average_turns;
    if (dialogues) *dialogues = std::move(results);
    report.runtime_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return report;
}

AgentFactory engine_agents(const ConversationEngine& engine, Variant variant) {
    return [&engine, variant](const UserId&, std::span<const ItemId> history) {
        return std::make_unique<EngineAgent>(engine, variant,
                                             std::vector<ItemId>(history.begin(), history.end()));
    };
}

std::vector<SweepPoint> expand_grid(const nlohmann::json& grid, const SweepPoint& base) {
    if (!grid.is_object()) throw std::invalid_argument("sweep grid must be a JSON object");
    for (const auto& [key, _] : grid.items()) {
        if (key != "num_intents" && key != "lambda" && key != "alpha_m" && key != "alpha_e") {
            throw std::invalid_argument("unknown sweep axis '" + key + "'");
        }
    }
    auto axis = [&](const char* key, double fallback) {
        std::vector<double> v;
        if (grid.contains(key)) {
            const auto& a = grid.at(key);
            if (a.is_array()) {
                for (const auto& x : a) v.push_back(x.get<double>());
            } else {
                v.push_back(a.get<double>());
            }
            if (v.empty()) throw std::invalid_argument(std::string("empty sweep axis '") + key + "'");
        } else {
            v.push_back(fallback);
        }
        return v;
    };
    const auto ks = axis("num_intents", base.num_intents);
    const auto ls = axis("lambda", base.lambda);
    const auto ams = axis("alpha_m", base.alpha_m);
    const auto aes = axis("alpha_e", base.alpha_e);
    std::vector<SweepPoint> points;
    for (double k : ks) {
        for (double l : ls) {
            for (double am : ams) {
                for (double ae : aes) points.push_back({static_cast<int>(k), l, am, ae});
            }
        }
    }
    return points;
}

std::vector<SweepRow> sweep(const std::vector<SweepPoint>& points,
                            const std::function<EvalReport(const SweepPoint&)>& run) {
    if (points.empty()) throw std::invalid_argument("sweep grid is empty");
    std::vector<SweepRow> rows;
    for (const auto& p : points) {
        SweepRow row;
        row.point = p;
        try {
            row.report = run(p);
        } catch (const std::exception& e) {
            row.error = e.what();
            std::cerr << "sweep point K=" << p.num_intents << " lambda=" << p.lambda
                      << " alpha_m=" << p.alpha_m << " alpha_e=" << p.alpha_e
                      << " failed: " << e.what() << "\n";
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
    std::vector<std::string> metrics;
    for (const auto& r : rows) {
        if (!r.report) continue;
        for (const auto& [name, _] : r.report->metrics) {
            if (std::find(metrics.begin(), metrics.end(), name) == metrics.end()) metrics.push_back(name);
        }
    }
    std::sort(metrics.begin(), metrics.end());
    std::string out = "num_intents,lambda,alpha_m,alpha_e,status";
    for (const auto& m : metrics) out += "," + m;
    out += "\n";
    for (const auto& r : rows) {
        out += std::to_string(r.point.num_intents) + "," + fmt(r.point.lambda) + "," +
               fmt(r.point.alpha_m) + "," + fmt(r.point.alpha_e) + "," + (r.report ? "ok" : "error");
        for (const auto& m : metrics) {
            out += ",";
            if (r.report) {
                auto it = r.report->metrics.find(m);
                if (it != r.report->metrics.end()) out += fmt(it->second);
            }
        }
        out += "\n";
    }
    return out;
}

double matched_purity(const std::vector<int>& clusters, const std::vector<int>& labels) {
    if (clusters.size() != labels.size()) throw std::invalid_argument("size mismatch");
    if (clusters.empty()) return 0.0;
    std::map<int, std::size_t> cid, lid;
    for (int c : clusters) cid.emplace(c, cid.size());
    for (int l : labels) lid.emplace(l, lid.size());
    const std::size_t C = cid.size(), L = lid.size();
    if (L > 20) throw std::invalid_argument("too many labels for exact matching");
    std::vector<std::vector<double>> count(C, std::vector<double>(L, 0.0));
    for (std::size_t i = 0; i < clusters.size(); ++i) count[cid[clusters[i]]][lid[labels[i]]] += 1.0;

    // best[mask]: best total over the clusters processed so far using labels in mask.
    const std::size_t states = std::size_t{1} << L;
    std::vector<double> best(states, -1.0);
    best[0] = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
        std::vector<double> next = best;  // cluster c left unmatched
        for (std::size_t mask = 0; mask < states; ++mask) {
            if (best[mask] < 0) continue;
            for (std::size_t l = 0; l < L; ++l) {
                if (mask & (std::size_t{1} << l)) continue;
                auto& slot = next[mask | (std::size_t{1} << l)];
                slot = std::max(slot, best[mask] + count[c][l]);
            }
        }
        best = std::move(next);
    }
    return *std::max_element(best.begin(), best.end()) / static_cast<double>(clusters.size());
}

}  // namespace crs

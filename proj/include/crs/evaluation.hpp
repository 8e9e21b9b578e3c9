#pragma once

// Ranking metrics, the rule-based user simulator and report generation.

#include "crs/conversation.hpp"
#include "crs/corpus.hpp"

#include <json.hpp>

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace crs {

/// 1-based rank of `target`, nullopt when absent.
std::optional<std::size_t> rank_of(std::span<const ItemId> ranked, const ItemId& target);

/// 1 if target is within the first k entries.
double recall_at_k(std::span<const ItemId> ranked, const ItemId& target, int k);
/// 1 / log2(rank + 1) when rank <= k, else 0.
double ndcg_at_k(std::span<const ItemId> ranked, const ItemId& target, int k);

/// Target-driven user: turn 1 is the soft description of the target, each
/// later turn discloses the next attribute (most selective first) as
/// `attr=value`. Once every attribute is disclosed the last disclosure is
/// repeated. With `noise` > 0 a turn is replaced, with that probability, by an
/// uninformative utterance.
struct SimulatedUser {
    ItemId target;
    std::map<std::string, std::string> attributes;
    std::vector<std::string> plan;  // utterance per turn
    std::uint64_t seed = 0;

    static SimulatedUser make(const Item& target, const Catalog& catalog, int max_turns,
                              std::uint64_t seed = 0, double noise = 0.0);
    const std::string& utterance(int turn) const { return plan.at(static_cast<std::size_t>(turn - 1)); }
};

inline constexpr std::string_view kUninformativeUtterance = "not sure, show me something else";

/// Conversational agent under test: receives the user utterance, returns the
/// item ids it shows in that turn.
class DialogueAgent {
public:
    virtual ~DialogueAgent() = default;
    virtual std::vector<ItemId> reply(const std::string& utterance) = 0;
};

/// Agent backed by a ConversationEngine session.
class EngineAgent final : public DialogueAgent {
public:
    EngineAgent(const ConversationEngine& engine, Variant variant, std::vector<ItemId> history = {});
    std::vector<ItemId> reply(const std::string& utterance) override;
    const Session& session() const { return session_; }

private:
    const ConversationEngine& engine_;
    Session session_;
};

struct DialogueTurn {
    std::string utterance;
    std::vector<ItemId> shown;
};

struct DialogueResult {
    ItemId target;
    bool success = false;
    int turns_used = 0;
    std::vector<DialogueTurn> transcript;
};

DialogueResult simulate_dialogue(const SimulatedUser& user, DialogueAgent& agent, int max_turns = 5,
                                 std::size_t items_per_turn = 5);

struct MultiTurnSummary {
    std::map<int, double> success_at;  // S@t
    double average_turns = 0.0;        // failures count as max_turns
    std::size_t dialogues = 0;
};

MultiTurnSummary summarize_dialogues(const std::vector<DialogueResult>& results, int max_turns,
                                     const std::vector<int>& success_turns = {3, 5});

struct EvalReport {
    std::string kind;  // "one_turn" or "multi_turn"
    std::map<std::string, double> metrics;
    std::vector<std::pair<UserId, std::map<std::string, double>>> per_user;
    std::size_t skipped = 0;
    std::string config_fingerprint;
    double runtime_seconds = 0.0;

    /// Runtime is left out unless asked for so that reports of identical
    /// runs compare byte-for-byte.
    nlohmann::json to_json(bool include_runtime = false) const;
    /// "metric,value" rows, metrics in name order.
    std::string to_csv() const;
};

/// Ranks the whole catalog for a user given their history and one
/// description; returns item ids, best first (at least `k` when available).
using OneTurnRanker = std::function<std::vector<ItemId>(
    const UserId& user, std::span<const ItemId> history, const std::string& text, std::size_t k)>;

/// Test users: history = train + valid, text = soft description of the test
/// item. Users whose test item is missing from the catalog are skipped.
EvalReport one_turn_eval(const Split& split, const Catalog& catalog, const OneTurnRanker& ranker,
                         const std::vector<int>& ks, const std::vector<UserId>& users = {});

OneTurnRanker recommender_ranker(const Recommender& recommender);

using AgentFactory =
    std::function<std::unique_ptr<DialogueAgent>(const UserId& user, std::span<const ItemId> history)>;

struct MultiTurnOptions {
    int max_turns = 5;
    std::size_t items_per_turn = 5;
    double noise = 0.0;
    std::uint64_t seed = 0;
};

/// Simulated dialogues for the test users (target = test item, history =
/// train + valid). Metrics: S@3, S@5 and AT.
EvalReport multi_turn_eval(const Split& split, const Catalog& catalog, const AgentFactory& agents,
                           const MultiTurnOptions& options, const std::vector<UserId>& users = {},
                           std::vector<DialogueResult>* dialogues = nullptr);

AgentFactory engine_agents(const ConversationEngine& engine, Variant variant);

struct SweepPoint {
    int num_intents = 0;
    double lambda = 0.0;
    double alpha_m = 0.0;
    double alpha_e = 0.0;
};

/// Cartesian product of {"num_intents", "lambda", "alpha_m", "alpha_e"}
/// arrays; missing keys take the value from `base`.
std::vector<SweepPoint> expand_grid(const nlohmann::json& grid, const SweepPoint& base);

struct SweepRow {
    SweepPoint point;
    std::optional<EvalReport> report;
    std::string error;
};

/// Runs `run` per point; a throwing point is recorded and the sweep goes on.
std::vector<SweepRow> sweep(const std::vector<SweepPoint>& points,
                            const std::function<EvalReport(const SweepPoint&)>& run);

std::string sweep_csv(const std::vector<SweepRow>& rows);

/// Fraction of points whose cluster maps to their label under the best
/// one-to-one cluster/label matching.
double matched_purity(const std::vector<int>& clusters, const std::vector<int>& labels);

}  // namespace crs

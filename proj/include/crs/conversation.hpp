#pragma once

// Multi-turn sessions: accumulated intent text, hard constraints parsed from
// user messages, candidate filtering and per-turn ranking.

#include "crs/corpus.hpp"
#include "crs/latent_model.hpp"

#include <json.hpp>

#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace crs {

enum class ConstraintOp { eq, neq, ge, le, in };

std::string_view to_string(ConstraintOp op);
ConstraintOp parse_constraint_op(std::string_view s);

struct HardConstraint {
    std::string attribute;            // canonical schema name
    ConstraintOp op = ConstraintOp::eq;
    std::vector<std::string> values;  // one value except for `in`

    bool matches(const Item& item, const CatalogSchema& schema) const;
    /// "genre=Action", "size in[M,L]"
    std::string text() const;
    bool operator==(const HardConstraint&) const = default;
};

nlohmann::json to_json(const HardConstraint& c);
/// Validates against the schema; throws std::invalid_argument.
HardConstraint constraint_from_json(const nlohmann::json& j, const CatalogSchema& schema);

struct RuleDiagnostic {
    std::string expression;
    std::string message;
};

struct ParsedRules {
    std::vector<HardConstraint> constraints;
    std::vector<std::string> drops;  // attributes retracted with `drop attr`
    std::vector<RuleDiagnostic> diagnostics;
};

/// Structured mini-grammar. Expressions are separated by ',' or ';' (outside
/// brackets and quotes):
///   attr = value | attr != value | attr >= value | attr <= value
///   attr in[v1, v2, ...] | drop attr
/// Attribute names match the schema case-insensitively; values may be
/// double-quoted. Segments without an operator are free text and yield
/// nothing.
ParsedRules parse_rules(std::string_view message, const CatalogSchema& schema);

/// JSON-contract rule extractor for free-form text.
class RuleExtractor {
public:
    virtual ~RuleExtractor() = default;
    struct Result {
        std::vector<HardConstraint> constraints;
        std::string intent_text;
    };
    virtual Result extract(const std::vector<std::string>& history, const std::string& message,
                           const CatalogSchema& schema) = 0;
};

class HttpRuleExtractor final : public RuleExtractor {
public:
    explicit HttpRuleExtractor(std::string endpoint) : endpoint_(std::move(endpoint)) {}
    Result extract(const std::vector<std::string>& history, const std::string& message,
                   const CatalogSchema& schema) override;

private:
    std::string endpoint_;
};

/// Grammar first, then the extractor when one is configured. Extractor
/// failures become diagnostics.
ParsedRules extract_rules(std::string_view message, const CatalogSchema& schema,
                          const std::vector<std::string>& history = {},
                          RuleExtractor* extractor = nullptr);

struct RerankItem {
    ItemId id;
    std::string title;
    std::map<std::string, std::string> attributes;
};

class Reranker {
public:
    virtual ~Reranker() = default;
    /// Returns item ids in the preferred order.
    virtual std::vector<ItemId> rerank(const std::string& intent_text,
                                       const std::vector<RerankItem>& items) = 0;
};

class HttpReranker final : public Reranker {
public:
    explicit HttpReranker(std::string endpoint) : endpoint_(std::move(endpoint)) {}
    std::vector<ItemId> rerank(const std::string& intent_text,
                               const std::vector<RerankItem>& items) override;

private:
    std::string endpoint_;
};

/// Items satisfying every constraint, ascending index. Items missing a
/// constrained attribute are excluded.
std::vector<std::size_t> filter_candidates(const Catalog& catalog,
                                           const std::vector<HardConstraint>& constraints);

enum class Variant { B, F, V };

Variant parse_variant(std::string_view s);  // throws std::invalid_argument
std::string_view to_string(Variant v);

class SessionStateError : public std::runtime_error {
public:
    explicit SessionStateError(const std::string& what) : std::runtime_error(what) {}
};

class SessionExhaustedError : public SessionStateError {
public:
    using SessionStateError::SessionStateError;
};

struct RecommendedItem {
    ItemId id;
    std::string title;
    double score = 0.0;
    std::map<std::string, std::string> attributes;
};

struct TurnResult {
    int turn = 0;
    std::vector<RecommendedItem> items;
    std::vector<HardConstraint> constraints;  // active after this turn
    std::string note;
};

/// Wire payload: {"items", "constraints", "turn", "note"}.
nlohmann::json to_json(const TurnResult& t);

class Session {
public:
    Session(std::string id, Variant variant, std::vector<ItemId> history = {});

    const std::string& id() const { return id_; }
    Variant variant() const { return variant_; }
    int turns() const { return static_cast<int>(turns_.size()); }
    bool closed() const { return closed_; }
    void close() { closed_ = true; }

    /// x^u: user messages joined by single spaces.
    const std::string& intent_text() const { return intent_; }
    const std::vector<std::string>& messages() const { return messages_; }
    const std::vector<ItemId>& history() const { return history_; }
    const std::vector<HardConstraint>& constraints() const { return constraints_; }
    const std::vector<TurnResult>& transcript() const { return turns_; }

    /// Appends the message to x^u. Throws SessionStateError when closed.
    void accumulate_intent(std::string_view message);
    /// Applies retractions, then appends new constraints not already active.
    void apply_rules(const ParsedRules& rules);
    /// Removes and returns the most recently added constraint.
    std::optional<HardConstraint> drop_newest();
    void record(TurnResult turn) { turns_.push_back(std::move(turn)); }

private:
    std::string id_;
    Variant variant_;
    std::vector<ItemId> history_;
    std::vector<std::string> messages_;
    std::string intent_;
    std::vector<HardConstraint> constraints_;
    std::vector<TurnResult> turns_;
    bool closed_ = false;
};

struct EngineOptions {
    std::size_t top_k = 5;
    int max_turns = 5;
};

class ConversationEngine {
public:
    ConversationEngine(std::shared_ptr<const Recommender> recommender,
                       std::shared_ptr<const Catalog> catalog, EngineOptions options = {},
                       std::shared_ptr<RuleExtractor> extractor = nullptr,
                       std::shared_ptr<Reranker> reranker = nullptr);

    /// One system turn. Throws std::invalid_argument for a blank message,
    /// SessionExhaustedError past max_turns, SessionStateError when closed.
    TurnResult respond(Session& session, std::string_view message) const;

    const Catalog& catalog() const { return *catalog_; }
    const Recommender& recommender() const { return *recommender_; }
    const EngineOptions& options() const { return options_; }

private:
    std::vector<RecommendedItem> materialize(const std::vector<ScoredItem>& ranked) const;

    std::shared_ptr<const Recommender> recommender_;
    std::shared_ptr<const Catalog> catalog_;
    EngineOptions options_;
    std::shared_ptr<RuleExtractor> extractor_;
    std::shared_ptr<Reranker> reranker_;
};

}  // namespace crs

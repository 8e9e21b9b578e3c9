#include "crs/conversation.hpp"

#include "crs/http_json.hpp"
#include "crs/text_embed.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>
#include <regex>
#include <unordered_map>
#include <variant>

namespace crs {

namespace {

std::string lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

std::optional<double> to_number(std::string_view s) {
    const std::string t = embed::trim(s);
    if (t.empty()) return std::nullopt;
    try {
        std::size_t used = 0;
        const double v = std::stod(t, &used);
        if (used != t.size() || !std::isfinite(v)) return std::nullopt;
        return v;
    } catch (const std::exception&) {
        return std::nullopt;
    }
}

std::string unquote(std::string_view s) {
    std::string t = embed::trim(s);
    if (t.size() >= 2 && t.front() == '"' && t.back() == '"') t = t.substr(1, t.size() - 2);
    return t;
}

/// Splits on `seps` outside brackets and double quotes.
std::vector<std::string> split_top_level(std::string_view s, std::string_view seps) {
    std::vector<std::string> out;
    std::string cur;
    int depth = 0;
    bool quoted = false;
    for (char c : s) {
        if (c == '"') quoted = !quoted;
        if (!quoted) {
            if (c == '[') ++depth;
            if (c == ']' && depth > 0) --depth;
            if (depth == 0 && seps.find(c) != std::string_view::npos) {
                out.push_back(cur);
                cur.clear();
                continue;
            }
        }
        cur += c;
    }
    out.push_back(cur);
    return out;
}

double binned(double v, const AttributeSpec& spec) {
    return spec.bin_width > 0 ? std::floor(v / spec.bin_width) * spec.bin_width : v;
}

bool value_equals(const std::string& item_value, const std::string& wanted,
                  const AttributeSpec* spec) {
    if (spec && spec->kind == AttributeKind::numeric) {
        const auto a = to_number(item_value);
        const auto b = to_number(wanted);
        if (!a || !b) return false;
        return std::abs(*a - binned(*b, *spec)) <= 1e-9 * std::max(1.0, std::abs(*a));
    }
    return lower(item_value) == lower(wanted);
}

/// Checks attribute existence and op/kind compatibility; returns the
/// canonical constraint or a diagnostic message.
std::variant<HardConstraint, std::string> make_constraint(const std::string& attribute,
                                                          ConstraintOp op,
                                                          std::vector<std::string> values,
                                                          const CatalogSchema& schema) {
    const AttributeSpec* spec = schema.find(attribute);
    if (!spec) return "unknown attribute '" + attribute + "'";
    if (values.empty()) return std::string("no value given");
    for (const auto& v : values) {
        if (v.empty()) return std::string("empty value");
    }
    const bool numeric = spec->kind == AttributeKind::numeric;
    if ((op == ConstraintOp::ge || op == ConstraintOp::le) && !numeric) {
        return "'" + spec->name + "' is categorical; >= and <= need a numeric attribute";
    }
    if (numeric) {
        for (const auto& v : values) {
            if (!to_number(v)) return "'" + v + "' is not a number";
        }
    }
    if (op != ConstraintOp::in && values.size() != 1) return std::string("expected one value");
    return HardConstraint{spec->name, op, std::move(values)};
}

}  // namespace

std::string_view to_string(ConstraintOp op) {
    switch (op) {
        case ConstraintOp::eq: return "eq";
        case ConstraintOp::neq: return "neq";
        case ConstraintOp::ge: return "ge";
        case ConstraintOp::le: return "le";
        case ConstraintOp::in: return "in";
    }
    return "eq";
}

ConstraintOp parse_constraint_op(std::string_view s) {
    static const std::unordered_map<std::string, ConstraintOp> ops{
        {"eq", ConstraintOp::eq}, {"=", ConstraintOp::eq},   {"neq", ConstraintOp::neq},
        {"!=", ConstraintOp::neq}, {"ge", ConstraintOp::ge}, {">=", ConstraintOp::ge},
        {"le", ConstraintOp::le}, {"<=", ConstraintOp::le},  {"in", ConstraintOp::in}};
    auto it = ops.find(lower(s));
    if (it == ops.end()) throw std::invalid_argument("unknown operator '" + std::string(s) + "'");
    return it->second;
}

bool HardConstraint::matches(const Item& item, const CatalogSchema& schema) const {
    auto it = item.attributes.find(attribute);
    if (it == item.attributes.end()) return false;
    const AttributeSpec* spec = schema.find(attribute);
    const std::string& have = it->second;
    switch (op) {
        case ConstraintOp::eq: return value_equals(have, values.at(0), spec);
        case ConstraintOp::neq: return !value_equals(have, values.at(0), spec);
        case ConstraintOp::in:
            return std::any_of(values.begin(), values.end(),
                               [&](const std::string& v) { return value_equals(have, v, spec); });
        case ConstraintOp::ge:
        case ConstraintOp::le: {
            const auto a = to_number(have);
            const auto b = to_number(values.at(0));
            if (!a || !b) return false;
            return op == ConstraintOp::ge ? *a >= *b : *a <= *b;
        }
    }
    return false;
}

std::string HardConstraint::text() const {
    switch (op) {
        case ConstraintOp::eq: return attribute + "=" + values.at(0);
        case ConstraintOp::neq: return attribute + "!=" + values.at(0);
        case ConstraintOp::ge: return attribute + ">=" + values.at(0);
        case ConstraintOp::le: return attribute + "<=" + values.at(0);
        case ConstraintOp::in: {
            std::string s = attribute + " in[";
            for (std::size_t i = 0; i < values.size(); ++i) s += (i ? "," : "") + values[i];
            return s + "]";
        }
    }
    return attribute;
}

nlohmann::json to_json(const HardConstraint& c) {
    nlohmann::json j{{"attribute", c.attribute}, {"op", std::string(to_string(c.op))}};
    if (c.op == ConstraintOp::in) {
        j["value"] = c.values;
    } else {
        j["value"] = c.values.at(0);
    }
    j["text"] = c.text();
    return j;
}

HardConstraint constraint_from_json(const nlohmann::json& j, const CatalogSchema& schema) {
    if (!j.is_object() || !j.contains("attribute") || !j.contains("op") || !j.contains("value")) {
        throw std::invalid_argument("constraint needs attribute, op and value");
    }
    const auto op = parse_constraint_op(j.at("op").get<std::string>());
    std::vector<std::string> values;
    auto as_text = [](const nlohmann::json& v) {
        return v.is_string() ? v.get<std::string>() : v.dump();
    };
    if (j.at("value").is_array()) {
        for (const auto& v : j.at("value")) values.push_back(as_text(v));
    } else {
        values.push_back(as_text(j.at("value")));
    }
    auto made = make_constraint(j.at("attribute").get<std::string>(), op, std::move(values), schema);
    if (auto* err = std::get_if<std::string>(&made)) throw std::invalid_argument(*err);
    return std::get<HardConstraint>(std::move(made));
}

ParsedRules parse_rules(std::string_view message, const CatalogSchema& schema) {
    static const std::regex drop_re(R"(^drop\s+([A-Za-z_][\w]*)$)", std::regex::icase);
    static const std::regex in_re(R"(([A-Za-z_][\w]*)\s+in\s*\[(.*)\]$)", std::regex::icase);
    static const std::regex op_re(R"(([A-Za-z_][\w]*)\s*(!=|>=|<=|=)\s*(.+)$)");

    ParsedRules out;
    for (const auto& raw : split_top_level(message, ",;")) {
        const std::string seg = embed::trim(raw);
        if (seg.empty()) continue;
        std::smatch m;
        if (std::regex_match(seg, m, drop_re)) {
            if (const auto* spec = schema.find(m[1].str())) {
                out.drops.push_back(spec->name);
            } else {
                out.diagnostics.push_back({seg, "unknown attribute '" + m[1].str() + "'"});
            }
            continue;
        }
        std::variant<HardConstraint, std::string> made;
        if (std::regex_search(seg, m, in_re)) {
            std::vector<std::string> values;
            for (const auto& v : split_top_level(m[2].str(), ",")) {
                values.push_back(unquote(v));
            }
            made = make_constraint(m[1].str(), ConstraintOp::in, std::move(values), schema);
        } else if (std::regex_search(seg, m, op_re)) {
            made = make_constraint(m[1].str(), parse_constraint_op(m[2].str()), {unquote(m[3].str())},
                                   schema);
        } else {
            continue;  // free text
        }
        if (auto* err = std::get_if<std::string>(&made)) {
            out.diagnostics.push_back({seg, *err});
        } else {
            out.constraints.push_back(std::get<HardConstraint>(std::move(made)));
        }
    }
    return out;
}

RuleExtractor::Result HttpRuleExtractor::extract(const std::vector<std::string>& history,
                                                 const std::string& message,
                                                 const CatalogSchema& schema) {
    nlohmann::json attrs = nlohmann::json::object();
    for (const auto& [name, spec] : schema.attributes) {
        attrs[name] = spec.kind == AttributeKind::numeric ? "numeric" : "categorical";
    }
    const nlohmann::json body{{"history", history},
                              {"message", message},
                              {"schema", {{"category", schema.category}, {"attributes", attrs}}}};
    const auto reply = http::post_json(endpoint_, body);
    Result r;
    if (!reply.contains("constraints") || !reply.at("constraints").is_array()) {
        throw embed::ContractError("extractor reply lacks a 'constraints' array");
    }
    for (const auto& c : reply.at("constraints")) r.constraints.push_back(constraint_from_json(c, schema));
    if (reply.contains("intent_text") && reply.at("intent_text").is_string()) {
        r.intent_text = reply.at("intent_text").get<std::string>();
    }
    return r;
}

ParsedRules extract_rules(std::string_view message, const CatalogSchema& schema,
                          const std::vector<std::string>& history, RuleExtractor* extractor) {
    ParsedRules rules = parse_rules(message, schema);
    if (!extractor) return rules;
    try {
        auto remote = extractor->extract(history, std::string(message), schema);
        for (auto& c : remote.constraints) {
            if (std::find(rules.constraints.begin(), rules.constraints.end(), c) ==
                rules.constraints.end()) {
                rules.constraints.push_back(std::move(c));
            }
        }
    } catch (const std::exception& e) {
        rules.diagnostics.push_back({std::string(message), std::string("extractor: ") + e.what()});
    }
    return rules;
}

std::vector<ItemId> HttpReranker::rerank(const std::string& intent_text,
                                         const std::vector<RerankItem>& items) {
    nlohmann::json list = nlohmann::json::array();
    for (const auto& it : items) {
        list.push_back({{"id", it.id}, {"title", it.title}, {"attributes", it.attributes}});
    }
    const auto reply = http::post_json(endpoint_, {{"intent_text", intent_text}, {"items", list}});
    if (!reply.contains("order") || !reply.at("order").is_array()) {
        throw embed::ContractError("reranker reply lacks an 'order' array");
    }
    return reply.at("order").get<std::vector<ItemId>>();
}

std::vector<std::size_t> filter_candidates(const Catalog& catalog,
                                           const std::vector<HardConstraint>& constraints) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < catalog.size(); ++i) {
        const Item& item = catalog.item(i);
        if (std::all_of(constraints.begin(), constraints.end(),
                        [&](const HardConstraint& c) { return c.matches(item, catalog.schema()); })) {
            out.push_back(i);
        }
    }
    return out;
}

Variant parse_variant(std::string_view s) {
    if (s == "B" || s == "b") return Variant::B;
    if (s == "F" || s == "f") return Variant::F;
    if (s == "V" || s == "v") return Variant::V;
    throw std::invalid_argument("unknown variant '" + std::string(s) + "' (expected B, F or V)");
}

std::string_view to_string(Variant v) {
    switch (v) {
        case Variant::B: return "B";
        case Variant::F: return "F";
        case Variant::V: return "V";
    }
    return "B";
}

nlohmann::json to_json(const TurnResult& t) {
    nlohmann::json items = nlohmann::json::array();
    for (const auto& it : t.items) {
        items.push_back(
            {{"id", it.id}, {"title", it.title}, {"score", it.score}, {"attributes", it.attributes}});
    }
    nlohmann::json constraints = nlohmann::json::array();
    for (const auto& c : t.constraints) constraints.push_back(to_json(c));
    return {{"items", items}, {"constraints", constraints}, {"turn", t.turn}, {"note", t.note}};
}

Session::Session(std::string id, Variant variant, std::vector<ItemId> history)
    : id_(std::move(id)), variant_(variant), history_(std::move(history)) {}

void Session::accumulate_intent(std::string_view message) {
    if (closed_) throw SessionStateError("session " + id_ + " is closed");
    messages_.emplace_back(message);
    if (!intent_.empty()) intent_ += ' ';
    intent_ += message;
}

void Session::apply_rules(const ParsedRules& rules) {
    for (const auto& attr : rules.drops) {
        std::erase_if(constraints_, [&](const HardConstraint& c) { return c.attribute == attr; });
    }
    for (const auto& c : rules.constraints) {
        if (std::find(constraints_.begin(), constraints_.end(), c) == constraints_.end()) {
            constraints_.push_back(c);
        }
    }
}

std::optional<HardConstraint> Session::drop_newest() {
    if (constraints_.empty()) return std::nullopt;
    HardConstraint c = constraints_.back();
    constraints_.pop_back();
    return c;
}

ConversationEngine::ConversationEngine(std::shared_ptr<const Recommender> recommender,
                                       std::shared_ptr<const Catalog> catalog,
                                       EngineOptions options,
                                       std::shared_ptr<RuleExtractor> extractor,
                                       std::shared_ptr<Reranker> reranker)
    : recommender_(std::move(recommender)),
      catalog_(std::move(catalog)),
      options_(options),
      extractor_(std::move(extractor)),
      reranker_(std::move(reranker)) {
    if (!recommender_) throw ConfigError("no checkpoint loaded");
    if (!catalog_) throw ConfigError("no catalog loaded");
    const auto& ids = recommender_->bundle().encoder.item_ids();
    if (ids.size() != catalog_->size()) {
        throw ConfigError("checkpoint covers " + std::to_string(ids.size()) +
                          " items but the catalog has " + std::to_string(catalog_->size()));
    }
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] != catalog_->item(i).id) {
            throw ConfigError("checkpoint and catalog disagree at item '" + ids[i] + "'");
        }
    }
    if (options_.top_k < 1 || options_.max_turns < 1) {
        throw ConfigError("top_k and max_turns must be >= 1");
    }
}

std::vector<RecommendedItem> ConversationEngine::materialize(
    const std::vector<ScoredItem>& ranked) const {
    std::vector<RecommendedItem> out;
    out.reserve(ranked.size());
    for (const auto& r : ranked) {
        const Item& item = catalog_->item(r.index);
        out.push_back({item.id, item.title, r.score, item.attributes});
    }
    return out;
}

TurnResult ConversationEngine::respond(Session& target, std::string_view message) const {
    const std::string text = embed::trim(message);
    if (text.empty()) throw std::invalid_argument("message is empty");
    if (target.closed()) throw SessionStateError("session " + target.id() + " is closed");
    if (target.turns() >= options_.max_turns) {
        throw SessionExhaustedError("session " + target.id() + " reached the limit of " +
                                    std::to_string(options_.max_turns) + " turns");
    }
    // Work on a copy so a failed turn leaves the session untouched.
    Session session = target;
    const auto prior_messages = session.messages();
    session.accumulate_intent(text);

    std::vector<std::string> notes;
    const bool filtered = session.variant() != Variant::B;
    if (filtered) {
        const auto rules =
            extract_rules(text, catalog_->schema(), prior_messages, extractor_.get());
        for (const auto& d : rules.diagnostics) {
            notes.push_back("ignored '" + d.expression + "': " + d.message);
        }
        session.apply_rules(rules);
    }

    std::vector<std::size_t> candidates;
    if (filtered) {
        candidates = filter_candidates(*catalog_, session.constraints());
        if (candidates.empty() && !session.constraints().empty()) {
            const auto dropped = session.drop_newest();
            notes.push_back("no items satisfy every constraint; relaxed by dropping " +
                            dropped->text());
            candidates = filter_candidates(*catalog_, session.constraints());
        }
        if (candidates.empty()) notes.push_back("no items match the active constraints");
    } else {
        candidates.resize(catalog_->size());
        std::iota(candidates.begin(), candidates.end(), std::size_t{0});
    }

    TurnResult turn;
    turn.turn = session.turns() + 1;
    if (!candidates.empty()) {
        const std::size_t pool =
            session.variant() == Variant::V ? 2 * options_.top_k : options_.top_k;
        auto ranked = recommender_->rank(session.history(), session.intent_text(), candidates, pool);
        if (session.variant() == Variant::V && reranker_) {
            std::vector<RerankItem> items;
            for (const auto& r : ranked) {
                const Item& it = catalog_->item(r.index);
                items.push_back({it.id, it.title, it.attributes});
            }
            try {
                const auto order = reranker_->rerank(session.intent_text(), items);
                std::vector<ScoredItem> reordered;
                std::vector<bool> used(ranked.size(), false);
                for (const auto& id : order) {
                    for (std::size_t k = 0; k < ranked.size(); ++k) {
                        if (!used[k] && catalog_->item(ranked[k].index).id == id) {
                            used[k] = true;
                            reordered.push_back(ranked[k]);
                            break;
                        }
                    }
                }
                for (std::size_t k = 0; k < ranked.size(); ++k) {
                    if (!used[k]) reordered.push_back(ranked[k]);
                }
                ranked = std::move(reordered);
            } catch (const std::exception& e) {
                notes.push_back(std::string("reranker unavailable, kept filtered order: ") + e.what());
            }
        }
        if (ranked.size() > options_.top_k) ranked.resize(options_.top_k);
        turn.items = materialize(ranked);
    }
    turn.constraints = session.constraints();
    for (std::size_t i = 0; i < notes.size(); ++i) turn.note += (i ? "; " : "") + notes[i];
    session.record(turn);
    target = std::move(session);
    return turn;
}

}  // namespace crs

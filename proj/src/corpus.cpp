#include "crs/corpus.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace crs {

using nlohmann::json;

namespace {

std::string lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

std::optional<double> parse_number(std::string_view s) {
    if (s.empty()) return std::nullopt;
    double v = 0.0;
    const auto* end = s.data() + s.size();
    auto [ptr, ec] = std::from_chars(s.data(), end, v);
    if (ec != std::errc() || ptr != end || !std::isfinite(v)) return std::nullopt;
    return v;
}

std::string format_number(double v) {
    if (v == std::floor(v) && std::abs(v) < 1e15) {
        return std::to_string(static_cast<long long>(v));
    }
    std::ostringstream os;
    os << v;
    return os.str();
}

std::string attribute_to_string(const json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_number_integer()) return std::to_string(v.get<long long>());
    if (v.is_number()) return format_number(v.get<double>());
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    return v.dump();
}

}  // namespace

const AttributeSpec* CatalogSchema::find(std::string_view name) const {
    if (auto it = attributes.find(std::string(name)); it != attributes.end()) return &it->second;
    const auto key = lower(name);
    for (const auto& [n, spec] : attributes) {
        if (lower(n) == key) return &spec;
    }
    return nullptr;
}

Catalog::Catalog(std::vector<Item> items, CatalogSchema schema)
    : items_(std::move(items)), schema_(std::move(schema)) {
    std::sort(items_.begin(), items_.end(),
              [](const Item& a, const Item& b) { return a.id < b.id; });
    for (std::size_t i = 0; i < items_.size(); ++i) {
        if (!index_.emplace(items_[i].id, i).second) {
            throw std::invalid_argument("duplicate item id '" + items_[i].id + "'");
        }
        for (const auto& [name, value] : items_[i].attributes) {
            if (schema_.attributes.count(name) == 0) {
                throw std::invalid_argument("item '" + items_[i].id + "' has undeclared attribute '" +
                                            name + "'");
            }
            ++value_counts_[name][value];
        }
    }
}

std::optional<std::size_t> Catalog::find(std::string_view id) const {
    auto it = index_.find(std::string(id));
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

std::size_t Catalog::index_of(std::string_view id) const {
    auto idx = find(id);
    if (!idx) throw LookupError("unknown item '" + std::string(id) + "'");
    return *idx;
}

std::size_t Catalog::value_count(const std::string& attribute, const std::string& value) const {
    auto a = value_counts_.find(attribute);
    if (a == value_counts_.end()) return 0;
    auto v = a->second.find(value);
    return v == a->second.end() ? 0 : v->second;
}

std::vector<std::string> Catalog::values_of(const std::string& attribute) const {
    std::vector<std::string> out;
    if (auto a = value_counts_.find(attribute); a != value_counts_.end()) {
        for (const auto& [value, _] : a->second) out.push_back(value);
    }
    return out;
}

Catalog Catalog::subset(const std::vector<ItemId>& keep) const {
    std::vector<Item> items;
    std::set<ItemId> seen;
    for (const auto& id : keep) {
        if (auto idx = find(id); idx && seen.insert(id).second) items.push_back(items_[*idx]);
    }
    return Catalog(std::move(items), schema_);
}

std::size_t Dataset::num_actions() const {
    std::size_t n = 0;
    for (const auto& s : sequences) n += s.items.size();
    return n;
}

InteractionFormat parse_interaction_format(std::string_view s) {
    if (s == "tsv") return InteractionFormat::tsv;
    if (s == "jsonl") return InteractionFormat::jsonl;
    throw std::invalid_argument("unknown interaction format '" + std::string(s) + "'");
}

CatalogSchema load_schema(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open schema '" + path + "'");
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ParseError(path, 1, e.what());
    }
    CatalogSchema schema;
    schema.category = j.value("category", std::string("item"));
    for (const auto& [name, spec] : j.at("attributes").items()) {
        AttributeSpec a;
        a.name = name;
        const auto kind = spec.value("kind", std::string("categorical"));
        if (kind == "numeric") {
            a.kind = AttributeKind::numeric;
        } else if (kind != "categorical") {
            throw ParseError(path, 1, "attribute '" + name + "' has unknown kind '" + kind + "'");
        }
        a.bin_width = spec.value("bin_width", 0.0);
        if (a.bin_width < 0.0) throw ParseError(path, 1, "negative bin_width for '" + name + "'");
        schema.attributes.emplace(name, a);
    }
    return schema;
}

Catalog load_catalog(const std::string& items_path, const std::optional<CatalogSchema>& schema,
                     LoadReport* report) {
    std::ifstream in(items_path);
    if (!in) throw std::runtime_error("cannot open item metadata '" + items_path + "'");
    std::vector<Item> items;
    std::string line;
    std::size_t lineno = 0;
    std::size_t dropped_attrs = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw ParseError(items_path, lineno, std::string("malformed JSON: ") + e.what());
        }
        if (!j.is_object() || !j.contains("id")) {
            throw ParseError(items_path, lineno, "item record needs an 'id'");
        }
        Item item;
        item.id = attribute_to_string(j.at("id"));
        item.title = j.value("title", std::string());
        if (j.contains("attributes")) {
            if (!j.at("attributes").is_object()) {
                throw ParseError(items_path, lineno, "'attributes' must be an object");
            }
            for (const auto& [name, value] : j.at("attributes").items()) {
                if (value.is_null()) continue;
                item.attributes[name] = attribute_to_string(value);
            }
        }
        items.push_back(std::move(item));
    }

    CatalogSchema effective;
    if (schema) {
        effective = *schema;
        for (auto& item : items) {
            for (auto it = item.attributes.begin(); it != item.attributes.end();) {
                const AttributeSpec* spec = effective.find(it->first);
                if (!spec) {
                    ++dropped_attrs;
                    it = item.attributes.erase(it);
                    continue;
                }
                if (spec->kind == AttributeKind::numeric) {
                    auto v = parse_number(it->second);
                    if (!v) {
                        throw ParseError(items_path, 0,
                                         "item '" + item.id + "': attribute '" + it->first +
                                             "' is not numeric");
                    }
                    if (spec->bin_width > 0.0) {
                        *v = std::floor(*v / spec->bin_width) * spec->bin_width;
                    }
                    it->second = format_number(*v);
                }
                if (spec->name != it->first) {
                    auto value = it->second;
                    it = item.attributes.erase(it);
                    item.attributes[spec->name] = value;
                    continue;
                }
                ++it;
            }
        }
    } else {
        std::map<std::string, bool> all_numeric;
        for (const auto& item : items) {
            for (const auto& [name, value] : item.attributes) {
                auto [it, fresh] = all_numeric.emplace(name, true);
                it->second = it->second && parse_number(value).has_value();
            }
        }
        for (const auto& [name, numeric] : all_numeric) {
            AttributeSpec a;
            a.name = name;
            a.kind = numeric ? AttributeKind::numeric : AttributeKind::categorical;
            effective.attributes.emplace(name, a);
        }
    }
    if (report) report->dropped_attributes += dropped_attrs;
    return Catalog(std::move(items), std::move(effective));
}

Dataset build_dataset(const std::vector<Interaction>& interactions, Catalog catalog,
                      LoadReport* report) {
    std::map<UserId, std::vector<std::pair<std::int64_t, ItemId>>> per_user;
    std::size_t dropped = 0;
    for (const auto& r : interactions) {
        if (!catalog.find(r.item)) {
            ++dropped;
            continue;
        }
        per_user[r.user].emplace_back(r.timestamp, r.item);
    }
    if (report) {
        report->records += interactions.size();
        report->dropped_missing_metadata += dropped;
    }
    Dataset ds;
    ds.catalog = std::move(catalog);
    for (auto& [user, events] : per_user) {
        std::stable_sort(events.begin(), events.end(),
                         [](const auto& a, const auto& b) { return a.first < b.first; });
        UserSequence seq;
        seq.user = user;
        for (auto& [ts, item] : events) {
            seq.items.push_back(std::move(item));
            seq.timestamps.push_back(ts);
        }
        ds.sequences.push_back(std::move(seq));
    }
    if (ds.sequences.empty()) throw EmptyDatasetError("dataset has no usable interactions");
    return ds;
}

Dataset load_interactions(const std::string& path, InteractionFormat format, Catalog catalog,
                          LoadReport* report) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open interactions '" + path + "'");
    std::vector<Interaction> records;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        Interaction r;
        if (format == InteractionFormat::tsv) {
            std::vector<std::string> fields;
            std::stringstream ss(line);
            std::string f;
            while (std::getline(ss, f, '\t')) fields.push_back(f);
            if (fields.size() != 3) {
                throw ParseError(path, lineno, "expected 3 tab-separated fields, got " +
                                                   std::to_string(fields.size()));
            }
            r.user = fields[0];
            r.item = fields[1];
            auto ts = parse_number(fields[2]);
            if (!ts || *ts != std::floor(*ts)) {
                throw ParseError(path, lineno, "timestamp '" + fields[2] + "' is not an integer");
            }
            r.timestamp = static_cast<std::int64_t>(*ts);
        } else {
            json j;
            try {
                j = json::parse(line);
            } catch (const json::exception& e) {
                throw ParseError(path, lineno, std::string("malformed JSON: ") + e.what());
            }
            if (!j.is_object() || !j.contains("user") || !j.contains("item") ||
                !j.contains("timestamp") || !j.at("timestamp").is_number_integer()) {
                throw ParseError(path, lineno, "record needs user, item and integer timestamp");
            }
            r.user = attribute_to_string(j.at("user"));
            r.item = attribute_to_string(j.at("item"));
            r.timestamp = j.at("timestamp").get<std::int64_t>();
        }
        if (r.user.empty() || r.item.empty()) {
            throw ParseError(path, lineno, "empty user or item id");
        }
        records.push_back(std::move(r));
    }
    if (records.empty()) throw EmptyDatasetError("interaction file '" + path + "' is empty");
    return build_dataset(records, std::move(catalog), report);
}

Dataset apply_k_core(const Dataset& dataset, int k) {
    if (k < 1) throw std::invalid_argument("k-core: k must be >= 1");
    std::vector<UserSequence> seqs = dataset.sequences;
    while (true) {
        std::unordered_map<ItemId, std::size_t> item_counts;
        for (const auto& s : seqs) {
            for (const auto& i : s.items) ++item_counts[i];
        }
        bool changed = false;
        std::vector<UserSequence> next;
        for (auto& s : seqs) {
            if (s.items.size() < static_cast<std::size_t>(k)) {
                changed = true;
                continue;
            }
            UserSequence kept{s.user, {}, {}};
            for (std::size_t t = 0; t < s.items.size(); ++t) {
                if (item_counts[s.items[t]] >= static_cast<std::size_t>(k)) {
                    kept.items.push_back(s.items[t]);
                    kept.timestamps.push_back(s.timestamps[t]);
                } else {
                    changed = true;
                }
            }
            if (!kept.items.empty()) next.push_back(std::move(kept));
        }
        seqs = std::move(next);
        if (!changed) break;
    }
    if (seqs.empty()) throw EmptyDatasetError("k-core with k=" + std::to_string(k) + " is empty");

    std::set<ItemId> alive;
    for (const auto& s : seqs) alive.insert(s.items.begin(), s.items.end());
    Dataset out;
    out.catalog = dataset.catalog.subset({alive.begin(), alive.end()});
    out.sequences = std::move(seqs);
    return out;
}

Split leave_last_out_split(const Dataset& dataset) {
    Split split;
    for (const auto& s : dataset.sequences) {
        const auto n = s.items.size();
        if (n < 3) {
            ++split.excluded;
            continue;
        }
        split.train[s.user] = std::vector<ItemId>(s.items.begin(), s.items.end() - 2);
        split.valid[s.user] = s.items[n - 2];
        split.test[s.user] = s.items[n - 1];
    }
    if (split.excluded > 0) {
        std::cerr << "warning: " << split.excluded
                  << " user(s) with fewer than 3 interactions excluded from split\n";
    }
    return split;
}

std::vector<Segment> augment_sequences(const std::map<UserId, std::vector<ItemId>>& train,
                                       int factor, int min_len, std::uint64_t seed) {
    if (min_len < 2) throw std::invalid_argument("augment: min_len must be >= 2");
    if (factor < 0) throw std::invalid_argument("augment: factor must be >= 0");
    std::vector<Segment> out;
    for (const auto& [user, items] : train) out.push_back({user, items, false});
    std::mt19937_64 rng(seed);
    for (const auto& [user, items] : train) {
        const auto L = static_cast<int>(items.size());
        if (L < min_len + 1) continue;
        std::uniform_int_distribution<int> len(min_len, L - 1);
        for (int f = 0; f < factor; ++f) {
            const int t = len(rng);
            out.push_back({user, std::vector<ItemId>(items.begin(), items.begin() + t), true});
        }
    }
    return out;
}

DatasetStats dataset_stats(const Dataset& dataset) {
    DatasetStats st;
    st.num_users = dataset.sequences.size();
    st.num_items = dataset.catalog.size();
    st.num_actions = dataset.num_actions();
    if (st.num_users == 0 || st.num_items == 0) {
        throw EmptyDatasetError("statistics of an empty dataset");
    }
    st.avg_seq_len = static_cast<double>(st.num_actions) / static_cast<double>(st.num_users);
    st.sparsity = 1.0 - static_cast<double>(st.num_actions) /
                            (static_cast<double>(st.num_users) * static_cast<double>(st.num_items));
    return st;
}

std::vector<UserId> sample_users(const Split& split, std::size_t n, std::uint64_t seed) {
    std::vector<UserId> users;
    for (const auto& [u, _] : split.test) users.push_back(u);
    if (n >= users.size()) return users;
    std::mt19937_64 rng(seed);
    std::shuffle(users.begin(), users.end(), rng);
    users.resize(n);
    std::sort(users.begin(), users.end());
    return users;
}

std::vector<std::string> disclosure_order(const Item& item, const Catalog& catalog) {
    std::vector<std::string> names;
    for (const auto& [name, _] : item.attributes) names.push_back(name);
    std::stable_sort(names.begin(), names.end(), [&](const std::string& a, const std::string& b) {
        return catalog.value_count(a, item.attributes.at(a)) <
               catalog.value_count(b, item.attributes.at(b));
    });
    return names;
}

std::string soft_description(const Item& item, const Catalog& catalog) {
    auto order = disclosure_order(item, catalog);
    if (order.size() > 2) order.resize(2);
    std::sort(order.begin(), order.end());
    std::string text = "I am looking for a";
    for (const auto& name : order) text += " " + item.attributes.at(name);
    text += " " + catalog.schema().category;
    return text;
}

void save_snapshot(const Dataset& dataset, const std::string& path) {
    json j;
    j["format"] = "crs-dataset";
    j["version"] = kSnapshotVersion;
    json schema;
    schema["category"] = dataset.catalog.schema().category;
    schema["attributes"] = json::object();
    for (const auto& [name, spec] : dataset.catalog.schema().attributes) {
        schema["attributes"][name] = {
            {"kind", spec.kind == AttributeKind::numeric ? "numeric" : "categorical"},
            {"bin_width", spec.bin_width}};
    }
    j["schema"] = schema;
    j["items"] = json::array();
    for (const auto& item : dataset.catalog.items()) {
        j["items"].push_back({{"id", item.id}, {"title", item.title}, {"attributes", item.attributes}});
    }
    j["sequences"] = json::array();
    for (const auto& s : dataset.sequences) {
        j["sequences"].push_back({{"user", s.user}, {"items", s.items}, {"timestamps", s.timestamps}});
    }
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write snapshot '" + path + "'");
    out << j.dump() << '\n';
}

Dataset load_snapshot(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open snapshot '" + path + "'");
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ParseError(path, 1, e.what());
    }
    if (j.value("format", std::string()) != "crs-dataset") {
        throw ParseError(path, 1, "not a dataset snapshot");
    }
    if (j.value("version", 0) != kSnapshotVersion) {
        throw ParseError(path, 1, "unsupported snapshot version");
    }
    CatalogSchema schema;
    schema.category = j.at("schema").value("category", std::string("item"));
    for (const auto& [name, spec] : j.at("schema").at("attributes").items()) {
        AttributeSpec a;
        a.name = name;
        a.kind = spec.at("kind") == "numeric" ? AttributeKind::numeric : AttributeKind::categorical;
        a.bin_width = spec.value("bin_width", 0.0);
        schema.attributes.emplace(name, a);
    }
    std::vector<Item> items;
    for (const auto& ji : j.at("items")) {
        items.push_back({ji.at("id").get<std::string>(), ji.at("title").get<std::string>(),
                         ji.at("attributes").get<std::map<std::string, std::string>>()});
    }
    Dataset ds;
    ds.catalog = Catalog(std::move(items), std::move(schema));
    for (const auto& js : j.at("sequences")) {
        UserSequence s;
        s.user = js.at("user").get<std::string>();
        s.items = js.at("items").get<std::vector<std::string>>();
        s.timestamps = js.at("timestamps").get<std::vector<std::int64_t>>();
        if (s.items.size() != s.timestamps.size()) {
            throw ParseError(path, 1, "sequence of '" + s.user + "' has mismatched timestamps");
        }
        ds.sequences.push_back(std::move(s));
    }
    return ds;
}

}  // namespace crs

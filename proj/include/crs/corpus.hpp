#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace crs {

using ItemId = std::string;
using UserId = std::string;

class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& file, std::size_t line, const std::string& msg)
        : std::runtime_error(file + ":" + std::to_string(line) + ": " + msg), line_(line) {}
    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

class EmptyDatasetError : public std::runtime_error {
public:
    explicit EmptyDatasetError(const std::string& what) : std::runtime_error(what) {}
};

class LookupError : public std::out_of_range {
public:
    explicit LookupError(const std::string& what) : std::out_of_range(what) {}
};

enum class AttributeKind { categorical, numeric };

struct AttributeSpec {
    std::string name;
    AttributeKind kind = AttributeKind::categorical;
    /// Numeric values are mapped to floor(v / bin_width) * bin_width at
    /// ingest; 0 keeps them unbinned.
    double bin_width = 0.0;
};

/// Declared attribute names and kinds, plus the noun used in descriptions.
struct CatalogSchema {
    std::string category = "item";
    std::map<std::string, AttributeSpec> attributes;

    /// Case-insensitive lookup.
    const AttributeSpec* find(std::string_view name) const;
};

struct Item {
    ItemId id;
    std::string title;
    std::map<std::string, std::string> attributes;
};

/// Items sorted by id. The dense index of an item is its position in that
/// order, so "ascending id" and "ascending index" coincide.
class Catalog {
public:
    Catalog() = default;
    Catalog(std::vector<Item> items, CatalogSchema schema);

    std::size_t size() const { return items_.size(); }
    bool empty() const { return items_.empty(); }
    const std::vector<Item>& items() const { return items_; }
    const Item& item(std::size_t index) const { return items_.at(index); }
    const CatalogSchema& schema() const { return schema_; }

    std::optional<std::size_t> find(std::string_view id) const;
    std::size_t index_of(std::string_view id) const;  // throws LookupError
    const Item& by_id(std::string_view id) const { return items_[index_of(id)]; }

    /// Number of catalog items carrying `attribute == value`.
    std::size_t value_count(const std::string& attribute, const std::string& value) const;
    /// Known values of an attribute, sorted.
    std::vector<std::string> values_of(const std::string& attribute) const;

    /// Restricts to the given ids (ids absent from the catalog are ignored).
    Catalog subset(const std::vector<ItemId>& keep) const;

private:
    std::vector<Item> items_;
    CatalogSchema schema_;
    std::unordered_map<std::string, std::size_t> index_;
    std::map<std::string, std::map<std::string, std::size_t>> value_counts_;
};

struct Interaction {
    UserId user;
    ItemId item;
    std::int64_t timestamp = 0;
};

struct UserSequence {
    UserId user;
    std::vector<ItemId> items;          // oldest first
    std::vector<std::int64_t> timestamps;
};

struct Dataset {
    Catalog catalog;
    std::vector<UserSequence> sequences;  // sorted by user id

    std::size_t num_actions() const;
};

enum class InteractionFormat { tsv, jsonl };

InteractionFormat parse_interaction_format(std::string_view s);

struct LoadReport {
    std::size_t records = 0;
    std::size_t dropped_missing_metadata = 0;
    std::size_t dropped_attributes = 0;
};

/// Item metadata: JSON-lines `{id, title, attributes:{name:value}}`. When
/// `schema` is given, undeclared attributes are dropped and numeric ones are
/// binned; otherwise the schema is inferred (attributes whose every value is
/// numeric become numeric, unbinned).
Catalog load_catalog(const std::string& items_path,
                     const std::optional<CatalogSchema>& schema = std::nullopt,
                     LoadReport* report = nullptr);

CatalogSchema load_schema(const std::string& path);

/// Reads interactions, drops those whose item lacks metadata, sorts each
/// user's interactions by timestamp (stable w.r.t. file order).
Dataset load_interactions(const std::string& path, InteractionFormat format, Catalog catalog,
                          LoadReport* report = nullptr);

/// Builds sequences from in-memory interactions (same ordering rules).
Dataset build_dataset(const std::vector<Interaction>& interactions, Catalog catalog,
                      LoadReport* report = nullptr);

/// Maximal k-core by iterative peeling. Items without interactions leave the
/// catalog. Throws EmptyDatasetError if nothing survives.
Dataset apply_k_core(const Dataset& dataset, int k);

struct Split {
    std::map<UserId, std::vector<ItemId>> train;
    std::map<UserId, ItemId> valid;
    std::map<UserId, ItemId> test;
    std::size_t excluded = 0;  // users with fewer than 3 interactions
};

Split leave_last_out_split(const Dataset& dataset);

/// A training sequence: the last element is the prediction target, the rest
/// its context.
struct Segment {
    UserId user;
    std::vector<ItemId> items;
    bool augmented = false;
};

/// Originals (one per training sequence, in user order) followed by `factor`
/// random prefixes of length t ~ U[min_len, L-1] per sequence with
/// L >= min_len + 1.
std::vector<Segment> augment_sequences(const std::map<UserId, std::vector<ItemId>>& train,
                                       int factor, int min_len, std::uint64_t seed);

struct DatasetStats {
    std::size_t num_users = 0;
    std::size_t num_items = 0;
    std::size_t num_actions = 0;
    double avg_seq_len = 0.0;
    double sparsity = 0.0;
};

DatasetStats dataset_stats(const Dataset& dataset);

/// Uniform sample of `n` test users (all of them when n >= size).
std::vector<UserId> sample_users(const Split& split, std::size_t n, std::uint64_t seed);

/// Attributes of `item` ordered by how few catalog items share its value
/// (most selective first, ties by name).
std::vector<std::string> disclosure_order(const Item& item, const Catalog& catalog);

/// "I am looking for a <v1> <v2> <category>" from the item's two most
/// selective attribute values (listed in name order).
std::string soft_description(const Item& item, const Catalog& catalog);

/// Versioned JSON snapshot (see docs/formats.md).
void save_snapshot(const Dataset& dataset, const std::string& path);
Dataset load_snapshot(const std::string& path);

inline constexpr int kSnapshotVersion = 1;

}  // namespace crs

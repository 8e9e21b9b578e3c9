#pragma once

// Planted-intent corpus: items partitioned into blocks (one genre per block),
// users drawn from one block and interacting mostly inside it with a
// Zipf-shaped popularity profile.

#include "crs/corpus.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace crs {

struct PlantedConfig {
    int users = 200;
    int items = 80;
    int blocks = 4;
    double in_block = 0.9;
    int min_len = 5;
    int max_len = 8;
    /// Within-block popularity ∝ 1 / rank^zipf.
    double zipf = 1.0;
    int eras = 5;
    std::uint64_t seed = 13;
};

struct PlantedCorpus {
    std::vector<Item> items;
    std::vector<Interaction> interactions;
    CatalogSchema schema;
    std::map<UserId, int> user_block;
    std::map<ItemId, int> item_block;
};

PlantedCorpus make_planted_corpus(const PlantedConfig& cfg);

/// Writes `interactions.tsv`, `items.jsonl` and `schema.json` into `dir`.
void write_planted_corpus(const PlantedCorpus& corpus, const std::string& dir);

}  // namespace crs

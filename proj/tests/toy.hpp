#pragma once

// Untrained random-parameter model over a small hand-written catalog, for
// tests that need a working engine but not a trained one.

#include "support.hpp"

#include "crs/conversation.hpp"

#include <memory>

namespace crs::testing {

inline CatalogSchema toy_schema() {
    CatalogSchema s;
    s.category = "movie";
    s.attributes["genre"] = {"genre", AttributeKind::categorical, 0.0};
    s.attributes["year"] = {"year", AttributeKind::numeric, 0.0};
    s.attributes["size"] = {"size", AttributeKind::categorical, 0.0};
    return s;
}

/// Ten items; m00..m02 are Action, one item lacks a size.
inline std::vector<Item> toy_items() {
    const char* genres[] = {"Action", "Action", "Action", "Drama", "Drama", "Comedy", "Comedy", "Drama", "Horror", "Comedy"};
    const char* sizes[] = {"S", "M", "L", "M", "L", "S", "M", "L", "S", ""};
    std::vector<Item> items;
    for (int i = 0; i < 10; ++i) {
        Item it;
        it.id = "m0" + std::to_string(i);
        it.title = "Movie " + std::to_string(i);
        it.attributes["genre"] = genres[i];
        it.attributes["year"] = std::to_string(1990 + 3 * i);
        if (*sizes[i]) it.attributes["size"] = sizes[i];
        items.push_back(it);
    }
    return items;
}

struct Toy {
    std::shared_ptr<const Catalog> catalog;
    std::shared_ptr<const ModelBundle> bundle;
    std::shared_ptr<const embed::TextEncoder> text;
    std::shared_ptr<const Recommender> recommender;
};

inline Toy make_toy(std::uint64_t seed = 1, std::vector<Item> items = toy_items(), int K = 3) {
    Toy t;
    t.catalog = std::make_shared<const Catalog>(items, toy_schema());
    std::vector<ItemId> ids;
    for (const auto& it : t.catalog->items()) ids.push_back(it.id);
    EncoderConfig ec;
    ec.item_dim = 6;
    ec.user_dim = 6;
    ec.hidden = {6};
    ec.seed = seed;
    auto b = std::make_shared<ModelBundle>();
    b->encoder = BehaviorEncoder(ids, ec);
    std::mt19937_64 rng(seed);
    nn::init_uniform(b->encoder.params(), -1, 1, rng);
    b->latent = random_model(small_dims(6, 16), K, seed);
    b->population_behavior = random_vector(6, rng);
    b->text_provider = "local-hash3-v1/16";
    t.bundle = b;
    t.text = std::make_shared<const embed::TextEncoder>(std::make_shared<embed::LocalHashProvider>(16));
    t.recommender = std::make_shared<const Recommender>(t.bundle, t.text);
    return t;
}

}  // namespace crs::testing

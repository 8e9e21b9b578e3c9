#include "crs/synthetic.hpp"

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

namespace crs {

namespace {

const char* const kGenres[] = {"Action", "Comedy", "Drama",   "Horror",  "Romance", "Western",
                               "Sci-Fi", "Musical", "Mystery", "Fantasy", "Crime",   "War"};

std::string pad(int v, int width) {
    auto s = std::to_string(v);
    return std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(s.size()))), '0') + s;
}

}  // namespace

PlantedCorpus make_planted_corpus(const PlantedConfig& cfg) {
    if (cfg.blocks < 1 || cfg.blocks > 12) throw std::invalid_argument("blocks must be in [1, 12]");
    if (cfg.items < cfg.blocks) throw std::invalid_argument("fewer items than blocks");
    if (cfg.min_len < 1 || cfg.max_len < cfg.min_len) throw std::invalid_argument("bad lengths");
    if (cfg.max_len > cfg.items) throw std::invalid_argument("max_len exceeds catalog size");

    PlantedCorpus corpus;
    corpus.schema.category = "movie";
    corpus.schema.attributes["genre"] = {"genre", AttributeKind::categorical, 0.0};
    corpus.schema.attributes["era"] = {"era", AttributeKind::categorical, 0.0};

    const int width = static_cast<int>(std::to_string(cfg.items).size());
    std::vector<std::vector<int>> members(static_cast<std::size_t>(cfg.blocks));
    for (int i = 0; i < cfg.items; ++i) {
        const int block = i % cfg.blocks;
        const int rank_in_block = i / cfg.blocks;
        Item item;
        item.id = "i" + pad(i, width);
        item.title = std::string(kGenres[block]) + " Title " + std::to_string(i);
        item.attributes["genre"] = kGenres[block];
        item.attributes["era"] = std::to_string(1950 + 10 * (rank_in_block % cfg.eras)) + "s";
        corpus.item_block[item.id] = block;
        members[static_cast<std::size_t>(block)].push_back(i);
        corpus.items.push_back(std::move(item));
    }

    std::mt19937_64 rng(cfg.seed);
    std::vector<std::discrete_distribution<int>> popularity;
    for (const auto& m : members) {
        std::vector<double> w;
        for (std::size_t r = 0; r < m.size(); ++r) w.push_back(1.0 / std::pow(r + 1.0, cfg.zipf));
        popularity.emplace_back(w.begin(), w.end());
    }
    std::uniform_int_distribution<int> any_item(0, cfg.items - 1);
    std::uniform_int_distribution<int> length(cfg.min_len, cfg.max_len);
    std::bernoulli_distribution stay(cfg.in_block);

    const int uwidth = static_cast<int>(std::to_string(cfg.users).size());
    for (int u = 0; u < cfg.users; ++u) {
        const int block = u % cfg.blocks;
        const UserId user = "u" + pad(u, uwidth);
        corpus.user_block[user] = block;
        const int len = length(rng);
        std::set<int> seen;
        std::int64_t ts = 1'000'000 + 1000 * u;
        const auto& own = members[static_cast<std::size_t>(block)];
        while (static_cast<int>(seen.size()) < len) {
            int item = -1;
            const bool inside = stay(rng) && seen.size() < own.size();
            for (int attempt = 0; attempt < 1000 && item < 0; ++attempt) {
                int cand = inside ? own[static_cast<std::size_t>(
                                        popularity[static_cast<std::size_t>(block)](rng))]
                                  : any_item(rng);
                if (!inside && cand % cfg.blocks == block && cfg.blocks > 1) continue;
                if (seen.count(cand) == 0) item = cand;
            }
            if (item < 0) {
                for (int c = 0; c < cfg.items && item < 0; ++c) {
                    if (seen.count(c) == 0) item = c;
                }
            }
            seen.insert(item);
            corpus.interactions.push_back(
                {user, corpus.items[static_cast<std::size_t>(item)].id, ts});
            ts += 60;
        }
    }
    return corpus;
}

void write_planted_corpus(const PlantedCorpus& corpus, const std::string& dir) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream out(dir + "/interactions.tsv");
        for (const auto& r : corpus.interactions) {
            out << r.user << '\t' << r.item << '\t' << r.timestamp << '\n';
        }
    }
    {
        std::ofstream out(dir + "/items.jsonl");
        for (const auto& item : corpus.items) {
            nlohmann::json j{{"id", item.id}, {"title", item.title}, {"attributes", item.attributes}};
            out << j.dump() << '\n';
        }
    }
    {
        nlohmann::json j;
        j["category"] = corpus.schema.category;
        j["attributes"] = nlohmann::json::object();
        for (const auto& [name, spec] : corpus.schema.attributes) {
            j["attributes"][name] = {
                {"kind", spec.kind == AttributeKind::numeric ? "numeric" : "categorical"}};
        }
        std::ofstream out(dir + "/schema.json");
        out << j.dump(2) << '\n';
    }
}

}  // namespace crs

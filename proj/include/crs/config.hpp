#pragma once

// Configuration files: one `key = value` per line, `#` starts a comment,
// keys are dotted section names (see docs/formats.md).

#include "crs/em_trainer.hpp"
#include "crs/encoder.hpp"

#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace crs {

using KeyValues = std::map<std::string, std::string>;

/// Throws ParseError on a malformed line or a repeated key.
KeyValues parse_config(std::string_view text, const std::string& origin = "<config>");
KeyValues load_config(const std::string& path);

struct TextSettings {
    int dim = 256;
    std::string template_text;  // empty: default one-word template
    std::string model = "default";
    std::string cache_path;     // empty: in-memory cache
    std::string endpoint;       // empty: local hash embedder
    std::string token;
};

struct ServiceConfig {
    std::string checkpoint;
    std::string data_dir;  // ingested dataset (catalog source)
    std::string host = "127.0.0.1";
    int port = 8080;
    std::size_t top_k = 5;
    int max_turns = 5;
    std::string extractor_endpoint;
    std::string reranker_endpoint;
};

struct EvalSettings {
    std::vector<int> ks{5, 10, 20};
    std::size_t sample = 0;  // 0: every test user
    int max_turns = 5;
    std::size_t items_per_turn = 5;
    double noise = 0.0;
};

struct IntentSettings {
    int max_iters = 200;
    int restarts = 10;
};

struct Settings {
    EncoderConfig encoder;
    IntentSettings intents;
    TrainConfig train;
    TextSettings text;
    ServiceConfig service;
    EvalSettings eval;
    int k_core = 0;
};

/// Applies recognised keys over `base`. Unknown keys and unparsable values
/// throw ConfigError.
Settings apply_config(const KeyValues& kv, Settings base = {});

/// CRS_CHECKPOINT, CRS_PORT, EMBED_ENDPOINT, EMBED_TOKEN.
void apply_env_overrides(Settings& settings);

/// Sets every seed (encoder, training) from one value.
void apply_seed(Settings& settings, std::uint64_t seed);

}  // namespace crs

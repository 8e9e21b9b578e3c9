#include "crs/config.hpp"

#include "crs/text_embed.hpp"

#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

namespace crs {

namespace {

double to_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used == v.size()) return d;
    } catch (const std::exception&) {
    }
    throw ConfigError("'" + key + "': expected a number, got '" + v + "'");
}

long long to_int(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const long long i = std::stoll(v, &used);
        if (used == v.size()) return i;
    } catch (const std::exception&) {
    }
    throw ConfigError("'" + key + "': expected an integer, got '" + v + "'");
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("'" + key + "': expected true or false, got '" + v + "'");
}

std::vector<int> to_int_list(const std::string& key, const std::string& v) {
    std::vector<int> out;
    std::stringstream ss(v);
    std::string part;
    while (std::getline(ss, part, ',')) {
        part = embed::trim(part);
        if (!part.empty()) out.push_back(static_cast<int>(to_int(key, part)));
    }
    return out;
}

}  // namespace

KeyValues parse_config(std::string_view text, const std::string& origin) {
    KeyValues kv;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        line = embed::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ParseError(origin, n, "expected 'key = value'");
        const std::string key = embed::trim(std::string_view(line).substr(0, eq));
        const std::string value = embed::trim(std::string_view(line).substr(eq + 1));
        if (key.empty()) throw ParseError(origin, n, "empty key");
        if (!kv.emplace(key, value).second) throw ParseError(origin, n, "duplicate key '" + key + "'");
    }
    return kv;
}

KeyValues load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open config " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config(ss.str(), path);
}

Settings apply_config(const KeyValues& kv, Settings s) {
    using Setter = std::function<void(const std::string&, const std::string&)>;
    auto& e = s.encoder;
    auto& t = s.train;
    auto& sv = s.service;
    const std::map<std::string, Setter> setters{
        {"encoder.item_dim", [&](auto& k, auto& v) { e.item_dim = static_cast<int>(to_int(k, v)); }},
        {"encoder.user_dim", [&](auto& k, auto& v) { e.user_dim = static_cast<int>(to_int(k, v)); }},
        {"encoder.hidden", [&](auto& k, auto& v) { e.hidden = to_int_list(k, v); }},
        {"encoder.activation", [&](auto&, auto& v) { e.activation = nn::parse_activation(v); }},
        {"encoder.decay", [&](auto& k, auto& v) { e.decay = to_double(k, v); }},
        {"encoder.negatives", [&](auto& k, auto& v) { e.negatives = static_cast<int>(to_int(k, v)); }},
        {"encoder.epochs", [&](auto& k, auto& v) { e.epochs = static_cast<int>(to_int(k, v)); }},
        {"encoder.lr", [&](auto& k, auto& v) { e.lr = to_double(k, v); }},
        {"encoder.batch_size", [&](auto& k, auto& v) { e.batch_size = static_cast<int>(to_int(k, v)); }},
        {"encoder.max_context", [&](auto& k, auto& v) { e.max_context = static_cast<int>(to_int(k, v)); }},
        {"encoder.seed", [&](auto& k, auto& v) { e.seed = static_cast<std::uint64_t>(to_int(k, v)); }},

        {"intents.max_iters", [&](auto& k, auto& v) { s.intents.max_iters = static_cast<int>(to_int(k, v)); }},
        {"intents.restarts", [&](auto& k, auto& v) { s.intents.restarts = static_cast<int>(to_int(k, v)); }},

        {"train.num_intents", [&](auto& k, auto& v) { t.num_intents = static_cast<int>(to_int(k, v)); }},
        {"train.lambda", [&](auto& k, auto& v) { t.lambda = to_double(k, v); }},
        {"train.alpha_m", [&](auto& k, auto& v) { t.alpha_m = to_double(k, v); }},
        {"train.alpha_e", [&](auto& k, auto& v) { t.alpha_e = to_double(k, v); }},
        {"train.tau", [&](auto& k, auto& v) { t.tau = to_double(k, v); }},
        {"train.negatives", [&](auto& k, auto& v) { t.negatives = static_cast<int>(to_int(k, v)); }},
        {"train.batch_size", [&](auto& k, auto& v) { t.batch_size = static_cast<int>(to_int(k, v)); }},
        {"train.stage1.epochs", [&](auto& k, auto& v) { t.stage1.max_epochs = static_cast<int>(to_int(k, v)); }},
        {"train.stage1.lr", [&](auto& k, auto& v) { t.stage1.lr = to_double(k, v); }},
        {"train.stage2.epochs", [&](auto& k, auto& v) { t.stage2.max_epochs = static_cast<int>(to_int(k, v)); }},
        {"train.stage2.lr", [&](auto& k, auto& v) { t.stage2.lr = to_double(k, v); }},
        {"train.stage3.epochs", [&](auto& k, auto& v) { t.stage3.max_epochs = static_cast<int>(to_int(k, v)); }},
        {"train.stage3.lr", [&](auto& k, auto& v) { t.stage3.lr = to_double(k, v); }},
        {"train.patience", [&](auto& k, auto& v) { t.patience = static_cast<int>(to_int(k, v)); }},
        {"train.eval_k", [&](auto& k, auto& v) { t.eval_k = static_cast<int>(to_int(k, v)); }},
        {"train.augment_factor", [&](auto& k, auto& v) { t.augment_factor = static_cast<int>(to_int(k, v)); }},
        {"train.augment_min_len", [&](auto& k, auto& v) { t.augment_min_len = static_cast<int>(to_int(k, v)); }},
        {"train.frozen_negatives", [&](auto& k, auto& v) { t.frozen_negatives = to_bool(k, v); }},
        {"train.trainable_intents", [&](auto& k, auto& v) { t.trainable_intents = to_bool(k, v); }},
        {"train.variant", [&](auto&, auto& v) { t.variant = parse_training_variant(v); }},
        {"train.seed", [&](auto& k, auto& v) { t.seed = static_cast<std::uint64_t>(to_int(k, v)); }},
        {"train.dims.attention", [&](auto& k, auto& v) { t.dims.attention = static_cast<int>(to_int(k, v)); }},
        {"train.dims.proj", [&](auto& k, auto& v) { t.dims.proj = static_cast<int>(to_int(k, v)); }},
        {"train.dims.context", [&](auto& k, auto& v) { t.dims.context = static_cast<int>(to_int(k, v)); }},
        {"train.dims.bilinear", [&](auto& k, auto& v) { t.dims.bilinear = static_cast<int>(to_int(k, v)); }},
        {"train.dims.hidden", [&](auto& k, auto& v) { t.dims.hidden = to_int_list(k, v); }},
        {"train.dims.activation", [&](auto&, auto& v) { t.dims.activation = nn::parse_activation(v); }},

        {"text.dim", [&](auto& k, auto& v) { s.text.dim = static_cast<int>(to_int(k, v)); }},
        {"text.template", [&](auto&, auto& v) { s.text.template_text = v; }},
        {"text.model", [&](auto&, auto& v) { s.text.model = v; }},
        {"text.cache", [&](auto&, auto& v) { s.text.cache_path = v; }},
        {"text.endpoint", [&](auto&, auto& v) { s.text.endpoint = v; }},

        {"service.checkpoint", [&](auto&, auto& v) { sv.checkpoint = v; }},
        {"service.data", [&](auto&, auto& v) { sv.data_dir = v; }},
        {"service.host", [&](auto&, auto& v) { sv.host = v; }},
        {"service.port", [&](auto& k, auto& v) { sv.port = static_cast<int>(to_int(k, v)); }},
        {"service.top_k", [&](auto& k, auto& v) { sv.top_k = static_cast<std::size_t>(to_int(k, v)); }},
        {"service.max_turns", [&](auto& k, auto& v) { sv.max_turns = static_cast<int>(to_int(k, v)); }},
        {"service.extractor", [&](auto&, auto& v) { sv.extractor_endpoint = v; }},
        {"service.reranker", [&](auto&, auto& v) { sv.reranker_endpoint = v; }},

        {"eval.k", [&](auto& k, auto& v) { s.eval.ks = to_int_list(k, v); }},
        {"eval.sample", [&](auto& k, auto& v) { s.eval.sample = static_cast<std::size_t>(to_int(k, v)); }},
        {"eval.max_turns", [&](auto& k, auto& v) { s.eval.max_turns = static_cast<int>(to_int(k, v)); }},
        {"eval.items_per_turn", [&](auto& k, auto& v) { s.eval.items_per_turn = static_cast<std::size_t>(to_int(k, v)); }},
        {"eval.noise", [&](auto& k, auto& v) { s.eval.noise = to_double(k, v); }},

        {"data.k_core", [&](auto& k, auto& v) { s.k_core = static_cast<int>(to_int(k, v)); }},
    };
    for (const auto& [key, value] : kv) {
        auto it = setters.find(key);
        if (it == setters.end()) throw ConfigError("unknown config key '" + key + "'");
        try {
            it->second(key, value);
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception& ex) {
            throw ConfigError("'" + key + "': " + ex.what());
        }
    }
    return s;
}

void apply_env_overrides(Settings& s) {
    if (const char* v = std::getenv("CRS_CHECKPOINT"); v && *v) s.service.checkpoint = v;
    if (const char* v = std::getenv("CRS_PORT"); v && *v) {
        s.service.port = static_cast<int>(to_int("CRS_PORT", v));
    }
    if (const char* v = std::getenv("EMBED_ENDPOINT"); v && *v) s.text.endpoint = v;
    if (const char* v = std::getenv("EMBED_TOKEN"); v && *v) s.text.token = v;
}

void apply_seed(Settings& s, std::uint64_t seed) {
    s.encoder.seed = seed;
    s.train.seed = seed;
}

}  // namespace crs

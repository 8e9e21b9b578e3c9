#include "crs/text_embed.hpp"

#include "crs/http_json.hpp"

#include <httplib.h>
#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace crs::embed {

namespace {

std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 1469598103934665603ULL) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

constexpr char kCacheMagic[6] = {'C', 'R', 'S', 'E', 'M', 'B'};

}  // namespace

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

std::string EmbedRequest::render() const {
    const auto pos = template_text.find(kPlaceholder);
    if (pos == std::string::npos ||
        template_text.find(kPlaceholder, pos + kPlaceholder.size()) != std::string::npos) {
        throw std::invalid_argument("template must contain exactly one '*sentence*' placeholder");
    }
    std::string out = template_text;
    out.replace(pos, kPlaceholder.size(), text);
    return out;
}

Vector local_embed(std::string_view text, int dim) {
    if (dim <= 0) throw std::invalid_argument("embedding dim must be positive");
    std::string folded = " ";
    for (unsigned char c : text) folded.push_back(static_cast<char>(std::tolower(c)));
    folded.push_back(' ');
    Vector v = Vector::Zero(dim);
    for (std::size_t i = 0; i + 3 <= folded.size(); ++i) {
        const std::uint64_t h = fnv1a(std::string_view(folded).substr(i, 3));
        const auto bucket = static_cast<Eigen::Index>(h % static_cast<std::uint64_t>(dim));
        v[bucket] += (h >> 63) ? -1.0 : 1.0;
    }
    double norm = v.norm();
    if (norm == 0.0) {
        v[static_cast<Eigen::Index>(fnv1a(folded) % static_cast<std::uint64_t>(dim))] = 1.0;
        norm = 1.0;
    }
    return v / norm;
}

RemoteProvider::RemoteProvider(std::string endpoint, std::string token, std::string model, int dim)
    : endpoint_(std::move(endpoint)), token_(std::move(token)), model_(std::move(model)), dim_(dim) {
    if (dim_ <= 0) throw std::invalid_argument("remote embedder dim must be positive");
}

std::optional<RemoteProvider> RemoteProvider::from_env(std::string model, int dim) {
    const char* ep = std::getenv("EMBED_ENDPOINT");
    if (!ep || !*ep) return std::nullopt;
    const char* tok = std::getenv("EMBED_TOKEN");
    return RemoteProvider(ep, tok ? tok : "", std::move(model), dim);
}

namespace {

/// Splits "http://host:port/path" into ("http://host:port", "/path").
std::pair<std::string, std::string> split_url(const std::string& url) {
    const auto scheme = url.find("://");
    const auto path_start = url.find('/', scheme == std::string::npos ? 0 : scheme + 3);
    if (path_start == std::string::npos) return {url, "/"};
    return {url.substr(0, path_start), url.substr(path_start)};
}

}  // namespace
}  // namespace crs::embed

namespace crs::http {

nlohmann::json post_json(const std::string& endpoint, const nlohmann::json& body,
                         const std::string& bearer_token, int read_timeout_s) {
    auto [base, path] = embed::split_url(endpoint);
    httplib::Client client(base);
    client.set_connection_timeout(5);
    client.set_read_timeout(read_timeout_s);
    httplib::Headers headers;
    if (!bearer_token.empty()) headers.emplace("Authorization", "Bearer " + bearer_token);
    auto res = client.Post(path, headers, body.dump(), "application/json");
    if (!res) {
        throw embed::TransportError(endpoint + " unreachable: " + httplib::to_string(res.error()));
    }
    if (res->status != 200) {
        throw embed::TransportError(endpoint + " returned HTTP " + std::to_string(res->status));
    }
    try {
        return nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::exception& e) {
        throw embed::ContractError(endpoint + " replied with invalid JSON: " + e.what());
    }
}

}  // namespace crs::http

namespace crs::embed {

Vector RemoteProvider::embed(const EmbedRequest& request) {
    const nlohmann::json body{{"model", model_}, {"input", request.render()}};
    const auto j = http::post_json(endpoint_, body, token_);
    if (!j.contains("embedding") || !j.at("embedding").is_array()) {
        throw ContractError("embedding response lacks an 'embedding' array");
    }
    const auto values = j.at("embedding").get<std::vector<double>>();
    if (j.contains("dim") && j.at("dim").get<int>() != static_cast<int>(values.size())) {
        throw ContractError("embedding response 'dim' disagrees with vector length");
    }
    return Eigen::Map<const Vector>(values.data(), static_cast<Eigen::Index>(values.size()));
}

std::uint64_t cache_key(std::string_view provider_id, std::string_view template_text,
                        std::string_view text) {
    std::uint64_t h = fnv1a(provider_id);
    h = fnv1a("\x1f", h);
    h = fnv1a(template_text, h);
    h = fnv1a("\x1f", h);
    return fnv1a(text, h);
}

EmbeddingCache::EmbeddingCache(std::string path) : path_(std::move(path)) {
    std::ifstream in(path_, std::ios::binary);
    if (!in) {
        std::ofstream out(path_, std::ios::binary);
        if (!out) throw std::runtime_error("cannot create embedding cache '" + path_ + "'");
        out.write(kCacheMagic, sizeof(kCacheMagic));
        out.put(static_cast<char>(kVersion));
        return;
    }
    char magic[sizeof(kCacheMagic)];
    in.read(magic, sizeof(magic));
    const int version = in.get();
    if (!in || std::memcmp(magic, kCacheMagic, sizeof(magic)) != 0) {
        throw std::runtime_error("'" + path_ + "' is not an embedding cache");
    }
    if (version != kVersion) {
        throw std::runtime_error("embedding cache '" + path_ + "' has unsupported version " +
                                 std::to_string(version));
    }
    while (true) {
        std::uint64_t key;
        std::uint32_t dim;
        if (!in.read(reinterpret_cast<char*>(&key), 8)) break;
        if (!in.read(reinterpret_cast<char*>(&dim), 4)) break;
        Vector v(dim);
        if (!in.read(reinterpret_cast<char*>(v.data()), 8 * static_cast<std::streamsize>(dim))) break;
        entries_[key] = std::move(v);
    }
}

std::optional<Vector> EmbeddingCache::get(std::uint64_t key) const {
    std::lock_guard lock(mu_);
    auto it = entries_.find(key);
    if (it == entries_.end()) return std::nullopt;
    return it->second;
}

bool EmbeddingCache::put(std::uint64_t key, const Vector& v) {
    std::lock_guard lock(mu_);
    if (entries_.count(key) != 0) return false;
    if (!path_.empty()) {
        std::ofstream out(path_, std::ios::binary | std::ios::app);
        const auto dim = static_cast<std::uint32_t>(v.size());
        out.write(reinterpret_cast<const char*>(&key), 8);
        out.write(reinterpret_cast<const char*>(&dim), 4);
        out.write(reinterpret_cast<const char*>(v.data()), 8 * static_cast<std::streamsize>(dim));
        if (!out) throw std::runtime_error("failed to append to embedding cache '" + path_ + "'");
    }
    entries_.emplace(key, v);
    return true;
}

std::size_t EmbeddingCache::size() const {
    std::lock_guard lock(mu_);
    return entries_.size();
}

TextEncoder::TextEncoder(std::shared_ptr<EmbeddingProvider> provider,
                         std::shared_ptr<EmbeddingCache> cache, std::string template_text)
    : provider_(std::move(provider)), cache_(std::move(cache)), template_(std::move(template_text)) {
    if (!provider_) throw std::invalid_argument("TextEncoder needs a provider");
    if (!cache_) cache_ = std::make_shared<EmbeddingCache>();
    EmbedRequest{"x", template_}.render();  // validates the placeholder
}

TextEmbedding TextEncoder::embed(std::string_view text) const {
    const auto clean = trim(text);
    if (clean.empty()) throw std::invalid_argument("cannot embed empty text");
    const auto pid = provider_->id();
    const auto key = cache_key(pid, template_, clean);
    if (auto hit = cache_->get(key)) {
        if (hit->size() != provider_->dim()) {
            throw ContractError("cached vector has dim " + std::to_string(hit->size()) +
                                ", provider manifest says " + std::to_string(provider_->dim()));
        }
        return {std::move(*hit), pid};
    }
    Vector v = provider_->embed({clean, template_});
    if (v.size() != provider_->dim()) {
        throw ContractError("provider '" + pid + "' returned dim " + std::to_string(v.size()) +
                            ", manifest says " + std::to_string(provider_->dim()));
    }
    if (!v.allFinite()) throw ContractError("provider '" + pid + "' returned non-finite values");
    cache_->put(key, v);
    return {std::move(v), pid};
}

WarmReport TextEncoder::warm_cache(const std::vector<std::string>& texts) const {
    WarmReport report;
    const auto pid = provider_->id();
    for (const auto& text : texts) {
        try {
            const auto clean = trim(text);
            if (clean.empty()) throw std::invalid_argument("empty text");
            const auto key = cache_key(pid, template_, clean);
            if (cache_->get(key)) continue;
            Vector v = provider_->embed({clean, template_});
            if (v.size() != provider_->dim()) throw ContractError("dimension mismatch");
            if (cache_->put(key, v)) ++report.written;
        } catch (const std::exception& e) {
            report.failures[text] = e.what();
        }
    }
    return report;
}

}  // namespace crs::embed

#pragma once

#include "crs/neural.hpp"

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace crs::embed {

using nn::Vector;

/// One-word summarisation prompt used for LLM embedders. The placeholder is
/// the literal `*sentence*`.
inline constexpr std::string_view kDefaultTemplate =
    "This sentence: \xE2\x80\x98*sentence*\xE2\x80\x99 means in one word:";
inline constexpr std::string_view kPlaceholder = "*sentence*";

class TransportError : public std::runtime_error {
public:
    explicit TransportError(const std::string& what) : std::runtime_error(what) {}
};

class ContractError : public std::runtime_error {
public:
    explicit ContractError(const std::string& what) : std::runtime_error(what) {}
};

struct EmbedRequest {
    std::string text;
    std::string template_text{kDefaultTemplate};

    /// Template with the placeholder replaced. Throws if the template does
    /// not contain exactly one placeholder.
    std::string render() const;
};

struct TextEmbedding {
    Vector vector;
    std::string provider_id;
    int dim() const { return static_cast<int>(vector.size()); }
};

class EmbeddingProvider {
public:
    virtual ~EmbeddingProvider() = default;
    virtual std::string id() const = 0;
    /// Manifest dimension; every returned vector must have it.
    virtual int dim() const = 0;
    virtual Vector embed(const EmbedRequest& request) = 0;
};

/// Signed-hash bag of case-folded character 3-grams, L2-normalised. The raw
/// text is embedded; the template only participates in the cache key.
Vector local_embed(std::string_view text, int dim = 256);

class LocalHashProvider final : public EmbeddingProvider {
public:
    explicit LocalHashProvider(int dim = 256) : dim_(dim) {}
    std::string id() const override { return "local-hash3-v1/" + std::to_string(dim_); }
    int dim() const override { return dim_; }
    Vector embed(const EmbedRequest& request) override { return local_embed(request.text, dim_); }

private:
    int dim_;
};

/// POSTs `{"model", "input"}` and expects `{"embedding": [...], "dim": n}`.
class RemoteProvider final : public EmbeddingProvider {
public:
    RemoteProvider(std::string endpoint, std::string token, std::string model, int dim);
    /// EMBED_ENDPOINT / EMBED_TOKEN; nullopt when no endpoint is set.
    static std::optional<RemoteProvider> from_env(std::string model, int dim);

    std::string id() const override { return "remote/" + model_; }
    int dim() const override { return dim_; }
    Vector embed(const EmbedRequest& request) override;

private:
    std::string endpoint_;
    std::string token_;
    std::string model_;
    int dim_;
};

std::uint64_t cache_key(std::string_view provider_id, std::string_view template_text,
                        std::string_view text);

/// Append-only file-backed key/value store of embedding vectors with an
/// in-memory index. Format: "CRSEMB" + version byte, then records of
/// (u64 key, u32 dim, dim x f64). A torn trailing record is ignored on load.
class EmbeddingCache {
public:
    EmbeddingCache() = default;  // memory only
    explicit EmbeddingCache(std::string path);

    std::optional<Vector> get(std::uint64_t key) const;
    /// Returns false when the key was already present.
    bool put(std::uint64_t key, const Vector& v);
    std::size_t size() const;
    const std::string& path() const { return path_; }

    static constexpr std::uint8_t kVersion = 1;

private:
    mutable std::mutex mu_;
    std::string path_;
    std::unordered_map<std::uint64_t, Vector> entries_;
};

struct WarmReport {
    std::size_t written = 0;
    std::map<std::string, std::string> failures;  // text -> error
};

/// Cache-fronted embedding of user descriptions.
class TextEncoder {
public:
    TextEncoder(std::shared_ptr<EmbeddingProvider> provider,
                std::shared_ptr<EmbeddingCache> cache = std::make_shared<EmbeddingCache>(),
                std::string template_text = std::string(kDefaultTemplate));

    /// Throws std::invalid_argument for blank text, ContractError when the
    /// provider returns a vector of the wrong size.
    TextEmbedding embed(std::string_view text) const;
    WarmReport warm_cache(const std::vector<std::string>& texts) const;

    int dim() const { return provider_->dim(); }
    std::string provider_id() const { return provider_->id(); }
    const std::string& template_text() const { return template_; }

private:
    std::shared_ptr<EmbeddingProvider> provider_;
    std::shared_ptr<EmbeddingCache> cache_;
    std::string template_;
};

std::string trim(std::string_view s);

}  // namespace crs::embed

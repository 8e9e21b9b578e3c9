#pragma once

// JSON-over-HTTP session service.
//
//   POST /v1/sessions                 {"variant": "B"|"F"|"V", "history": [ids]?}
//   POST /v1/sessions/{id}/messages   {"text": "..."}
//   GET  /v1/items/{id}
//   GET  /healthz

#include "crs/conversation.hpp"

#include <chrono>
#include <memory>
#include <mutex>
#include <random>
#include <string>

namespace crs {

struct ApiSession {
    ApiSession(std::string id_, Variant variant_, std::vector<ItemId> history)
        : id(id_), variant(variant_), created_at(std::chrono::system_clock::now()),
          session(std::move(id_), variant_, std::move(history)) {}

    const std::string id;
    const Variant variant;
    const std::chrono::system_clock::time_point created_at;
    std::mutex mu;  // one message in flight per session
    Session session;
};

class SessionStore {
public:
    virtual ~SessionStore() = default;
    virtual std::shared_ptr<ApiSession> create(Variant variant, std::vector<ItemId> history) = 0;
    virtual std::shared_ptr<ApiSession> find(const std::string& id) const = 0;
    virtual std::size_t size() const = 0;
};

class InMemorySessionStore final : public SessionStore {
public:
    InMemorySessionStore();
    std::shared_ptr<ApiSession> create(Variant variant, std::vector<ItemId> history) override;
    std::shared_ptr<ApiSession> find(const std::string& id) const override;
    std::size_t size() const override;

private:
    mutable std::mutex mu_;
    std::mt19937_64 rng_;
    std::map<std::string, std::shared_ptr<ApiSession>> sessions_;
};

/// Random (version 4) UUID text.
std::string make_uuid_v4(std::mt19937_64& rng);

struct HttpReply {
    int status = 200;
    std::string body;  // JSON
};

class Service {
public:
    explicit Service(std::shared_ptr<SessionStore> store = std::make_shared<InMemorySessionStore>());
    ~Service();
    Service(const Service&) = delete;
    Service& operator=(const Service&) = delete;

    /// Until a backend is set /healthz answers 503 and sessions cannot be
    /// created.
    void set_backend(std::shared_ptr<const ConversationEngine> engine, std::string fingerprint);
    bool ready() const;

    /// Routes one request; used by the HTTP server and directly by tests.
    HttpReply handle(const std::string& method, const std::string& path, const std::string& body);

    /// Binds the listener; port 0 picks a free port. Returns the bound port
    /// or -1.
    int bind(const std::string& host, int port);
    /// Serves until stop(); in-flight requests finish first.
    void run();
    void stop();

private:
    HttpReply create_session(const std::string& body);
    HttpReply post_message(const std::string& id, const std::string& body);
    HttpReply get_item(const std::string& id) const;
    HttpReply health() const;
    std::shared_ptr<const ConversationEngine> engine() const;

    std::shared_ptr<SessionStore> store_;
    mutable std::mutex backend_mu_;
    std::shared_ptr<const ConversationEngine> engine_;
    std::string fingerprint_;

    struct Server;
    std::unique_ptr<Server> server_;
};

}  // namespace crs

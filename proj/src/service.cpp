#include "crs/service.hpp"

#include <httplib.h>
#include <json.hpp>

#include <iomanip>
#include <regex>
#include <sstream>

namespace crs {

using nlohmann::json;

namespace {

HttpReply reply(int status, const json& body) { return {status, body.dump()}; }
HttpReply error(int status, const std::string& msg) { return reply(status, json{{"error", msg}}); }

}  // namespace

std::string make_uuid_v4(std::mt19937_64& rng) {
    std::uint64_t hi = rng(), lo = rng();
    hi = (hi & 0xFFFFFFFFFFFF0FFFULL) | 0x0000000000004000ULL;  // version 4
    lo = (lo & 0x3FFFFFFFFFFFFFFFULL) | 0x8000000000000000ULL;  // RFC 4122 variant
    std::ostringstream os;
    os << std::hex << std::setfill('0') << std::setw(8) << (hi >> 32) << '-' << std::setw(4)
       << ((hi >> 16) & 0xFFFF) << '-' << std::setw(4) << (hi & 0xFFFF) << '-' << std::setw(4)
       << (lo >> 48) << '-' << std::setw(12) << (lo & 0xFFFFFFFFFFFFULL);
    return os.str();
}

InMemorySessionStore::InMemorySessionStore() : rng_(std::random_device{}()) {}

std::shared_ptr<ApiSession> InMemorySessionStore::create(Variant variant, std::vector<ItemId> history) {
    std::lock_guard lock(mu_);
    std::string id;
    do {
        id = make_uuid_v4(rng_);
    } while (sessions_.count(id));
    auto s = std::make_shared<ApiSession>(id, variant, std::move(history));
    sessions_.emplace(id, s);
    return s;
}

std::shared_ptr<ApiSession> InMemorySessionStore::find(const std::string& id) const {
    std::lock_guard lock(mu_);
    auto it = sessions_.find(id);
    return it == sessions_.end() ? nullptr : it->second;
}

std::size_t InMemorySessionStore::size() const {
    std::lock_guard lock(mu_);
    return sessions_.size();
}

struct Service::Server {
    httplib::Server http;
};

Service::Service(std::shared_ptr<SessionStore> store)
    : store_(std::move(store)), server_(std::make_unique<Server>()) {
    auto route = [this](const char* method) {
        return [this, method](const httplib::Request& req, httplib::Response& res) {
            const auto r = handle(method, req.path, req.body);
            res.status = r.status;
            res.set_content(r.body, "application/json");
        };
    };
    // The browser chat client may be served from another origin.
    server_->http.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                                       {"Access-Control-Allow-Headers", "Content-Type"},
                                       {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
    server_->http.Options(".*", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
    server_->http.Get(".*", route("GET"));
    server_->http.Post(".*", route("POST"));
    server_->http.Put(".*", route("PUT"));
    server_->http.Delete(".*", route("DELETE"));
}

Service::~Service() { stop(); }

void Service::set_backend(std::shared_ptr<const ConversationEngine> engine, std::string fingerprint) {
    std::lock_guard lock(backend_mu_);
    engine_ = std::move(engine);
    fingerprint_ = std::move(fingerprint);
}

std::shared_ptr<const ConversationEngine> Service::engine() const {
    std::lock_guard lock(backend_mu_);
    return engine_;
}

bool Service::ready() const { return engine() != nullptr; }

HttpReply Service::handle(const std::string& method, const std::string& path, const std::string& body) {
    static const std::regex messages_re(R"(^/v1/sessions/([^/]+)/messages$)");
    static const std::regex item_re(R"(^/v1/items/([^/]+)$)");
    std::smatch m;
    try {
        if (path == "/healthz") {
            return method == "GET" ? health() : error(405, "method not allowed");
        }
        if (path == "/v1/sessions") {
            return method == "POST" ? create_session(body) : error(405, "method not allowed");
        }
        if (std::regex_match(path, m, messages_re)) {
            return method == "POST" ? post_message(m[1].str(), body) : error(405, "method not allowed");
        }
        if (std::regex_match(path, m, item_re)) {
            return method == "GET" ? get_item(m[1].str()) : error(405, "method not allowed");
        }
        return error(404, "no route for " + path);
    } catch (const std::exception& e) {
        return error(500, e.what());
    }
}

HttpReply Service::health() const {
    std::lock_guard lock(backend_mu_);
    if (!engine_) return reply(503, json{{"status", "loading"}});
    return reply(200, json{{"status", "ok"}, {"fingerprint", fingerprint_}});
}

HttpReply Service::create_session(const std::string& body) {
    const auto eng = engine();
    if (!eng) return error(503, "model not loaded");
    json req;
    try {
        req = json::parse(body.empty() ? "{}" : body);
    } catch (const json::exception&) {
        return error(400, "body is not JSON");
    }
    if (!req.is_object() || !req.contains("variant") || !req.at("variant").is_string()) {
        return error(400, "'variant' must be one of B, F, V");
    }
    const auto name = req.at("variant").get<std::string>();
    if (name != "B" && name != "F" && name != "V") {
        return error(400, "'variant' must be one of B, F, V");
    }
    std::vector<ItemId> history;
    if (req.contains("history")) {
        if (!req.at("history").is_array()) return error(400, "'history' must be an array of item ids");
        for (const auto& h : req.at("history")) {
            if (!h.is_string() || !eng->catalog().find(h.get<std::string>())) {
                return error(400, "unknown item in history: " + h.dump());
            }
            history.push_back(h.get<std::string>());
        }
    }
    const auto s = store_->create(parse_variant(name), std::move(history));
    return reply(201, json{{"session_id", s->id}, {"variant", name}});
}

HttpReply Service::post_message(const std::string& id, const std::string& body) {
    const auto eng = engine();
    if (!eng) return error(503, "model not loaded");
    const auto s = store_->find(id);
    if (!s) return error(404, "unknown session " + id);
    json req;
    try {
        req = json::parse(body.empty() ? "{}" : body);
    } catch (const json::exception&) {
        return error(422, "body is not JSON");
    }
    if (!req.is_object() || !req.contains("text") || !req.at("text").is_string()) {
        return error(422, "'text' is required");
    }
    std::lock_guard lock(s->mu);
    try {
        return reply(200, to_json(eng->respond(s->session, req.at("text").get<std::string>())));
    } catch (const SessionStateError& e) {
        return error(409, e.what());
    } catch (const std::invalid_argument& e) {
        return error(422, e.what());
    }
}

HttpReply Service::get_item(const std::string& id) const {
    const auto eng = engine();
    if (!eng) return error(503, "model not loaded");
    const auto idx = eng->catalog().find(id);
    if (!idx) return error(404, "unknown item " + id);
    const Item& item = eng->catalog().item(*idx);
    return reply(200, json{{"id", item.id}, {"title", item.title}, {"attributes", item.attributes}});
}

int Service::bind(const std::string& host, int port) {
    if (port == 0) return server_->http.bind_to_any_port(host);
    return server_->http.bind_to_port(host, port) ? port : -1;
}

void Service::run() { server_->http.listen_after_bind(); }

void Service::stop() {
    if (server_ && server_->http.is_running()) server_->http.stop();
}

}  // namespace crs

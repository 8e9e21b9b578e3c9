#pragma once

#include <json.hpp>

#include <string>

namespace crs::http {

/// POSTs a JSON body and parses the JSON reply. Throws
/// embed::TransportError on connection failure or non-200 status and
/// embed::ContractError when the reply is not JSON.
nlohmann::json post_json(const std::string& endpoint, const nlohmann::json& body,
                         const std::string& bearer_token = "", int read_timeout_s = 30);

}  // namespace crs::http

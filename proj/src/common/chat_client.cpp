#include "rswm/common/chat_client.hpp"

#include <chrono>
#include <cstdlib>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "rswm/common/errors.hpp"

namespace rswm {

using nlohmann::json;

ChatClientConfig chat_client_config_from_json(const json& j) {
    ChatClientConfig c;
    for (const auto& [key, value] : j.items()) {
        if (key == "endpoint") c.endpoint = value.get<std::string>();
        else if (key == "model") c.model = value.get<std::string>();
        else if (key == "token_env") c.token_env = value.get<std::string>();
        else if (key == "timeout_seconds") c.timeout_seconds = value.get<double>();
        else if (key == "max_retries") c.max_retries = value.get<int>();
        else if (key == "backoff_ms") c.backoff_ms = value.get<int>();
        else if (key == "temperature") c.temperature = value.get<double>();
        else throw ConfigError("chat client: unknown key '" + key + "'");
    }
    if (c.endpoint.empty()) throw ConfigError("chat client: endpoint is required");
    if (c.max_retries < 0 || c.backoff_ms < 0 || c.timeout_seconds <= 0) throw ConfigError("chat client: invalid retry or timeout settings");
    return c;
}

json to_json(const ChatClientConfig& c) {
    return {{"endpoint", c.endpoint},       {"model", c.model},           {"token_env", c.token_env},
            {"timeout_seconds", c.timeout_seconds}, {"max_retries", c.max_retries}, {"backoff_ms", c.backoff_ms},
            {"temperature", c.temperature}};
}

ChatClient::ChatClient(ChatClientConfig config) : config_(std::move(config)) {
    const auto scheme_end = config_.endpoint.find("://");
    if (scheme_end == std::string::npos) throw ConfigError("chat client: endpoint must start with http:// or https://");
    const auto path_start = config_.endpoint.find('/', scheme_end + 3);
    scheme_host_ = config_.endpoint.substr(0, path_start);
    path_ = path_start == std::string::npos ? "/" : config_.endpoint.substr(path_start);
}

std::string ChatClient::complete(const std::string& system, const std::string& user) {
    json messages = json::array();
    if (!system.empty()) messages.push_back({{"role", "system"}, {"content", system}});
    messages.push_back({{"role", "user"}, {"content", user}});
    json body = {{"model", config_.model}, {"temperature", config_.temperature}, {"messages", messages}};
    httplib::Headers headers;
    if (!config_.token_env.empty()) {
        const char* token = std::getenv(config_.token_env.c_str());
        if (token == nullptr || *token == '\0') throw ConfigError("chat client: environment variable " + config_.token_env + " is not set");
        headers.emplace("Authorization", std::string("Bearer ") + token);
    }

    httplib::Client client(scheme_host_);
    const auto timeout = std::chrono::duration<double>(config_.timeout_seconds);
    const auto sec = std::chrono::duration_cast<std::chrono::seconds>(timeout);
    const auto usec = std::chrono::duration_cast<std::chrono::microseconds>(timeout - sec);
    client.set_connection_timeout(sec.count(), usec.count());
    client.set_read_timeout(sec.count(), usec.count());
    client.set_write_timeout(sec.count(), usec.count());

    std::string last_error;
    int delay = config_.backoff_ms;
    last_attempts_ = 0;
    for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
        if (attempt > 0) {
            std::this_thread::sleep_for(std::chrono::milliseconds(delay));
            delay *= 2;
        }
        ++last_attempts_;
        auto res = client.Post(path_, headers, body.dump(), "application/json");
        if (!res) {
            last_error = "request failed: " + httplib::to_string(res.error());
            continue;
        }
        if (res->status == 429 || res->status >= 500) {
            last_error = "HTTP " + std::to_string(res->status);
            continue;
        }
        if (res->status != 200) throw TransportError("chat client: HTTP " + std::to_string(res->status) + " (not retried)");
        try {
            const json reply = json::parse(res->body);
            return reply.at("choices").at(0).at("message").at("content").get<std::string>();
        } catch (const json::exception& e) {
            throw MalformedResponse(std::string("chat client: unexpected response body: ") + e.what());
        }
    }
    throw TransportError("chat client: " + last_error + " after " + std::to_string(last_attempts_) + " attempts");
}

} // namespace rswm

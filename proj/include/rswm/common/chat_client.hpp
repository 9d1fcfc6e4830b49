#pragma once

// Minimal client for OpenAI-compatible chat-completion endpoints.

#include <string>

#include <nlohmann/json_fwd.hpp>

namespace rswm {

struct ChatClientConfig {
    std::string endpoint;  // e.g. http://127.0.0.1:8000/v1/chat/completions
    std::string model;
    std::string token_env; // environment variable holding the bearer token; empty for none
    double timeout_seconds = 30.0;
    int max_retries = 3;   // retries after the first attempt
    int backoff_ms = 250;  // doubled after every failed attempt
    double temperature = 0.0;
};

ChatClientConfig chat_client_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ChatClientConfig& c);

class ChatClient {
public:
    explicit ChatClient(ChatClientConfig config);

    /// Returns choices[0].message.content.
    /// Throws TransportError once retries are exhausted (connection failures,
    /// 429 and 5xx are retried) and MalformedResponse for unusable bodies.
    std::string complete(const std::string& system, const std::string& user);

    int last_attempts() const { return last_attempts_; }
    const ChatClientConfig& config() const { return config_; }

private:
    ChatClientConfig config_;
    std::string scheme_host_;
    std::string path_;
    int last_attempts_ = 0;
};

} // namespace rswm

#pragma once

// Live HTTP adapters behind the provider interfaces, kept in their own header
// so mock-only builds do not pull in the HTTP stack. The wire contract is a
// minimal chat-completions-style JSON POST, documented in the README.

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <memory>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "vidrag/providers.hpp"

namespace vidrag {

namespace detail {

inline std::string base64_encode(const std::string& data) {
    static const char* table = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::string out;
    out.reserve((data.size() + 2) / 3 * 4);
    std::size_t i = 0;
    while (i + 2 < data.size()) {
        unsigned v = (static_cast<unsigned char>(data[i]) << 16) |
                     (static_cast<unsigned char>(data[i + 1]) << 8) |
                     static_cast<unsigned char>(data[i + 2]);
        out += table[(v >> 18) & 63];
        out += table[(v >> 12) & 63];
        out += table[(v >> 6) & 63];
        out += table[v & 63];
        i += 3;
    }
    if (i + 1 == data.size()) {
        unsigned v = static_cast<unsigned char>(data[i]) << 16;
        out += table[(v >> 18) & 63];
        out += table[(v >> 12) & 63];
        out += "==";
    } else if (i + 2 == data.size()) {
        unsigned v = (static_cast<unsigned char>(data[i]) << 16) |
                     (static_cast<unsigned char>(data[i + 1]) << 8);
        out += table[(v >> 18) & 63];
        out += table[(v >> 12) & 63];
        out += table[(v >> 6) & 63];
        out += '=';
    }
    return out;
}

struct SplitUrl {
    std::string base;  // scheme://host:port
    std::string path;  // /...
};

inline SplitUrl split_url(const std::string& url) {
    auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) {
        throw InvalidInputError("endpoint must include a scheme: " + url);
    }
    auto path_start = url.find('/', scheme_end + 3);
    if (path_start == std::string::npos) return {url, "/"};
    return {url.substr(0, path_start), url.substr(path_start)};
}

inline std::string env_or_empty(const std::string& name) {
    const char* v = std::getenv(name.c_str());
    return v ? v : "";
}

}  // namespace detail

/// Endpoint from the config, falling back to OM_PROVIDER_<NAME>_URL.
inline std::string resolve_endpoint(const ProviderConfig& cfg, const std::string& name) {
    if (!cfg.endpoint.empty()) return cfg.endpoint;
    std::string upper;
    for (char c : name) upper.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
    std::string from_env = detail::env_or_empty("OM_PROVIDER_" + upper + "_URL");
    if (from_env.empty()) {
        throw ProviderError(ProviderErrorKind::unconfigured,
                            "no endpoint for provider \"" + name + "\"");
    }
    return from_env;
}

inline std::string resolve_auth_key(const ProviderConfig& cfg, const std::string& name) {
    std::string var = cfg.auth_env;
    if (var.empty()) {
        std::string upper;
        for (char c : name) {
            upper.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
        }
        var = "OM_PROVIDER_" + upper + "_KEY";
    }
    return detail::env_or_empty(var);
}

namespace detail {

/// POST with retry on connect errors and 5xx; exponential backoff base 0.5 s.
inline std::string post_with_retry(const ProviderConfig& cfg, const std::string& endpoint,
                                   const std::string& auth_key, const std::string& body) {
    SplitUrl url = split_url(endpoint);
    std::string last_error;
    for (int attempt = 0; attempt <= cfg.max_retries; ++attempt) {
        if (attempt > 0) {
            auto backoff = std::chrono::duration<double>(0.5 * (1 << (attempt - 1)));
            std::this_thread::sleep_for(
                std::chrono::duration_cast<std::chrono::milliseconds>(backoff));
        }
        httplib::Client client(url.base);
        client.set_connection_timeout(std::chrono::duration<double>(cfg.timeout_s));
        client.set_read_timeout(std::chrono::duration<double>(cfg.timeout_s));
        if (!auth_key.empty()) {
            client.set_default_headers({{"Authorization", "Bearer " + auth_key}});
        }
        auto res = client.Post(url.path, body, "application/json");
        if (!res) {
            last_error = "connection failure: " + httplib::to_string(res.error());
            continue;
        }
        if (res->status >= 500) {
            last_error = "server error " + std::to_string(res->status);
            continue;
        }
        if (res->status != 200) {
            throw ProviderError(ProviderErrorKind::http,
                                "status " + std::to_string(res->status) + ": " + res->body);
        }
        return res->body;
    }
    throw ProviderError(ProviderErrorKind::timeout,
                        "exhausted retries against " + endpoint + " (" + last_error + ")");
}

}  // namespace detail

/// Live chat adapter. Image references resolve to base64 payloads here and
/// nowhere else; non-file references travel as plain refs.
class LiveHttpChatProvider : public ChatProvider {
public:
    LiveHttpChatProvider(ProviderConfig cfg, std::string name = "chat")
        : cfg_(std::move(cfg)), name_(std::move(name)) {
        endpoint_ = resolve_endpoint(cfg_, name_);
        auth_key_ = resolve_auth_key(cfg_, name_);
    }

    std::string chat(const ChatRequest& req) override {
        nlohmann::json body;
        body["contract"] = to_string(req.contract);
        nlohmann::json messages = nlohmann::json::array();
        for (const auto& m : req.messages) {
            messages.push_back({{"role", m.role}, {"content", m.text}});
        }
        body["messages"] = std::move(messages);
        nlohmann::json images = nlohmann::json::array();
        for (const auto& ref : req.images) {
            std::ifstream in(ref, std::ios::binary);
            if (in) {
                std::ostringstream bytes;
                bytes << in.rdbuf();
                images.push_back({{"ref", ref}, {"b64", detail::base64_encode(bytes.str())}});
            } else {
                images.push_back({{"ref", ref}});
            }
        }
        body["images"] = std::move(images);

        std::string raw = detail::post_with_retry(cfg_, endpoint_, auth_key_, body.dump());
        nlohmann::json parsed = nlohmann::json::parse(raw, nullptr, false);
        std::string content;
        if (parsed.is_object() && parsed.contains("content")) {
            content = parsed["content"].get<std::string>();
        } else if (parsed.is_object() && parsed.contains("choices") &&
                   !parsed["choices"].empty()) {
            content = parsed["choices"][0].at("message").at("content").get<std::string>();
        } else {
            throw ProviderError(ProviderErrorKind::http, "malformed chat response", raw);
        }
        if (!response_matches_contract(req.contract, content)) {
            throw ProviderError(ProviderErrorKind::contract_violation,
                                "response violates contract " +
                                    std::string(to_string(req.contract)),
                                content);
        }
        return content;
    }

private:
    ProviderConfig cfg_;
    std::string name_;
    std::string endpoint_;
    std::string auth_key_;
};

class LiveHttpEmbedder : public EmbeddingProvider {
public:
    LiveHttpEmbedder(ProviderConfig cfg, std::string name = "embed")
        : cfg_(std::move(cfg)), name_(std::move(name)) {
        endpoint_ = resolve_endpoint(cfg_, name_);
        auth_key_ = resolve_auth_key(cfg_, name_);
    }

    std::size_t dimension() const override { return cfg_.dimension; }

    std::vector<float> embed(const std::string& text) override {
        if (text.empty()) throw InvalidInputError("embed: empty text");
        nlohmann::json body;
        body["input"] = text;
        std::string raw = detail::post_with_retry(cfg_, endpoint_, auth_key_, body.dump());
        nlohmann::json parsed = nlohmann::json::parse(raw, nullptr, false);
        if (!parsed.is_object() || !parsed.contains("embedding")) {
            throw ProviderError(ProviderErrorKind::http, "malformed embedding response", raw);
        }
        auto vec = parsed["embedding"].get<std::vector<float>>();
        if (vec.size() != cfg_.dimension) {
            throw ProviderError(ProviderErrorKind::http,
                                "embedding dimension mismatch: got " + std::to_string(vec.size()));
        }
        double norm2 = 0;
        for (float v : vec) norm2 += static_cast<double>(v) * v;
        if (norm2 == 0) {
            throw ProviderError(ProviderErrorKind::http, "zero embedding from provider");
        }
        double inv = 1.0 / std::sqrt(norm2);
        for (auto& v : vec) v = static_cast<float>(v * inv);
        return vec;
    }

private:
    ProviderConfig cfg_;
    std::string name_;
    std::string endpoint_;
    std::string auth_key_;
};

// ---------------------------------------------------------------------------
// Factories over the configuration kinds
// ---------------------------------------------------------------------------

inline std::unique_ptr<ChatProvider> make_chat_provider(const ProviderConfig& cfg,
                                                        const std::string& name = "chat") {
    cfg.validate();
    switch (cfg.kind) {
        case ProviderConfig::Kind::scripted_mock:
            return std::make_unique<ScriptedChatProvider>(
                ScriptedChatProvider::from_file(cfg.script_path));
        case ProviderConfig::Kind::live_http:
            return std::make_unique<LiveHttpChatProvider>(cfg, name);
        case ProviderConfig::Kind::hash_mock:
            throw InvalidInputError("hash_mock is an embedding provider kind");
    }
    throw InvalidInputError("unknown provider kind");
}

inline std::unique_ptr<EmbeddingProvider> make_embedding_provider(const ProviderConfig& cfg,
                                                                  const std::string& name = "embed") {
    switch (cfg.kind) {
        case ProviderConfig::Kind::hash_mock: return std::make_unique<HashEmbedder>(cfg.dimension);
        case ProviderConfig::Kind::live_http: {
            cfg.validate();
            return std::make_unique<LiveHttpEmbedder>(cfg, name);
        }
        case ProviderConfig::Kind::scripted_mock:
            throw InvalidInputError("scripted_mock does not implement embeddings");
    }
    throw InvalidInputError("unknown provider kind");
}

}  // namespace vidrag

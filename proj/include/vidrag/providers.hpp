#pragma once

// Uniform interfaces to model services (chat/MLLM, embedding, ASR,
// diarization, detection) plus the deterministic offline implementations:
// a scripted chat mock keyed by request digest and a feature-hashing
// embedder. Live HTTP adapters live in providers_http.hpp.

#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vidrag/common.hpp"
#include "vidrag/media.hpp"

namespace vidrag {

// ---------------------------------------------------------------------------
// Requests and contracts
// ---------------------------------------------------------------------------

enum class ResponseContract {
    free_text,
    structured_verdict,  // {"type": "too_complex"|"requires_tool"|"direct_answer", ...}
    structured_caption,  // the six scene-caption fields
    structured_divide,   // {"success": bool, "tasks": [...], "reason": "..."}
};

inline const char* to_string(ResponseContract c) {
    switch (c) {
        case ResponseContract::free_text: return "free_text";
        case ResponseContract::structured_verdict: return "structured_verdict";
        case ResponseContract::structured_caption: return "structured_caption";
        case ResponseContract::structured_divide: return "structured_divide";
    }
    return "?";
}

struct ChatMessage {
    std::string role;  // "system" | "user"
    std::string text;
};

struct ChatRequest {
    std::vector<ChatMessage> messages;
    std::vector<std::string> images;  // frame references
    ResponseContract contract = ResponseContract::free_text;
};

/// Digest over role-tagged messages, image reference list, and contract name.
/// Scripted fixtures key on this, so the serialization below is frozen.
inline std::string request_digest(const ChatRequest& req) {
    std::string material;
    material += "v1\x1e";
    material += to_string(req.contract);
    for (const auto& m : req.messages) {
        material += "\x1e";
        material += m.role;
        material += "\x1f";
        material += m.text;
    }
    material += "\x1eimages";
    for (const auto& img : req.images) {
        material += "\x1f";
        material += img;
    }
    return to_hex64(fnv1a64(material));
}

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

enum class ProviderErrorKind {
    timeout,
    http,
    missing_script,
    contract_violation,
    invalid_input,
    unconfigured,
};

inline const char* to_string(ProviderErrorKind k) {
    switch (k) {
        case ProviderErrorKind::timeout: return "timeout";
        case ProviderErrorKind::http: return "http";
        case ProviderErrorKind::missing_script: return "missing_script";
        case ProviderErrorKind::contract_violation: return "contract_violation";
        case ProviderErrorKind::invalid_input: return "invalid_input";
        case ProviderErrorKind::unconfigured: return "unconfigured";
    }
    return "?";
}

class ProviderError : public std::runtime_error {
public:
    ProviderError(ProviderErrorKind kind, const std::string& message, std::string raw = {})
        : std::runtime_error(std::string(to_string(kind)) + ": " + message),
          kind_(kind),
          raw_(std::move(raw)) {}

    ProviderErrorKind kind() const { return kind_; }
    /// Raw provider response, kept so lenient parsers can still inspect it.
    const std::string& raw() const { return raw_; }

private:
    ProviderErrorKind kind_;
    std::string raw_;
};

// ---------------------------------------------------------------------------
// Contract checking
// ---------------------------------------------------------------------------

inline std::optional<nlohmann::json> try_parse_json_object(const std::string& text) {
    auto j = nlohmann::json::parse(text, nullptr, false);
    if (j.is_discarded() || !j.is_object()) return std::nullopt;
    return j;
}

/// Structural check that a response honors its declared contract.
inline bool response_matches_contract(ResponseContract contract, const std::string& text) {
    if (contract == ResponseContract::free_text) return true;
    auto j = try_parse_json_object(text);
    if (!j) return false;
    switch (contract) {
        case ResponseContract::structured_verdict: {
            if (!j->contains("type") || !(*j)["type"].is_string()) return false;
            std::string type = (*j)["type"].get<std::string>();
            if (type == "too_complex") return j->contains("reason");
            if (type == "requires_tool") return j->contains("tool");
            if (type == "direct_answer") return j->contains("answer");
            return false;
        }
        case ResponseContract::structured_caption:
            for (const char* field : {"time_context", "location", "characters",
                                      "events_chronological", "scene_details", "summary"}) {
                if (!j->contains(field)) return false;
            }
            return true;
        case ResponseContract::structured_divide:
            return j->contains("success");
        case ResponseContract::free_text: return true;
    }
    return false;
}

// ---------------------------------------------------------------------------
// Interfaces
// ---------------------------------------------------------------------------

class ChatProvider {
public:
    virtual ~ChatProvider() = default;
    virtual std::string chat(const ChatRequest& req) = 0;
};

class EmbeddingProvider {
public:
    virtual ~EmbeddingProvider() = default;
    virtual std::vector<float> embed(const std::string& text) = 0;
    virtual std::size_t dimension() const = 0;
};

class AsrProvider {
public:
    virtual ~AsrProvider() = default;
    virtual std::vector<Utterance> transcribe(const std::string& audio_ref) = 0;
};

class DiarizationProvider {
public:
    virtual ~DiarizationProvider() = default;
    virtual void assign_speakers(std::vector<Utterance>& utterances) = 0;
};

class DetectorProvider {
public:
    virtual ~DetectorProvider() = default;
    virtual std::vector<Annotation> detect(const std::string& frame_ref) = 0;
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct ProviderConfig {
    enum class Kind { live_http, scripted_mock, hash_mock };

    Kind kind = Kind::scripted_mock;
    std::string endpoint;    // live_http; falls back to OM_PROVIDER_<NAME>_URL
    std::string auth_env;    // name of env var holding the key
    std::string script_path; // scripted_mock fixture file
    double timeout_s = 30.0;
    int max_retries = 2;
    std::size_t dimension = 256;  // embedding providers

    void validate() const {
        if (kind == Kind::live_http && endpoint.empty()) {
            throw InvalidInputError("live_http provider requires an endpoint");
        }
        if (kind == Kind::scripted_mock && script_path.empty()) {
            throw InvalidInputError("scripted_mock provider requires a script_path");
        }
    }
};

// ---------------------------------------------------------------------------
// Scripted chat mock
// ---------------------------------------------------------------------------

/// Deterministic chat provider backed by a digest -> response map. A missing
/// key raises an error that carries the digest and a request summary so the
/// fixture can be extended.
class ScriptedChatProvider : public ChatProvider {
public:
    ScriptedChatProvider() = default;

    explicit ScriptedChatProvider(std::map<std::string, std::string> script)
        : script_(std::move(script)) {}

    static ScriptedChatProvider from_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw InvalidInputError("cannot open script fixture: " + path);
        nlohmann::json j;
        in >> j;
        std::map<std::string, std::string> script;
        for (auto it = j.begin(); it != j.end(); ++it) {
            script[it.key()] = it.value().get<std::string>();
        }
        return ScriptedChatProvider(std::move(script));
    }

    void save(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw InvalidInputError("cannot write script fixture: " + path);
        nlohmann::json j = nlohmann::json::object();
        for (const auto& [k, v] : script_) j[k] = v;
        out << j.dump(2) << "\n";
    }

    void put(const ChatRequest& req, const std::string& response) {
        script_[request_digest(req)] = response;
    }

    void put_digest(const std::string& digest, const std::string& response) {
        script_[digest] = response;
    }

    std::size_t size() const { return script_.size(); }

    std::string chat(const ChatRequest& req) override {
        const std::string digest = request_digest(req);
        auto it = script_.find(digest);
        if (it == script_.end()) {
            std::ostringstream msg;
            msg << "no scripted response for digest " << digest << " (contract "
                << to_string(req.contract) << ", first user line: \"" << first_user_line(req)
                << "\")";
            throw ProviderError(ProviderErrorKind::missing_script, msg.str());
        }
        if (!response_matches_contract(req.contract, it->second)) {
            throw ProviderError(ProviderErrorKind::contract_violation,
                                "scripted response violates contract " +
                                    std::string(to_string(req.contract)),
                                it->second);
        }
        return it->second;
    }

private:
    static std::string first_user_line(const ChatRequest& req) {
        for (const auto& m : req.messages) {
            if (m.role == "user") {
                auto nl = m.text.find('\n');
                return m.text.substr(0, nl == std::string::npos ? m.text.size() : nl);
            }
        }
        return "";
    }

    std::map<std::string, std::string> script_;
};

/// Wraps another provider and records every exchange; used to author scripted
/// fixtures from a reference responder.
class RecordingChatProvider : public ChatProvider {
public:
    explicit RecordingChatProvider(ChatProvider& inner) : inner_(inner) {}

    std::string chat(const ChatRequest& req) override {
        std::string response = inner_.chat(req);
        recorded_[request_digest(req)] = response;
        return response;
    }

    const std::map<std::string, std::string>& recorded() const { return recorded_; }

    ScriptedChatProvider to_scripted() const { return ScriptedChatProvider(recorded_); }

    void save(const std::string& path) const { to_scripted().save(path); }

private:
    ChatProvider& inner_;
    std::map<std::string, std::string> recorded_;
};

// ---------------------------------------------------------------------------
// Hash embedder
// ---------------------------------------------------------------------------

/// Feature-hashing embedder: case-folded tokens hashed into a fixed dimension
/// with a sign bit, then L2-normalized. Pure function of its input.
class HashEmbedder : public EmbeddingProvider {
public:
    explicit HashEmbedder(std::size_t dimension = 256) : dimension_(dimension) {
        if (dimension_ == 0) throw InvalidInputError("embedding dimension must be positive");
    }

    std::size_t dimension() const override { return dimension_; }

    std::vector<float> embed(const std::string& text) override {
        if (text.empty()) throw InvalidInputError("embed: empty text");
        std::vector<double> acc(dimension_, 0.0);
        auto tokens = tokenize_folded(text);
        if (tokens.empty()) tokens.push_back(fold_case(text));
        for (const auto& tok : tokens) {
            std::uint64_t h = fnv1a64(tok);
            std::size_t idx = static_cast<std::size_t>(h % dimension_);
            double sign = (h >> 63) ? -1.0 : 1.0;
            acc[idx] += sign;
        }
        double norm2 = 0;
        for (double v : acc) norm2 += v * v;
        std::vector<float> out(dimension_);
        if (norm2 == 0) {
            out[0] = 1.0f;  // non-zero text that hashed to nothing
        } else {
            double inv = 1.0 / std::sqrt(norm2);
            for (std::size_t i = 0; i < dimension_; ++i) {
                out[i] = static_cast<float>(acc[i] * inv);
            }
        }
        return out;
    }

private:
    std::size_t dimension_;
};

// ---------------------------------------------------------------------------
// Fixture-backed ASR / diarization / detection
// ---------------------------------------------------------------------------

/// Reads utterances straight from an ingest manifest; diarization labels are
/// already part of the fixture data.
class ManifestAsrProvider : public AsrProvider {
public:
    explicit ManifestAsrProvider(const VideoSource& source)
        : expected_ref_(source.audio_ref), utterances_(source.transcript) {}

    ManifestAsrProvider(std::string expected_ref, std::vector<Utterance> utterances)
        : expected_ref_(std::move(expected_ref)), utterances_(std::move(utterances)) {}

    std::vector<Utterance> transcribe(const std::string& audio_ref) override {
        if (audio_ref != expected_ref_) {
            throw ProviderError(ProviderErrorKind::invalid_input,
                                "unknown audio reference: " + audio_ref);
        }
        return utterances_;
    }

private:
    std::string expected_ref_;
    std::vector<Utterance> utterances_;
};

/// Identity diarizer for fixtures whose utterances already carry speakers;
/// unlabeled utterances get a stable placeholder.
class PassthroughDiarizer : public DiarizationProvider {
public:
    void assign_speakers(std::vector<Utterance>& utterances) override {
        for (auto& u : utterances) {
            if (u.speaker.empty()) u.speaker = "speaker";
        }
    }
};

/// Serves ground-truth boxes recorded in the manifest. Malformed ground truth
/// (box outside the unit square, empty label) is dropped at load time.
class ManifestDetectorProvider : public DetectorProvider {
public:
    explicit ManifestDetectorProvider(const VideoSource& source) {
        for (const auto& [ref, boxes] : source.annotation_truth) {
            std::vector<Annotation> kept;
            for (const auto& a : boxes) {
                if (a.valid()) kept.push_back(a);
            }
            truth_[ref] = std::move(kept);
        }
    }

    explicit ManifestDetectorProvider(std::map<std::string, std::vector<Annotation>> truth)
        : truth_(std::move(truth)) {}

    std::vector<Annotation> detect(const std::string& frame_ref) override {
        auto it = truth_.find(frame_ref);
        if (it == truth_.end()) return {};
        return it->second;
    }

private:
    std::map<std::string, std::vector<Annotation>> truth_;
};

}  // namespace vidrag

#pragma once

// Tool registry and invocation layer. Invocation never throws past its
// boundary: every outcome is ok or a categorized failure so the rescuer can
// branch on {bad_args, environment, upstream, not_found}.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vidrag/common.hpp"
#include "vidrag/media.hpp"
#include "vidrag/providers.hpp"
#include "vidrag/task_tree.hpp"
#include "vidrag/video2rag.hpp"

namespace vidrag {

enum class FailureCategory { bad_args, environment, upstream, not_found };

inline const char* to_string(FailureCategory c) {
    switch (c) {
        case FailureCategory::bad_args: return "bad_args";
        case FailureCategory::environment: return "environment";
        case FailureCategory::upstream: return "upstream";
        case FailureCategory::not_found: return "not_found";
    }
    return "?";
}

struct ToolFailure {
    FailureCategory category = FailureCategory::environment;
    std::string message;
};

struct ToolResult {
    bool ok = false;
    std::string content;
    std::vector<Artifact> artifacts;
    std::optional<ToolFailure> failure;

    static ToolResult success(std::string content, std::vector<Artifact> artifacts = {}) {
        ToolResult r;
        r.ok = true;
        r.content = std::move(content);
        r.artifacts = std::move(artifacts);
        return r;
    }

    static ToolResult fail(FailureCategory category, std::string message) {
        ToolResult r;
        r.ok = false;
        r.failure = ToolFailure{category, std::move(message)};
        return r;
    }
};

/// Argument schema entry. Types are semantic: "timestamp" parses as a
/// timecode, "number" must be numeric, "identifier"/"text" are non-empty
/// strings. A default marks the argument fillable when omitted.
struct ArgSpec {
    std::string name;
    std::string type;
    bool required = true;
    std::string constraint;  // free-text marker for prompt display
    std::optional<std::string> default_value;
};

struct ToolSpec {
    std::string name;
    std::string description;
    std::vector<ArgSpec> args;
};

struct ToolCall {
    std::string tool_name;
    nlohmann::json args = nlohmann::json::object();
};

inline nlohmann::json tool_spec_to_json(const ToolSpec& spec) {
    nlohmann::json j;
    j["name"] = spec.name;
    j["description"] = spec.description;
    nlohmann::json args = nlohmann::json::array();
    for (const auto& a : spec.args) {
        nlohmann::json aj;
        aj["name"] = a.name;
        aj["type"] = a.type;
        aj["required"] = a.required;
        if (!a.constraint.empty()) aj["constraint"] = a.constraint;
        if (a.default_value) aj["default"] = *a.default_value;
        args.push_back(std::move(aj));
    }
    j["args"] = std::move(args);
    return j;
}

using ToolHandler = std::function<ToolResult(const ToolCall&)>;

class Toolbox {
public:
    void register_tool(ToolSpec spec, ToolHandler handler) {
        if (spec.name.empty()) throw InvalidInputError("tool name required");
        if (index_.count(spec.name)) {
            throw InvalidInputError("tool already registered: " + spec.name);
        }
        index_[spec.name] = tools_.size();
        tools_.push_back({std::move(spec), std::move(handler)});
    }

    const ToolSpec* find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : &tools_[it->second].spec;
    }

    /// Specs in registration order.
    std::vector<ToolSpec> catalog() const {
        std::vector<ToolSpec> out;
        for (const auto& t : tools_) out.push_back(t.spec);
        return out;
    }

    /// Structured catalog document consumed by conqueror prompts and
    /// `tools list`.
    std::string catalog_text() const {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& t : tools_) arr.push_back(tool_spec_to_json(t.spec));
        return arr.dump(2);
    }

    /// Empty result means the args satisfy the schema; otherwise the message
    /// names the first offending argument.
    static std::optional<std::string> validate_args(const ToolSpec& spec,
                                                    const nlohmann::json& args) {
        if (!args.is_object()) return "args must be an object";
        for (const auto& a : spec.args) {
            if (!args.contains(a.name)) {
                if (a.required) return "missing required arg \"" + a.name + "\"";
                continue;
            }
            const auto& v = args.at(a.name);
            if (a.type == "timestamp") {
                if (v.is_number()) {
                    if (v.get<double>() < 0) return "arg \"" + a.name + "\": negative timestamp";
                } else if (v.is_string()) {
                    if (!parse_timecode(v.get<std::string>())) {
                        return "arg \"" + a.name + "\": unparseable timestamp \"" +
                               v.get<std::string>() + "\"";
                    }
                } else {
                    return "arg \"" + a.name + "\": expected timestamp";
                }
            } else if (a.type == "number") {
                if (!v.is_number()) return "arg \"" + a.name + "\": expected number";
            } else {  // identifier / text
                if (!v.is_string() || v.get<std::string>().empty()) {
                    return "arg \"" + a.name + "\": expected non-empty string";
                }
            }
        }
        return std::nullopt;
    }

    ToolResult invoke(const ToolCall& call) const {
        auto it = index_.find(call.tool_name);
        if (it == index_.end()) {
            return ToolResult::fail(FailureCategory::not_found,
                                    "unknown tool \"" + call.tool_name + "\"");
        }
        const auto& entry = tools_[it->second];
        if (auto err = validate_args(entry.spec, call.args)) {
            return ToolResult::fail(FailureCategory::bad_args, *err);
        }
        try {
            return entry.handler(call);
        } catch (const ProviderError& e) {
            return ToolResult::fail(FailureCategory::upstream, e.what());
        } catch (const std::exception& e) {
            return ToolResult::fail(FailureCategory::environment, e.what());
        }
    }

private:
    struct Entry {
        ToolSpec spec;
        ToolHandler handler;
    };

    std::vector<Entry> tools_;
    std::map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Argument helpers
// ---------------------------------------------------------------------------

inline double arg_seconds(const nlohmann::json& args, const std::string& name) {
    const auto& v = args.at(name);
    if (v.is_number()) return v.get<double>();
    auto parsed = parse_timecode(v.get<std::string>());
    if (!parsed) throw InvalidInputError("unparseable timestamp arg " + name);
    return *parsed;
}

// ---------------------------------------------------------------------------
// Rewinder
// ---------------------------------------------------------------------------

struct RewindRequest {
    std::string video_id;
    double t0 = 0;
    double t1 = 0;
    std::string instruction;
    double granularity = 1.0;  // frames per second to resample
};

inline ChatRequest build_rewind_request(const RewindRequest& req,
                                        const std::vector<Frame>& frames,
                                        const std::vector<Utterance>& transcript) {
    ChatRequest chat;
    chat.contract = ResponseContract::free_text;
    chat.messages.push_back(
        {"system",
         "You re-read original video frames over a short time window to recover detail that "
         "segment captions may have missed. Answer the instruction from the listed frames "
         "(with any box annotations) and transcript lines only."});
    std::ostringstream user;
    user << "Instruction: " << req.instruction << "\n";
    user << "Window: " << req.video_id << " [" << format_timecode(req.t0) << " - "
         << format_timecode(req.t1) << "]\n";
    user << "Annotations:\n";
    for (const auto& f : frames) {
        for (const auto& a : f.annotations) {
            user << "- " << format_timecode(f.timestamp) << " " << a.label << "\n";
        }
    }
    user << "Transcript:\n";
    for (const auto& u : transcript) {
        user << "- [" << format_timecode(u.t0) << " - " << format_timecode(u.t1) << "] "
             << u.speaker << ": " << u.text << "\n";
    }
    chat.messages.push_back({"user", user.str()});
    for (const auto& f : frames) {
        chat.images.push_back(f.annotated_ref.value_or(f.image_ref));
    }
    return chat;
}

/// Resamples original frames in [t0, t1] at the requested granularity,
/// re-applies annotation, and asks the MLLM the instruction over those frames
/// plus the window's transcript. Recovers detail lost at segmentation time.
inline ToolResult rewinder(const RewindRequest& req, const SourceStore& store,
                           ChatProvider& mllm, DetectorProvider* detector = nullptr,
                           AnnotationRenderer* renderer = nullptr) {
    const VideoSource* source = store.find(req.video_id);
    if (!source) {
        return ToolResult::fail(FailureCategory::bad_args,
                                "video not ingested: \"" + req.video_id + "\"");
    }
    if (!(req.granularity > 0)) {
        return ToolResult::fail(FailureCategory::bad_args, "granularity must be positive");
    }
    if (!(req.t0 >= 0) || !(req.t0 < req.t1) || req.t1 > source->duration) {
        return ToolResult::fail(FailureCategory::bad_args,
                                "window [" + format_timecode(std::max(req.t0, 0.0)) + ", " +
                                    format_timecode(std::max(req.t1, 0.0)) +
                                    "] invalid for duration " +
                                    format_timecode(source->duration));
    }
    int k = std::max(1, static_cast<int>(std::llround((req.t1 - req.t0) * req.granularity)));
    auto sampled = sample_frames({req.t0, req.t1}, source->frames, k);
    if (sampled.frames.empty()) {
        return ToolResult::fail(FailureCategory::environment,
                                "no source frames available in window");
    }
    annotate_frames(sampled.frames, detector, renderer);
    auto transcript = source->transcript_slice(req.t0, req.t1);
    std::string answer;
    try {
        answer = mllm.chat(build_rewind_request(req, sampled.frames, transcript));
    } catch (const ProviderError& e) {
        return ToolResult::fail(FailureCategory::upstream, e.what());
    }
    std::vector<Artifact> artifacts;
    for (const auto& f : sampled.frames) {
        artifacts.push_back({"frame@" + format_timecode(f.timestamp),
                             f.annotated_ref.value_or(f.image_ref)});
    }
    return ToolResult::success(std::move(answer), std::move(artifacts));
}

// ---------------------------------------------------------------------------
// Web search
// ---------------------------------------------------------------------------

class WebSearchClient {
public:
    virtual ~WebSearchClient() = default;
    virtual ToolResult search(const std::string& query) = 0;
};

/// Fixture-backed search: a query -> answer map loaded from a JSON file.
class ScriptedWebSearch : public WebSearchClient {
public:
    explicit ScriptedWebSearch(std::map<std::string, std::string> fixtures)
        : fixtures_(std::move(fixtures)) {}

    static ScriptedWebSearch from_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw InvalidInputError("cannot open web fixture: " + path);
        nlohmann::json j;
        in >> j;
        std::map<std::string, std::string> fixtures;
        for (auto it = j.begin(); it != j.end(); ++it) {
            fixtures[it.key()] = it.value().get<std::string>();
        }
        return ScriptedWebSearch(std::move(fixtures));
    }

    ToolResult search(const std::string& query) override {
        auto it = fixtures_.find(query);
        if (it == fixtures_.end()) {
            return ToolResult::fail(FailureCategory::upstream,
                                    "no fixture result for query \"" + query + "\"");
        }
        return ToolResult::success(it->second);
    }

private:
    std::map<std::string, std::string> fixtures_;
};

class UnconfiguredWebSearch : public WebSearchClient {
public:
    ToolResult search(const std::string&) override {
        return ToolResult::fail(FailureCategory::upstream, "web search not configured");
    }
};

// ---------------------------------------------------------------------------
// Code execution (exists chiefly so the rescuer's environment-repair path is
// exercisable; the default runner refuses everything)
// ---------------------------------------------------------------------------

using CommandRunner = std::function<ToolResult(const std::string& command)>;

inline CommandRunner disabled_command_runner() {
    return [](const std::string&) {
        return ToolResult::fail(FailureCategory::environment, "code execution disabled");
    };
}

/// Runs a command via the shell when its first token is on the allowlist.
inline CommandRunner subprocess_command_runner(std::vector<std::string> allowlist) {
    return [allowlist = std::move(allowlist)](const std::string& command) {
        std::istringstream iss(command);
        std::string head;
        iss >> head;
        bool allowed = false;
        for (const auto& a : allowlist) {
            if (a == head) allowed = true;
        }
        if (!allowed) {
            return ToolResult::fail(FailureCategory::environment,
                                    "command not on allowlist: " + head);
        }
        std::string cmd = command + " 2>&1";
        FILE* pipe = ::popen(cmd.c_str(), "r");
        if (!pipe) {
            return ToolResult::fail(FailureCategory::environment, "failed to spawn subprocess");
        }
        std::string output;
        char buf[512];
        while (std::fgets(buf, sizeof(buf), pipe)) output += buf;
        int status = ::pclose(pipe);
        if (status != 0) {
            return ToolResult::fail(FailureCategory::environment, output);
        }
        return ToolResult::success(output);
    };
}

// ---------------------------------------------------------------------------
// Default catalog
// ---------------------------------------------------------------------------

struct ToolboxConfig {
    const SourceStore* sources = nullptr;
    ChatProvider* mllm = nullptr;
    DetectorProvider* detector = nullptr;
    AnnotationRenderer* renderer = nullptr;
    WebSearchClient* web = nullptr;
    std::string file_root;  // allowlisted directory for the file tool
    CommandRunner code_runner;
    double default_granularity = 1.0;
};

inline std::vector<ToolSpec> default_tool_specs() {
    return {
        {"rewinder",
         "Re-read original video frames in a time window to recover details missing from "
         "segment captions.",
         {{"video_id", "identifier", true, "", std::nullopt},
          {"t0", "timestamp", true, "window start", std::nullopt},
          {"t1", "timestamp", true, "window end, after t0", std::nullopt},
          {"instruction", "text", true, "what to look for", std::nullopt},
          {"granularity", "number", false, "frames per second", std::string("1")}}},
        {"web_search",
         "Search the internet for external knowledge.",
         {{"query", "text", true, "", std::nullopt}}},
        {"face_recognition",
         "Identify labeled faces in one frame.",
         {{"frame_ref", "identifier", true, "", std::nullopt}}},
        {"file_read",
         "Read a file adjacent to the ingest manifests.",
         {{"path", "text", true, "relative path", std::nullopt}}},
        {"code_exec",
         "Run an allowlisted command in a subprocess.",
         {{"command", "text", true, "", std::nullopt}}},
    };
}

inline Toolbox make_default_toolbox(const ToolboxConfig& cfg) {
    Toolbox box;
    auto specs = default_tool_specs();

    box.register_tool(specs[0], [cfg](const ToolCall& call) {
        if (!cfg.sources || !cfg.mllm) {
            return ToolResult::fail(FailureCategory::environment, "rewinder not configured");
        }
        RewindRequest req;
        req.video_id = call.args.at("video_id").get<std::string>();
        req.t0 = arg_seconds(call.args, "t0");
        req.t1 = arg_seconds(call.args, "t1");
        req.instruction = call.args.at("instruction").get<std::string>();
        req.granularity = call.args.contains("granularity")
                              ? call.args.at("granularity").get<double>()
                              : cfg.default_granularity;
        return rewinder(req, *cfg.sources, *cfg.mllm, cfg.detector, cfg.renderer);
    });

    box.register_tool(specs[1], [cfg](const ToolCall& call) {
        if (!cfg.web) {
            return ToolResult::fail(FailureCategory::upstream, "web search not configured");
        }
        return cfg.web->search(call.args.at("query").get<std::string>());
    });

    box.register_tool(specs[2], [cfg](const ToolCall& call) {
        std::string ref = call.args.at("frame_ref").get<std::string>();
        const Frame* frame = nullptr;
        if (cfg.sources) {
            for (const auto& id : cfg.sources->video_ids()) {
                frame = cfg.sources->find(id)->frame_by_ref(ref);
                if (frame) break;
            }
        }
        if (!frame) {
            return ToolResult::fail(FailureCategory::bad_args, "unknown frame ref \"" + ref + "\"");
        }
        nlohmann::json faces = nlohmann::json::array();
        if (cfg.detector) {
            for (const auto& a : cfg.detector->detect(ref)) {
                if (!a.valid()) continue;
                faces.push_back({{"box", {{"x", a.box.x}, {"y", a.box.y}, {"w", a.box.w},
                                          {"h", a.box.h}}},
                                 {"label", a.label},
                                 {"confidence", 1.0}});
            }
        }
        return ToolResult::success(faces.dump());
    });

    box.register_tool(specs[3], [cfg](const ToolCall& call) {
        namespace fs = std::filesystem;
        if (cfg.file_root.empty()) {
            return ToolResult::fail(FailureCategory::environment, "file tool not configured");
        }
        std::string rel = call.args.at("path").get<std::string>();
        fs::path root = fs::weakly_canonical(cfg.file_root);
        fs::path target = fs::weakly_canonical(root / rel);
        auto target_str = target.string();
        auto root_str = root.string();
        if (target_str.compare(0, root_str.size(), root_str) != 0) {
            return ToolResult::fail(FailureCategory::bad_args, "path escapes the manifest root");
        }
        std::ifstream in(target);
        if (!in) {
            return ToolResult::fail(FailureCategory::environment,
                                    "cannot read \"" + target_str + "\"");
        }
        std::ostringstream content;
        content << in.rdbuf();
        std::string text = content.str();
        constexpr std::size_t kMax = 4096;
        if (text.size() > kMax) text = text.substr(0, kMax) + "\n[truncated]";
        return ToolResult::success(std::move(text));
    });

    box.register_tool(specs[4], [cfg](const ToolCall& call) {
        CommandRunner runner = cfg.code_runner ? cfg.code_runner : disabled_command_runner();
        return runner(call.args.at("command").get<std::string>());
    });

    return box;
}

}  // namespace vidrag

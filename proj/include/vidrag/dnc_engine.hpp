#pragma once

// Divide-and-conquer loop: the conqueror evaluates a task, the divider splits
// tasks judged too complex, the rescuer repairs failed tool invocations, and
// conclusive synthesis turns the finished tree into one answer.

#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vidrag/common.hpp"
#include "vidrag/knowledge_store.hpp"
#include "vidrag/providers.hpp"
#include "vidrag/task_tree.hpp"
#include "vidrag/toolbox.hpp"
#include "vidrag/trace.hpp"

namespace vidrag {

inline constexpr const char* kDepthExceededMessage = "Task tree depth exceeded";
inline constexpr const char* kDegenerateSplitReason = "degenerate split";

class EngineError : public std::runtime_error {
public:
    explicit EngineError(const std::string& what) : std::runtime_error(what) {}
};

class VerdictParseError : public EngineError {
public:
    explicit VerdictParseError(const std::string& what) : EngineError(what) {}
};

// ---------------------------------------------------------------------------
// Query context
// ---------------------------------------------------------------------------

struct Query {
    std::string text;
    std::optional<std::string> video_id;
    std::optional<TimeFilter> extracted_filter;

    void validate() const {
        if (text.empty()) throw InvalidInputError("query text must be non-empty");
    }
};

struct RetrievalContext {
    std::vector<RetrievalHit> hits;  // ordered by score
    std::vector<ToolSpec> tool_catalog;
    Query query;
    std::vector<std::string> prior_findings;  // earlier sibling results
};

// ---------------------------------------------------------------------------
// Verdicts and plans
// ---------------------------------------------------------------------------

struct ConquerorVerdict {
    enum class Kind { too_complex, requires_tool, direct_answer };

    Kind kind = Kind::direct_answer;
    std::string reason;            // populated iff too_complex
    std::optional<ToolCall> tool;  // populated iff requires_tool
    std::string answer;            // populated iff direct_answer

    static ConquerorVerdict too_complex(std::string reason) {
        if (reason.empty()) throw InvalidInputError("too_complex verdict requires a reason");
        ConquerorVerdict v;
        v.kind = Kind::too_complex;
        v.reason = std::move(reason);
        return v;
    }

    static ConquerorVerdict requires_tool(ToolCall call) {
        ConquerorVerdict v;
        v.kind = Kind::requires_tool;
        v.tool = std::move(call);
        return v;
    }

    static ConquerorVerdict direct_answer(std::string answer) {
        if (answer.empty()) throw InvalidInputError("direct_answer verdict requires an answer");
        ConquerorVerdict v;
        v.kind = Kind::direct_answer;
        v.answer = std::move(answer);
        return v;
    }
};

inline const char* to_string(ConquerorVerdict::Kind k) {
    switch (k) {
        case ConquerorVerdict::Kind::too_complex: return "too_complex";
        case ConquerorVerdict::Kind::requires_tool: return "requires_tool";
        case ConquerorVerdict::Kind::direct_answer: return "direct_answer";
    }
    return "?";
}

struct DividePlan {
    bool success = false;
    std::vector<std::string> tasks;  // non-empty iff success
    std::string reason;              // non-empty iff not success

    static DividePlan ok(std::vector<std::string> tasks) {
        if (tasks.size() < 2) throw InvalidInputError("a division needs at least 2 subtasks");
        DividePlan p;
        p.success = true;
        p.tasks = std::move(tasks);
        return p;
    }

    static DividePlan fail(std::string reason) {
        DividePlan p;
        p.success = false;
        p.reason = std::move(reason);
        return p;
    }
};

struct RepairOutcome {
    bool repaired = false;
    std::string remedy_note;
    std::optional<ToolCall> retry_payload;  // present iff repaired
};

struct EngineConfig {
    // N = 0 forbids any recursion: a division at the root already exceeds the
    // tree depth limit.
    int max_depth = 4;
    int max_rescue_attempts = 3;
    enum class VerdictParsing { strict, lenient } verdict_parsing = VerdictParsing::strict;

    void validate() const {
        if (max_depth < 0) throw InvalidInputError("max_depth must be >= 0");
        if (max_rescue_attempts < 1) throw InvalidInputError("max_rescue_attempts must be >= 1");
    }
};

// ---------------------------------------------------------------------------
// Prompt builders (exposed so fixtures can be authored against them)
// ---------------------------------------------------------------------------

inline ChatRequest build_conqueror_request(const std::string& task_description,
                                           const RetrievalContext& ctx) {
    ChatRequest req;
    req.contract = ResponseContract::structured_verdict;
    std::ostringstream sys;
    sys << "You evaluate one task for a video question-answering agent.\n"
        << "Respond with JSON: {\"type\": \"too_complex\", \"reason\": ...} when the task "
        << "needs splitting, {\"type\": \"requires_tool\", \"tool\": {\"name\": ..., "
        << "\"args\": {...}}} when a tool should run, or {\"type\": \"direct_answer\", "
        << "\"answer\": ...} when the context already suffices.\n"
        << "Available tools:\n";
    for (const auto& spec : ctx.tool_catalog) sys << tool_spec_to_json(spec).dump() << "\n";
    req.messages.push_back({"system", sys.str()});
    std::ostringstream user;
    user << "Task: " << task_description << "\n";
    user << "Context segments:\n";
    for (const auto& hit : ctx.hits) {
        user << "[" << format_timecode(hit.entry.start_ts) << " - "
             << format_timecode(hit.entry.end_ts) << "] " << hit.entry.video_id << "\n"
             << hit.entry.caption_text << "\n";
    }
    user << "Earlier findings:\n";
    for (const auto& f : ctx.prior_findings) user << "- " << f << "\n";
    req.messages.push_back({"user", user.str()});
    return req;
}

inline ChatRequest build_divider_request(const std::string& task_description,
                                         const std::string& reason) {
    ChatRequest req;
    req.contract = ResponseContract::structured_divide;
    req.messages.push_back(
        {"system",
         "You split one task into simpler subtasks whose combined results answer the original "
         "task. Respond with JSON: {\"success\": true, \"tasks\": [...]} with at least two "
         "ordered subtasks, or {\"success\": false, \"reason\": ...} when no useful split "
         "exists."});
    std::ostringstream user;
    user << "Task: " << task_description << "\n";
    user << "Why it was judged too complex: " << reason << "\n";
    req.messages.push_back({"user", user.str()});
    return req;
}

inline ChatRequest build_synthesis_request(const std::string& query,
                                           const std::vector<std::string>& findings) {
    ChatRequest req;
    req.contract = ResponseContract::free_text;
    req.messages.push_back(
        {"system",
         "You produce the final answer to the user's question from the ordered subtask "
         "findings. Mention any failed subtasks as caveats."});
    std::ostringstream user;
    user << "Question: " << query << "\n";
    user << "Findings:\n";
    for (std::size_t i = 0; i < findings.size(); ++i) {
        user << (i + 1) << ". " << findings[i] << "\n";
    }
    req.messages.push_back({"user", user.str()});
    return req;
}

// ---------------------------------------------------------------------------
// Verdict parsing
// ---------------------------------------------------------------------------

inline ConquerorVerdict parse_verdict_json(const nlohmann::json& j) {
    const std::string type = j.at("type").get<std::string>();
    if (type == "too_complex") {
        return ConquerorVerdict::too_complex(j.at("reason").get<std::string>());
    }
    if (type == "requires_tool") {
        const auto& tool = j.at("tool");
        ToolCall call;
        call.tool_name = tool.at("name").get<std::string>();
        call.args = tool.value("args", nlohmann::json::object());
        return ConquerorVerdict::requires_tool(std::move(call));
    }
    if (type == "direct_answer") {
        return ConquerorVerdict::direct_answer(j.at("answer").get<std::string>());
    }
    throw VerdictParseError("unknown verdict type \"" + type + "\"");
}

/// Lenient mode first looks for an embedded JSON object, then falls back to
/// the three verdict phrases appearing in prose (first match wins).
inline ConquerorVerdict parse_verdict_lenient(const std::string& text) {
    auto open = text.find('{');
    auto close = text.rfind('}');
    if (open != std::string::npos && close != std::string::npos && close > open) {
        auto j = nlohmann::json::parse(text.substr(open, close - open + 1), nullptr, false);
        if (!j.is_discarded() && j.is_object() && j.contains("type")) {
            try {
                return parse_verdict_json(j);
            } catch (const std::exception&) {
                // fall through to phrase matching
            }
        }
    }
    const std::string folded = fold_case(text);
    struct Phrase {
        const char* needle;
        ConquerorVerdict::Kind kind;
    };
    const Phrase phrases[] = {
        {"too_complex", ConquerorVerdict::Kind::too_complex},
        {"too complex", ConquerorVerdict::Kind::too_complex},
        {"requires_tool", ConquerorVerdict::Kind::requires_tool},
        {"requires tool", ConquerorVerdict::Kind::requires_tool},
        {"direct_answer", ConquerorVerdict::Kind::direct_answer},
        {"direct answer", ConquerorVerdict::Kind::direct_answer},
    };
    std::size_t best_pos = std::string::npos;
    const Phrase* best = nullptr;
    for (const auto& p : phrases) {
        auto pos = folded.find(p.needle);
        if (pos != std::string::npos && (best == nullptr || pos < best_pos)) {
            best_pos = pos;
            best = &p;
        }
    }
    if (!best) throw VerdictParseError("no verdict found in provider output");
    switch (best->kind) {
        case ConquerorVerdict::Kind::too_complex: return ConquerorVerdict::too_complex(text);
        case ConquerorVerdict::Kind::direct_answer: return ConquerorVerdict::direct_answer(text);
        case ConquerorVerdict::Kind::requires_tool:
            throw VerdictParseError("requires_tool verdict without a parseable tool call");
    }
    throw VerdictParseError("unreachable");
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

struct DncOutcome {
    enum class Kind { answer, tool_result, divided, divide_failed, task_failed, depth_exceeded };
    Kind kind = Kind::answer;
    std::string text;
};

/// Called for environment-category tool failures; returns true when the named
/// package was installed (or otherwise repaired).
using EnvironmentRepairHook = std::function<bool(const std::string& package)>;

class DncEngine {
public:
    DncEngine(ChatProvider& chat, const Toolbox& toolbox, EngineConfig config,
              Trace* trace = nullptr, EnvironmentRepairHook env_repair = {})
        : chat_(chat),
          toolbox_(toolbox),
          config_(config),
          trace_(trace),
          env_repair_(std::move(env_repair)) {
        config_.validate();
    }

    const EngineConfig& config() const { return config_; }

    ConquerorVerdict conqueror(const TaskNode& task, const RetrievalContext& ctx) {
        std::string response;
        try {
            response = chat_.chat(build_conqueror_request(task.description, ctx));
        } catch (const ProviderError& e) {
            if (e.kind() == ProviderErrorKind::contract_violation &&
                config_.verdict_parsing == EngineConfig::VerdictParsing::lenient) {
                return parse_verdict_lenient(e.raw());
            }
            if (e.kind() == ProviderErrorKind::contract_violation) {
                throw VerdictParseError(e.what());
            }
            throw EngineError(std::string("conqueror provider failure: ") + e.what());
        }
        auto j = try_parse_json_object(response);
        if (!j) throw VerdictParseError("verdict is not a JSON object");
        return parse_verdict_json(*j);
    }

    DividePlan divider(const TaskNode& task, const std::string& reason) {
        if (reason.empty()) throw InvalidInputError("divider requires a reason");
        std::string response;
        try {
            response = chat_.chat(build_divider_request(task.description, reason));
        } catch (const ProviderError& e) {
            throw EngineError(std::string("divider provider failure: ") + e.what());
        }
        auto j = try_parse_json_object(response);
        if (!j) return DividePlan::fail("divider output unparseable");
        bool success = j->value("success", false);
        if (!success) {
            return DividePlan::fail(j->value("reason", std::string("division failed")));
        }
        std::vector<std::string> tasks;
        for (const auto& t : j->value("tasks", nlohmann::json::array())) {
            if (t.is_string() && !t.get<std::string>().empty()) {
                tasks.push_back(t.get<std::string>());
            }
        }
        if (tasks.size() < 2) return DividePlan::fail(kDegenerateSplitReason);
        return DividePlan::ok(std::move(tasks));
    }

    /// Deterministic repair by failure category: bad_args are re-normalized
    /// against the tool's schema, environment failures go through the repair
    /// hook, upstream failures retry as-is, unknown tools give up.
    RepairOutcome rescuer(const TaskNode&, const ToolFailure& failure, const ToolCall& failed_call,
                          int attempts_so_far) {
        if (attempts_so_far >= config_.max_rescue_attempts) {
            return {false, "rescue budget exhausted", std::nullopt};
        }
        switch (failure.category) {
            case FailureCategory::bad_args: return repair_args(failed_call);
            case FailureCategory::environment: {
                std::string package = missing_package(failure.message);
                if (!package.empty() && env_repair_ && env_repair_(package)) {
                    return {true, "installed missing package \"" + package + "\"", failed_call};
                }
                return {false, "environment repair unavailable", std::nullopt};
            }
            case FailureCategory::upstream:
                return {true, "retry after transient upstream failure", failed_call};
            case FailureCategory::not_found:
                return {false, "tool not registered; giving up", std::nullopt};
        }
        return {false, "unrecognized failure", std::nullopt};
    }

    /// Exact control flow of the recursive DnC procedure. Return values of
    /// recursive calls are discarded; results live in the tree.
    DncOutcome dnc(TaskTree& tree, std::int64_t node_id, const RetrievalContext& ctx) {
        tree.mark_running(node_id);
        ConquerorVerdict verdict;
        try {
            verdict = conqueror(tree.node(node_id), ctx);
        } catch (const EngineError& e) {
            tree.mark_failed(node_id, e.what());
            throw;
        }
        trace("conquered", node_id, {{"verdict", to_string(verdict.kind)}});

        switch (verdict.kind) {
            case ConquerorVerdict::Kind::too_complex: {
                DividePlan plan = divider(tree.node(node_id), verdict.reason);
                if (!plan.success) {
                    trace("divided", node_id, {{"success", false}, {"reason", plan.reason}});
                    tree.mark_failed(node_id, plan.reason);
                    return {DncOutcome::Kind::divide_failed, plan.reason};
                }
                trace("divided", node_id,
                      {{"success", true}, {"subtasks", plan.tasks.size()}});
                auto child_ids = tree.add_subtasks(node_id, plan.tasks);
                RetrievalContext child_ctx = ctx;
                for (std::int64_t child : child_ids) {
                    if (tree.node(child).depth > config_.max_depth) {
                        tree.mark_too_deep(child);
                        tree.mark_failed(node_id, kDepthExceededMessage);
                        return {DncOutcome::Kind::depth_exceeded, kDepthExceededMessage};
                    }
                    dnc(tree, child, child_ctx);
                    child_ctx.prior_findings.push_back(finding_of(tree.node(child)));
                }
                std::string summary = join_findings(tree, child_ids);
                tree.update_result(node_id, TaskResult::answer(summary));
                return {DncOutcome::Kind::divided, summary};
            }
            case ConquerorVerdict::Kind::requires_tool: {
                ToolCall call = *verdict.tool;
                ToolResult result = toolbox_.invoke(call);
                trace_tool(node_id, call, result);
                int attempts = 0;
                while (!result.ok && attempts < config_.max_rescue_attempts) {
                    RepairOutcome repair =
                        rescuer(tree.node(node_id), *result.failure, call, attempts);
                    trace("rescued", node_id,
                          {{"repaired", repair.repaired}, {"note", repair.remedy_note}});
                    if (!repair.repaired) break;
                    call = *repair.retry_payload;
                    ++attempts;
                    result = toolbox_.invoke(call);
                    trace_tool(node_id, call, result);
                }
                if (result.ok) {
                    tree.update_result(node_id,
                                       TaskResult::tool_output(result.content, result.artifacts));
                    return {DncOutcome::Kind::tool_result, result.content};
                }
                tree.mark_failed(node_id, result.failure->message);
                return {DncOutcome::Kind::task_failed, result.failure->message};
            }
            case ConquerorVerdict::Kind::direct_answer: {
                tree.update_result(node_id, TaskResult::answer(verdict.answer));
                return {DncOutcome::Kind::answer, verdict.answer};
            }
        }
        throw InternalError("unreachable verdict kind");
    }

    /// Final answer from the ordered leaf findings. Failed and unexecuted
    /// leaves stay visible so the synthesizer can caveat them.
    std::string conclusive_synthesis(const TaskTree& tree, const std::string& query) {
        if (query.empty()) throw InvalidInputError("synthesis requires the original query");
        std::vector<std::string> findings;
        for (std::int64_t leaf : tree.leaves()) {
            findings.push_back(finding_of(tree.node(leaf)));
        }
        std::string response;
        try {
            response = chat_.chat(build_synthesis_request(query, findings));
        } catch (const ProviderError& e) {
            throw EngineError(std::string("synthesis provider failure: ") + e.what());
        }
        trace("synthesized", 0, {{"findings", findings.size()}});
        return response;
    }

    static std::string finding_of(const TaskNode& node) {
        switch (node.status) {
            case TaskStatus::success: return node.description + " -> " + node.result->content;
            case TaskStatus::failed:
                return node.description + " -> [failed: " +
                       node.failure_reason.value_or("unknown") + "]";
            case TaskStatus::too_deep:
                return node.description + " -> [not executed: depth limit]";
            default: return node.description + " -> [not executed]";
        }
    }

private:
    RepairOutcome repair_args(const ToolCall& failed_call) {
        const ToolSpec* spec = toolbox_.find(failed_call.tool_name);
        if (!spec) return {false, "no schema for tool", std::nullopt};
        ToolCall amended = failed_call;
        bool changed = false;
        for (const auto& arg : spec->args) {
            if (!amended.args.contains(arg.name)) {
                if (arg.required && arg.default_value) {
                    amended.args[arg.name] = *arg.default_value;
                    changed = true;
                }
                continue;
            }
            if (arg.type == "timestamp" && amended.args[arg.name].is_string()) {
                std::string raw = amended.args[arg.name].get<std::string>();
                if (!parse_timecode(raw)) {
                    auto lenient = parse_timecode(raw, /*lenient=*/true);
                    if (!lenient) {
                        return {false, "timestamp \"" + raw + "\" beyond repair", std::nullopt};
                    }
                    amended.args[arg.name] = format_timecode(*lenient);
                    changed = true;
                }
            }
        }
        // A reversed window is amendable: swap.
        if (amended.args.contains("t0") && amended.args.contains("t1")) {
            try {
                double t0 = arg_seconds(amended.args, "t0");
                double t1 = arg_seconds(amended.args, "t1");
                if (t0 > t1) {
                    std::swap(amended.args["t0"], amended.args["t1"]);
                    changed = true;
                }
            } catch (const std::exception&) {
                // unparseable even leniently; covered above
            }
        }
        if (!changed) return {false, "cannot amend arguments", std::nullopt};
        return {true, "normalized arguments", amended};
    }

    static std::string missing_package(const std::string& message) {
        // Recognizes "module X not found", "package X is missing", and close
        // variants.
        auto tokens = tokenize_folded(message);
        for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
            if ((tokens[i] == "module" || tokens[i] == "package") && i + 1 < tokens.size()) {
                const std::string& candidate = tokens[i + 1];
                for (std::size_t j = i + 1; j < tokens.size(); ++j) {
                    if (tokens[j] == "missing" || (tokens[j] == "not" && j + 1 < tokens.size() &&
                                                   tokens[j + 1] == "found")) {
                        return candidate;
                    }
                }
            }
        }
        return "";
    }

    std::string join_findings(const TaskTree& tree, const std::vector<std::int64_t>& ids) {
        std::ostringstream out;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (i) out << "\n";
            out << "subtask " << (i + 1) << ": " << finding_of(tree.node(ids[i]));
        }
        return out.str();
    }

    void trace(const std::string& event, std::int64_t node_id, nlohmann::json payload) {
        if (trace_) trace_->add(event, node_id, std::move(payload));
    }

    void trace_tool(std::int64_t node_id, const ToolCall& call, const ToolResult& result) {
        nlohmann::json payload;
        payload["tool"] = call.tool_name;
        payload["ok"] = result.ok;
        if (!result.ok) payload["failure"] = to_string(result.failure->category);
        trace("tool_invoked", node_id, std::move(payload));
    }

    ChatProvider& chat_;
    const Toolbox& toolbox_;
    EngineConfig config_;
    Trace* trace_;
    EnvironmentRepairHook env_repair_;
};

}  // namespace vidrag

#pragma once

// Query-side pipeline: extract temporal hints from the question, run
// timestamp-filtered hybrid retrieval, hand the original task to the DnC
// engine, and synthesize the final answer.

#include <optional>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include "vidrag/common.hpp"
#include "vidrag/dnc_engine.hpp"
#include "vidrag/knowledge_store.hpp"
#include "vidrag/media.hpp"
#include "vidrag/providers.hpp"
#include "vidrag/toolbox.hpp"
#include "vidrag/trace.hpp"
#include "vidrag/video2rag.hpp"

namespace vidrag {

// ---------------------------------------------------------------------------
// Temporal extraction
// ---------------------------------------------------------------------------

namespace detail {

inline void mask_region(std::string& text, std::size_t pos, std::size_t len) {
    for (std::size_t i = pos; i < pos + len && i < text.size(); ++i) text[i] = ' ';
}

/// All instants found by the deterministic pattern pass, in seconds.
inline std::vector<double> scan_instants(const std::string& query_text) {
    std::vector<double> instants;
    std::string text = query_text;

    // "N minutes and M seconds"
    static const std::regex min_sec(R"((\d+)\s*minutes?\s+and\s+(\d+)\s*seconds?)",
                                    std::regex::icase);
    for (std::smatch m; std::regex_search(text, m, min_sec);) {
        instants.push_back(std::stod(m[1]) * 60 + std::stod(m[2]));
        mask_region(text, static_cast<std::size_t>(m.position(0)),
                    static_cast<std::size_t>(m.length(0)));
    }
    // "34th and 35th minute" (range phrasing), then single ordinal minutes
    static const std::regex ord_pair(
        R"((\d+)(?:st|nd|rd|th)\s+and\s+(?:the\s+)?(\d+)(?:st|nd|rd|th)\s+minutes?)",
        std::regex::icase);
    for (std::smatch m; std::regex_search(text, m, ord_pair);) {
        instants.push_back(std::stod(m[1]) * 60);
        instants.push_back(std::stod(m[2]) * 60);
        mask_region(text, static_cast<std::size_t>(m.position(0)),
                    static_cast<std::size_t>(m.length(0)));
    }
    static const std::regex ord_single(R"((\d+)(?:st|nd|rd|th)\s+minutes?)", std::regex::icase);
    for (std::smatch m; std::regex_search(text, m, ord_single);) {
        instants.push_back(std::stod(m[1]) * 60);
        mask_region(text, static_cast<std::size_t>(m.position(0)),
                    static_cast<std::size_t>(m.length(0)));
    }
    // HH:MM:SS / MM:SS timecodes
    static const std::regex timecode(R"((\d{1,2}:)?\d{1,2}:\d{2}(\.\d+)?)");
    for (std::smatch m; std::regex_search(text, m, timecode);) {
        if (auto t = parse_timecode(m.str())) instants.push_back(*t);
        mask_region(text, static_cast<std::size_t>(m.position(0)),
                    static_cast<std::size_t>(m.length(0)));
    }
    return instants;
}

}  // namespace detail

/// Two-stage extraction: a deterministic pattern pass, then an optional LLM
/// pass for phrasings the patterns miss. Instants widen by the pad on both
/// sides; absent temporal information yields no filter.
inline std::optional<TimeFilter> extract_time_filter(const std::string& query_text,
                                                     ChatProvider* llm = nullptr,
                                                     double pad_s = 5.0) {
    if (query_text.empty()) throw InvalidInputError("extract_time_filter: empty query");
    auto instants = detail::scan_instants(query_text);
    if (instants.empty() && llm) {
        ChatRequest req;
        req.contract = ResponseContract::free_text;
        req.messages.push_back(
            {"system",
             "Extract explicit video-time references from the question. Respond with JSON "
             "{\"has_time\": bool, \"t0\": seconds, \"t1\": seconds}."});
        req.messages.push_back({"user", query_text});
        try {
            auto j = try_parse_json_object(llm->chat(req));
            if (j && j->value("has_time", false) && j->contains("t0") && j->contains("t1")) {
                double t0 = (*j)["t0"].get<double>();
                double t1 = (*j)["t1"].get<double>();
                if (t0 <= t1) {
                    instants.push_back(t0);
                    instants.push_back(t1);
                }
            }
        } catch (const std::exception&) {
            // fall back to the pattern result
        }
    }
    if (instants.empty()) return std::nullopt;
    double lo = instants.front(), hi = instants.front();
    for (double t : instants) {
        lo = std::min(lo, t);
        hi = std::max(hi, t);
    }
    TimeFilter filter;
    filter.window = {std::max(0.0, lo - pad_s), hi + pad_s};
    return filter;
}

// ---------------------------------------------------------------------------
// Retrieval with the empty-filter fallback
// ---------------------------------------------------------------------------

/// Filtered hybrid retrieval; an empty filtered result degrades to unfiltered
/// retrieval with an auditable notice instead of dead-ending.
inline std::vector<RetrievalHit> retrieve_with_fallback(const KnowledgeStore& store,
                                                        EmbeddingProvider& embedder,
                                                        const std::string& query_text,
                                                        const TimeFilter& filter, int k,
                                                        bool* used_fallback = nullptr,
                                                        std::vector<std::string>* notices = nullptr) {
    auto hits = store.hybrid_search(query_text, embedder, filter, k, notices);
    if (used_fallback) *used_fallback = false;
    if (hits.empty() && filter.window) {
        TimeFilter unfiltered = filter;
        unfiltered.window.reset();
        hits = store.hybrid_search(query_text, embedder, unfiltered, k, notices);
        if (used_fallback) *used_fallback = true;
        if (notices) {
            notices->push_back("filtered retrieval empty; fell back to unfiltered retrieval");
        }
    }
    return hits;
}

// ---------------------------------------------------------------------------
// Query engine
// ---------------------------------------------------------------------------

struct QueryEngineConfig {
    EngineConfig engine;
    int retrieval_k = 10;
    double time_pad_s = 5.0;
};

struct FinalAnswer {
    std::string text;
    bool unanswered = false;
    std::string trace_text;  // serialized trace incl. final tree
};

class QueryEngine {
public:
    QueryEngine(const KnowledgeStore& store, const SourceStore& sources, ChatProvider& chat,
                EmbeddingProvider& embedder, const Toolbox& toolbox, QueryEngineConfig config,
                ChatProvider* time_llm = nullptr, EnvironmentRepairHook env_repair = {})
        : store_(store),
          sources_(sources),
          chat_(chat),
          embedder_(embedder),
          toolbox_(toolbox),
          config_(config),
          time_llm_(time_llm),
          env_repair_(std::move(env_repair)) {
        config_.engine.validate();
    }

    FinalAnswer answer(Query query, Trace* out_trace = nullptr) {
        query.validate();
        if (query.video_id && !sources_.find(*query.video_id)) {
            throw InvalidInputError("video not ingested: " + *query.video_id);
        }
        TimeFilter filter;
        if (query.extracted_filter) {
            filter = *query.extracted_filter;
        } else if (auto extracted = extract_time_filter(query.text, time_llm_, config_.time_pad_s)) {
            filter = *extracted;
        }
        filter.video_id = query.video_id;
        query.extracted_filter = filter;

        Trace trace(query.text, query.video_id.value_or(""), "omagent");
        std::vector<std::string> notices;
        bool fallback = false;
        auto hits = retrieve_with_fallback(store_, embedder_, query.text, filter,
                                           config_.retrieval_k, &fallback, &notices);
        nlohmann::json retrieved;
        retrieved["hits"] = hits.size();
        retrieved["window"] = filter.window
                                  ? nlohmann::json(format_timecode(filter.window->first) + "-" +
                                                   format_timecode(filter.window->second))
                                  : nlohmann::json(nullptr);
        retrieved["fallback"] = fallback;
        retrieved["notices"] = notices;
        trace.add("retrieved", 0, std::move(retrieved));

        RetrievalContext ctx;
        ctx.hits = std::move(hits);
        ctx.tool_catalog = toolbox_.catalog();
        ctx.query = query;

        TaskTree tree = TaskTree::init(query.text);
        DncEngine engine(chat_, toolbox_, config_.engine, &trace, env_repair_);

        FinalAnswer final;
        try {
            DncOutcome outcome = engine.dnc(tree, 0, ctx);
            bool any_success = false;
            for (std::int64_t leaf : tree.leaves()) {
                if (tree.node(leaf).status == TaskStatus::success) any_success = true;
            }
            if (any_success) {
                final.text = engine.conclusive_synthesis(tree, query.text);
                final.unanswered = false;
            } else {
                final.text = outcome.text;
                final.unanswered = true;
            }
        } catch (const EngineError& e) {
            final.text = e.what();
            final.unanswered = true;
        }
        final.trace_text = trace.serialize(&tree);
        if (out_trace) *out_trace = trace;
        return final;
    }

    const QueryEngineConfig& config() const { return config_; }

private:
    const KnowledgeStore& store_;
    const SourceStore& sources_;
    ChatProvider& chat_;
    EmbeddingProvider& embedder_;
    const Toolbox& toolbox_;
    QueryEngineConfig config_;
    ChatProvider* time_llm_;
    EnvironmentRepairHook env_repair_;
};

}  // namespace vidrag

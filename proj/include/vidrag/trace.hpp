#pragma once

// Execution trace for one query: a header, ordered event records, and the
// final task-tree serialization. Deterministic byte-for-byte under mock
// providers, which the replay tests rely on.

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vidrag/task_tree.hpp"

namespace vidrag {

struct TraceEvent {
    int seq = 0;
    std::string event;  // retrieved | conquered | divided | tool_invoked | rescued | synthesized
    std::int64_t node_id = -1;
    nlohmann::json payload;  // flat object merged into the record
};

class Trace {
public:
    Trace() = default;
    Trace(std::string query, std::string video_id, std::string mode)
        : query_(std::move(query)), video_id_(std::move(video_id)), mode_(std::move(mode)) {}

    void add(const std::string& event, std::int64_t node_id,
             nlohmann::json payload = nlohmann::json::object()) {
        events_.push_back({next_seq_++, event, node_id, std::move(payload)});
    }

    const std::vector<TraceEvent>& events() const { return events_; }

    std::size_t count(const std::string& event) const {
        std::size_t n = 0;
        for (const auto& e : events_) {
            if (e.event == event) ++n;
        }
        return n;
    }

    bool has(const std::string& event) const { return count(event) > 0; }

    /// Node ids of conquered events, i.e. the executed order.
    std::vector<std::int64_t> executed_order() const {
        std::vector<std::int64_t> out;
        for (const auto& e : events_) {
            if (e.event == "conquered") out.push_back(e.node_id);
        }
        return out;
    }

    std::string serialize(const TaskTree* tree = nullptr) const {
        std::ostringstream out;
        nlohmann::json header;
        header["type"] = "header";
        header["query"] = query_;
        header["video_id"] = video_id_;
        header["mode"] = mode_;
        out << header.dump() << "\n";
        for (const auto& e : events_) {
            nlohmann::json rec = e.payload;
            rec["type"] = "event";
            rec["seq"] = e.seq;
            rec["event"] = e.event;
            rec["node_id"] = e.node_id;
            out << rec.dump() << "\n";
        }
        if (tree) out << tree->serialize();
        return out.str();
    }

    void write(const std::string& path, const TaskTree* tree = nullptr) const {
        std::ofstream out(path);
        if (!out) throw InvalidInputError("cannot write trace file: " + path);
        out << serialize(tree);
    }

private:
    std::string query_;
    std::string video_id_;
    std::string mode_;
    int next_seq_ = 1;
    std::vector<TraceEvent> events_;
};

}  // namespace vidrag

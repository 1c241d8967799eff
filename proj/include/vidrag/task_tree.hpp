#pragma once

// Recursive task tree with status tracking and depth accounting. The tree is
// append-only: nodes are never removed, only their status/result fields move
// through pending -> running -> {success, failed} or pending -> too_deep.

#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vidrag/common.hpp"

namespace vidrag {

enum class TaskStatus { pending, running, success, failed, too_deep };

inline const char* to_string(TaskStatus s) {
    switch (s) {
        case TaskStatus::pending: return "pending";
        case TaskStatus::running: return "running";
        case TaskStatus::success: return "success";
        case TaskStatus::failed: return "failed";
        case TaskStatus::too_deep: return "too_deep";
    }
    return "?";
}

inline std::optional<TaskStatus> task_status_from_string(std::string_view s) {
    if (s == "pending") return TaskStatus::pending;
    if (s == "running") return TaskStatus::running;
    if (s == "success") return TaskStatus::success;
    if (s == "failed") return TaskStatus::failed;
    if (s == "too_deep") return TaskStatus::too_deep;
    return std::nullopt;
}

inline bool is_terminal(TaskStatus s) {
    return s == TaskStatus::success || s == TaskStatus::failed || s == TaskStatus::too_deep;
}

/// Named attachment carried by a result (e.g. an extracted frame reference).
struct Artifact {
    std::string name;
    std::string ref;

    bool operator==(const Artifact&) const = default;
};

enum class ResultKind { answer, tool_output };

struct TaskResult {
    ResultKind kind = ResultKind::answer;
    std::string content;
    std::vector<Artifact> artifacts;

    static TaskResult answer(std::string text) {
        if (text.empty()) throw InvalidInputError("answer result requires non-empty content");
        TaskResult r;
        r.kind = ResultKind::answer;
        r.content = std::move(text);
        return r;
    }

    static TaskResult tool_output(std::string text, std::vector<Artifact> artifacts = {}) {
        TaskResult r;
        r.kind = ResultKind::tool_output;
        r.content = std::move(text);
        r.artifacts = std::move(artifacts);
        return r;
    }

    bool operator==(const TaskResult&) const = default;
};

struct TaskNode {
    std::int64_t id = 0;
    std::int64_t parent_id = -1;  // -1 for the root
    std::string description;
    TaskStatus status = TaskStatus::pending;
    int depth = 0;
    std::vector<std::int64_t> children;  // insertion order
    std::optional<TaskResult> result;
    std::optional<std::string> failure_reason;

    bool is_leaf() const { return children.empty(); }
};

/// Owns all nodes of one query's execution; ids are assigned monotonically
/// starting at 0 for the root so replays and logs stay stable.
class TaskTree {
public:
    static TaskTree init(const std::string& user_task) {
        if (user_task.empty()) throw InvalidInputError("task text must be non-empty");
        TaskTree tree;
        TaskNode root;
        root.id = 0;
        root.parent_id = -1;
        root.description = user_task;
        tree.nodes_.push_back(std::move(root));
        return tree;
    }

    std::size_t size() const { return nodes_.size(); }

    const TaskNode& node(std::int64_t id) const { return nodes_.at(checked(id)); }
    const TaskNode& root() const { return nodes_.front(); }

    std::vector<std::int64_t> add_subtasks(std::int64_t parent_id,
                                           const std::vector<std::string>& descriptions) {
        TaskNode& parent = nodes_.at(checked(parent_id));
        if (descriptions.empty()) throw InvalidInputError("add_subtasks: empty description list");
        for (const auto& d : descriptions) {
            if (d.empty()) throw InvalidInputError("add_subtasks: empty subtask description");
        }
        if (parent.status == TaskStatus::too_deep) {
            throw StateTransitionError("add_subtasks: too_deep node cannot gain children");
        }
        std::vector<std::int64_t> ids;
        ids.reserve(descriptions.size());
        for (const auto& d : descriptions) {
            TaskNode child;
            child.id = static_cast<std::int64_t>(nodes_.size());
            child.parent_id = parent.id;
            child.description = d;
            child.depth = parent.depth + 1;
            for (std::int64_t existing : parent.children) {
                if (existing == child.id) throw InternalError("duplicate child id");
            }
            parent.children.push_back(child.id);
            ids.push_back(child.id);
            nodes_.push_back(std::move(child));
        }
        return ids;
    }

    void mark_running(std::int64_t id) {
        TaskNode& n = nodes_.at(checked(id));
        if (n.status != TaskStatus::pending) {
            throw StateTransitionError(std::string("mark_running from ") + to_string(n.status));
        }
        n.status = TaskStatus::running;
    }

    void update_result(std::int64_t id, TaskResult result) {
        TaskNode& n = nodes_.at(checked(id));
        if (n.status != TaskStatus::running) {
            throw StateTransitionError(std::string("update_result on node in state ") +
                                       to_string(n.status));
        }
        if (result.kind == ResultKind::answer && result.content.empty()) {
            throw InvalidInputError("answer result requires non-empty content");
        }
        n.result = std::move(result);
        n.status = TaskStatus::success;
    }

    void mark_failed(std::int64_t id, std::string reason) {
        TaskNode& n = nodes_.at(checked(id));
        if (n.status != TaskStatus::running) {
            throw StateTransitionError(std::string("mark_failed on node in state ") +
                                       to_string(n.status));
        }
        n.status = TaskStatus::failed;
        n.failure_reason = std::move(reason);
    }

    void mark_too_deep(std::int64_t id) {
        TaskNode& n = nodes_.at(checked(id));
        if (n.status != TaskStatus::pending) {
            throw StateTransitionError(std::string("mark_too_deep on node in state ") +
                                       to_string(n.status));
        }
        if (!n.children.empty()) throw InternalError("too_deep node must have no children");
        n.status = TaskStatus::too_deep;
    }

    /// Number of ancestors of a node.
    int depth_of(std::int64_t id) const { return nodes_.at(checked(id)).depth; }

    /// Leaves in depth-first (execution) order.
    std::vector<std::int64_t> leaves() const {
        std::vector<std::int64_t> out;
        collect_leaves(0, out);
        return out;
    }

    bool all_leaves_terminal() const {
        for (std::int64_t id : leaves()) {
            if (!is_terminal(nodes_[static_cast<std::size_t>(id)].status)) return false;
        }
        return true;
    }

    nlohmann::json node_record(const TaskNode& n) const {
        nlohmann::json rec;
        rec["type"] = "node";
        rec["id"] = n.id;
        if (n.parent_id < 0) {
            rec["parent_id"] = nullptr;
        } else {
            rec["parent_id"] = n.parent_id;
        }
        rec["depth"] = n.depth;
        rec["description"] = n.description;
        rec["status"] = to_string(n.status);
        if (n.result) {
            nlohmann::json res;
            res["kind"] = n.result->kind == ResultKind::answer ? "answer" : "tool_output";
            res["content"] = n.result->content;
            nlohmann::json arts = nlohmann::json::array();
            for (const auto& a : n.result->artifacts) {
                arts.push_back({{"name", a.name}, {"ref", a.ref}});
            }
            res["artifacts"] = arts;
            rec["result"] = res;
        } else {
            rec["result"] = nullptr;
        }
        if (n.failure_reason) {
            rec["failure_reason"] = *n.failure_reason;
        } else {
            rec["failure_reason"] = nullptr;
        }
        return rec;
    }

    /// One JSON object per node, in id (creation) order.
    std::string serialize() const {
        std::ostringstream out;
        for (const auto& n : nodes_) out << node_record(n).dump() << "\n";
        return out.str();
    }

    static TaskTree parse(const std::string& text) {
        TaskTree tree;
        std::istringstream in(text);
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            nlohmann::json rec = nlohmann::json::parse(line);
            TaskNode n;
            n.id = rec.at("id").get<std::int64_t>();
            n.parent_id = rec.at("parent_id").is_null() ? -1 : rec.at("parent_id").get<std::int64_t>();
            n.depth = rec.at("depth").get<int>();
            n.description = rec.at("description").get<std::string>();
            auto status = task_status_from_string(rec.at("status").get<std::string>());
            if (!status) throw InvalidInputError("unknown task status in serialized tree");
            n.status = *status;
            if (!rec.at("result").is_null()) {
                const auto& res = rec.at("result");
                TaskResult r;
                r.kind = res.at("kind").get<std::string>() == "answer" ? ResultKind::answer
                                                                       : ResultKind::tool_output;
                r.content = res.at("content").get<std::string>();
                for (const auto& a : res.at("artifacts")) {
                    r.artifacts.push_back({a.at("name").get<std::string>(),
                                           a.at("ref").get<std::string>()});
                }
                n.result = std::move(r);
            }
            if (!rec.at("failure_reason").is_null()) {
                n.failure_reason = rec.at("failure_reason").get<std::string>();
            }
            if (n.id != static_cast<std::int64_t>(tree.nodes_.size())) {
                throw InvalidInputError("serialized tree ids must be dense and ordered");
            }
            tree.nodes_.push_back(std::move(n));
        }
        if (tree.nodes_.empty()) throw InvalidInputError("serialized tree is empty");
        // Rebuild child lists; creation order equals id order.
        for (auto& n : tree.nodes_) n.children.clear();
        for (const auto& n : tree.nodes_) {
            if (n.parent_id >= 0) {
                TaskNode& p = tree.nodes_.at(static_cast<std::size_t>(n.parent_id));
                if (n.depth != p.depth + 1) {
                    throw InvalidInputError("serialized tree depth inconsistent with parent");
                }
                p.children.push_back(n.id);
            }
        }
        return tree;
    }

private:
    TaskTree() = default;

    std::size_t checked(std::int64_t id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) {
            throw InvalidInputError("unknown task node id " + std::to_string(id));
        }
        return static_cast<std::size_t>(id);
    }

    void collect_leaves(std::int64_t id, std::vector<std::int64_t>& out) const {
        const TaskNode& n = nodes_[static_cast<std::size_t>(id)];
        if (n.children.empty()) {
            out.push_back(id);
            return;
        }
        for (std::int64_t c : n.children) collect_leaves(c, out);
    }

    std::vector<TaskNode> nodes_;
};

}  // namespace vidrag

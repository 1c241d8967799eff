#pragma once

// Knowledge database over scene captions: an exact (exhaustive) cosine index
// over caption embeddings plus keyword scoring over the caption text, both
// filterable by segment time span. Per-video segment counts stay small, so
// exhaustive scoring is exact and cheap; an ANN index can slot in behind the
// same surface later if stores outgrow it.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <string>
#include <vector>

#include <json.hpp>

#include "vidrag/common.hpp"
#include "vidrag/providers.hpp"

namespace vidrag {

struct KnowledgeEntry {
    std::string entry_id;
    std::string video_id;
    double start_ts = 0;
    double end_ts = 0;
    std::string caption_text;  // serialized scene caption
    std::vector<float> embedding;  // L2-normalized

    bool operator==(const KnowledgeEntry&) const = default;
};

struct TimeFilter {
    std::optional<std::pair<double, double>> window;  // (t_lo, t_hi) seconds
    std::optional<std::string> video_id;

    void validate() const {
        if (window && window->first > window->second) {
            throw InvalidInputError("time filter window with t_lo > t_hi");
        }
    }
};

enum class HitSource { vector, keyword, both };

inline const char* to_string(HitSource s) {
    switch (s) {
        case HitSource::vector: return "vector";
        case HitSource::keyword: return "keyword";
        case HitSource::both: return "both";
    }
    return "?";
}

struct RetrievalHit {
    KnowledgeEntry entry;
    double score = 0;
    HitSource source = HitSource::vector;
};

class KnowledgeStore {
public:
    explicit KnowledgeStore(std::size_t dimension = 256) : dimension_(dimension) {
        if (dimension_ == 0) throw InvalidInputError("store dimension must be positive");
    }

    std::size_t dimension() const { return dimension_; }

    std::size_t size() const {
        std::shared_lock lock(mutex_);
        return entries_.size();
    }

    /// Insert or replace; an entry with the same (video_id, start_ts, end_ts)
    /// keeps its original slot so ranking tie-breaks stay stable.
    void upsert(const KnowledgeEntry& entry) {
        validate_entry(entry);
        std::unique_lock lock(mutex_);
        auto key = span_key(entry);
        auto it = span_index_.find(key);
        if (it != span_index_.end()) {
            entries_[it->second] = entry;
        } else {
            span_index_[key] = entries_.size();
            entries_.push_back(entry);
        }
        if (!log_path_.empty()) append_record(entry);
    }

    std::optional<KnowledgeEntry> get(const std::string& entry_id) const {
        std::shared_lock lock(mutex_);
        for (const auto& e : entries_) {
            if (e.entry_id == entry_id) return e;
        }
        return std::nullopt;
    }

    std::vector<KnowledgeEntry> entries_for_video(const std::string& video_id) const {
        std::shared_lock lock(mutex_);
        std::vector<KnowledgeEntry> out;
        for (const auto& e : entries_) {
            if (e.video_id == video_id) out.push_back(e);
        }
        return out;
    }

    std::vector<RetrievalHit> vector_search(const std::vector<float>& query_vec,
                                            const TimeFilter& filter, int k) const {
        if (k < 1) throw InvalidInputError("vector_search: k must be >= 1");
        if (query_vec.size() != dimension_) {
            throw InvalidInputError("vector_search: query dimension mismatch");
        }
        filter.validate();
        std::vector<float> q = normalized(query_vec);

        std::shared_lock lock(mutex_);
        std::vector<std::pair<double, std::size_t>> scored;
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            if (!passes(entries_[i], filter)) continue;
            double dot = 0;
            for (std::size_t d = 0; d < dimension_; ++d) {
                dot += static_cast<double>(q[d]) * entries_[i].embedding[d];
            }
            scored.emplace_back(dot, i);
        }
        rank(scored, k);
        std::vector<RetrievalHit> hits;
        for (const auto& [score, idx] : scored) {
            hits.push_back({entries_[idx], score, HitSource::vector});
        }
        return hits;
    }

    std::vector<RetrievalHit> keyword_search(const std::vector<std::string>& terms,
                                             const TimeFilter& filter, int k) const {
        if (terms.empty()) throw InvalidInputError("keyword_search: terms must be non-empty");
        if (k < 1) throw InvalidInputError("keyword_search: k must be >= 1");
        filter.validate();
        std::set<std::string> folded;
        for (const auto& t : terms) folded.insert(fold_case(t));

        std::shared_lock lock(mutex_);
        std::vector<std::pair<double, std::size_t>> scored;
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            if (!passes(entries_[i], filter)) continue;
            double count = 0;
            for (const auto& tok : tokenize_folded(entries_[i].caption_text)) {
                if (folded.count(tok)) count += 1;
            }
            if (count > 0) scored.emplace_back(count, i);
        }
        rank(scored, k);
        std::vector<RetrievalHit> hits;
        for (const auto& [score, idx] : scored) {
            hits.push_back({entries_[idx], score, HitSource::keyword});
        }
        return hits;
    }

    /// Union of vector top-k and keyword top-k, deduplicated by entry id and
    /// re-ranked by the sum of per-source max-normalized scores. Falls back to
    /// keyword-only when the embedder fails.
    std::vector<RetrievalHit> hybrid_search(const std::string& query_text,
                                            EmbeddingProvider& embedder, const TimeFilter& filter,
                                            int k, std::vector<std::string>* notices = nullptr) const {
        if (query_text.empty()) throw InvalidInputError("hybrid_search: empty query");
        std::vector<RetrievalHit> vec_hits;
        bool vector_ok = true;
        try {
            vec_hits = vector_search(embedder.embed(query_text), filter, k);
        } catch (const ProviderError& e) {
            vector_ok = false;
            if (notices) notices->push_back(std::string("embedder failed, keyword-only: ") + e.what());
        }
        std::vector<RetrievalHit> kw_hits;
        auto terms = tokenize_folded(query_text);
        if (!terms.empty()) {
            kw_hits = keyword_search(terms, filter, k);
        }
        if (!vector_ok) return kw_hits;

        double vmax = vec_hits.empty() ? 0 : std::max(vec_hits.front().score, 0.0);
        double kmax = kw_hits.empty() ? 0 : kw_hits.front().score;

        struct Fused {
            RetrievalHit hit;
            std::size_t order;  // insertion slot for the tie-break
        };
        std::map<std::string, Fused> fused;
        auto slot_of = [this](const std::string& entry_id) {
            std::shared_lock lock(mutex_);
            for (std::size_t i = 0; i < entries_.size(); ++i) {
                if (entries_[i].entry_id == entry_id) return i;
            }
            return entries_.size();
        };
        for (const auto& h : vec_hits) {
            double norm = vmax > 0 ? std::max(h.score, 0.0) / vmax : 0.0;
            fused.insert({h.entry.entry_id, {{h.entry, norm, HitSource::vector},
                                             slot_of(h.entry.entry_id)}});
        }
        for (const auto& h : kw_hits) {
            double norm = kmax > 0 ? h.score / kmax : 0.0;
            auto it = fused.find(h.entry.entry_id);
            if (it == fused.end()) {
                fused.insert({h.entry.entry_id, {{h.entry, norm, HitSource::keyword},
                                                 slot_of(h.entry.entry_id)}});
            } else {
                it->second.hit.score += norm;
                it->second.hit.source = HitSource::both;
            }
        }
        std::vector<Fused> flat;
        for (auto& [_, f] : fused) flat.push_back(std::move(f));
        std::sort(flat.begin(), flat.end(), [](const Fused& a, const Fused& b) {
            if (a.hit.score != b.hit.score) return a.hit.score > b.hit.score;
            return a.order < b.order;
        });
        std::vector<RetrievalHit> hits;
        for (auto& f : flat) hits.push_back(std::move(f.hit));
        return hits;
    }

    // -----------------------------------------------------------------------
    // Persistence: a directory with an append-only `entries.log` (one JSON
    // record per upsert; later records supersede earlier ones with the same
    // span) and a `meta` file with dimension and live count.
    // -----------------------------------------------------------------------

    void attach(const std::string& dir) {
        namespace fs = std::filesystem;
        fs::create_directories(dir);
        const std::string log = dir + "/entries.log";
        const std::string meta = dir + "/meta";
        if (fs::exists(meta)) {
            std::ifstream in(meta);
            nlohmann::json j;
            in >> j;
            std::size_t dim = j.at("dimension").get<std::size_t>();
            if (dim != dimension_) {
                throw InvalidInputError("store dimension mismatch: directory has " +
                                        std::to_string(dim));
            }
        }
        if (fs::exists(log)) {
            std::ifstream in(log);
            std::string line;
            while (std::getline(in, line)) {
                if (line.empty()) continue;
                KnowledgeEntry e = entry_from_json(nlohmann::json::parse(line));
                validate_entry(e);
                std::unique_lock lock(mutex_);
                auto key = span_key(e);
                auto it = span_index_.find(key);
                if (it != span_index_.end()) {
                    entries_[it->second] = std::move(e);
                } else {
                    span_index_[key] = entries_.size();
                    entries_.push_back(std::move(e));
                }
            }
        }
        log_path_ = log;
        meta_path_ = meta;
        write_meta();
    }

    /// Rewrite the log dropping superseded records.
    void compact() {
        std::unique_lock lock(mutex_);
        if (log_path_.empty()) return;
        std::ofstream out(log_path_, std::ios::trunc);
        for (const auto& e : entries_) out << entry_to_json(e).dump() << "\n";
        lock.unlock();
        write_meta();
    }

    static nlohmann::json entry_to_json(const KnowledgeEntry& e) {
        nlohmann::json j;
        j["entry_id"] = e.entry_id;
        j["video_id"] = e.video_id;
        j["start_ts"] = e.start_ts;
        j["end_ts"] = e.end_ts;
        j["caption_text"] = e.caption_text;
        j["embedding"] = e.embedding;
        return j;
    }

    static KnowledgeEntry entry_from_json(const nlohmann::json& j) {
        KnowledgeEntry e;
        e.entry_id = j.at("entry_id").get<std::string>();
        e.video_id = j.at("video_id").get<std::string>();
        e.start_ts = j.at("start_ts").get<double>();
        e.end_ts = j.at("end_ts").get<double>();
        e.caption_text = j.at("caption_text").get<std::string>();
        e.embedding = j.at("embedding").get<std::vector<float>>();
        return e;
    }

private:
    void validate_entry(const KnowledgeEntry& e) const {
        if (e.entry_id.empty()) throw InvalidInputError("entry_id required");
        if (!(e.start_ts < e.end_ts)) throw InvalidInputError("entry requires start_ts < end_ts");
        if (e.embedding.size() != dimension_) {
            throw InvalidInputError("embedding dimension mismatch: got " +
                                    std::to_string(e.embedding.size()) + ", store is " +
                                    std::to_string(dimension_));
        }
        double norm2 = 0;
        for (float v : e.embedding) norm2 += static_cast<double>(v) * v;
        if (std::abs(std::sqrt(norm2) - 1.0) > 1e-6) {
            throw InvalidInputError("embedding must be L2-normalized");
        }
    }

    static std::vector<float> normalized(const std::vector<float>& v) {
        double norm2 = 0;
        for (float x : v) norm2 += static_cast<double>(x) * x;
        if (norm2 == 0) throw InvalidInputError("zero query vector");
        double inv = 1.0 / std::sqrt(norm2);
        std::vector<float> out(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i] * inv);
        return out;
    }

    /// Overlap means positive-length intersection with the filter window.
    static bool passes(const KnowledgeEntry& e, const TimeFilter& f) {
        if (f.video_id && e.video_id != *f.video_id) return false;
        if (f.window) {
            double lo = std::max(e.start_ts, f.window->first);
            double hi = std::min(e.end_ts, f.window->second);
            if (!(lo < hi)) return false;
        }
        return true;
    }

    /// Order by score descending, insertion slot ascending; keep top k.
    static void rank(std::vector<std::pair<double, std::size_t>>& scored, int k) {
        std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second < b.second;
        });
        if (scored.size() > static_cast<std::size_t>(k)) {
            scored.resize(static_cast<std::size_t>(k));
        }
    }

    static std::string span_key(const KnowledgeEntry& e) {
        return e.video_id + "\x1f" + format_float(e.start_ts) + "\x1f" + format_float(e.end_ts);
    }

    void append_record(const KnowledgeEntry& e) {
        std::ofstream out(log_path_, std::ios::app);
        out << entry_to_json(e).dump() << "\n";
        write_meta_locked();
    }

    void write_meta() {
        std::shared_lock lock(mutex_);
        write_meta_locked();
    }

    void write_meta_locked() {
        if (meta_path_.empty()) return;
        std::ofstream out(meta_path_, std::ios::trunc);
        nlohmann::json j;
        j["dimension"] = dimension_;
        j["count"] = entries_.size();
        out << j.dump() << "\n";
    }

    std::size_t dimension_;
    std::vector<KnowledgeEntry> entries_;
    std::map<std::string, std::size_t> span_index_;
    std::string log_path_;
    std::string meta_path_;
    mutable std::shared_mutex mutex_;
};

}  // namespace vidrag

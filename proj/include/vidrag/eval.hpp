#pragma once

// Evaluation harness: the four question categories, timestamp/IoU scoring,
// choice scoring, and the benchmark runner with per-category and
// per-video-type reports. Two control answerers (frames+STT and
// retrieval-only) run against the same datasets as the full agent.

#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vidrag/common.hpp"
#include "vidrag/query_engine.hpp"

namespace vidrag {

// ---------------------------------------------------------------------------
// Temporal targets
// ---------------------------------------------------------------------------

struct TimeTarget {
    bool is_span = false;
    double lo = 0;
    double hi = 0;  // == lo for points

    static TimeTarget point(double t) { return {false, t, t}; }
    static TimeTarget span(double lo, double hi) { return {true, lo, hi}; }
};

/// Parses "HH:MM:SS", "MM:SS", bracketed spans "[a, b]", and comma-separated
/// lists of either. Unrecognized text is skipped.
inline std::vector<TimeTarget> parse_time_targets(const std::string& text) {
    std::vector<TimeTarget> targets;
    std::string work = text;
    static const std::regex span_re(R"(\[([^,\[\]]+),\s*([^\[\]]+)\])");
    for (std::smatch m; std::regex_search(work, m, span_re);) {
        auto lo = parse_timecode(m[1].str());
        auto hi = parse_timecode(m[2].str());
        if (lo && hi && *lo <= *hi) targets.push_back(TimeTarget::span(*lo, *hi));
        detail::mask_region(work, static_cast<std::size_t>(m.position(0)),
                            static_cast<std::size_t>(m.length(0)));
    }
    static const std::regex tc_re(R"((\d{1,2}:)?\d{1,2}:\d{2}(\.\d+)?)");
    for (std::smatch m; std::regex_search(work, m, tc_re);) {
        if (auto t = parse_timecode(m.str())) targets.push_back(TimeTarget::point(*t));
        detail::mask_region(work, static_cast<std::size_t>(m.position(0)),
                            static_cast<std::size_t>(m.length(0)));
    }
    return targets;
}

// ---------------------------------------------------------------------------
// Scoring rules
// ---------------------------------------------------------------------------

/// Temporal intersection over union. Two degenerate points compare by exact
/// match; spans must not be inverted.
inline double iou(const TimeTarget& a, const TimeTarget& b) {
    if (a.hi < a.lo || b.hi < b.lo) throw InvalidInputError("iou: inverted span");
    const bool a_point = a.hi == a.lo;
    const bool b_point = b.hi == b.lo;
    if (a_point && b_point) return a.lo == b.lo ? 1.0 : 0.0;
    double inter = std::min(a.hi, b.hi) - std::max(a.lo, b.lo);
    if (inter < 0) inter = 0;
    double uni = (a.hi - a.lo) + (b.hi - b.lo) - inter;
    return uni > 0 ? inter / uni : 0.0;
}

inline double iou(double a_lo, double a_hi, double b_lo, double b_hi) {
    return iou(TimeTarget{a_lo != a_hi, a_lo, a_hi}, TimeTarget{b_lo != b_hi, b_lo, b_hi});
}

struct ScoreOutcome {
    bool correct = false;
    std::string rule;
    std::string note;
};

inline constexpr double kTimestampToleranceS = 2.0;  // inclusive
inline constexpr double kSpanIouThreshold = 0.9;     // strict >
// A point can only stand in for a span within the tolerance on both ends.
inline constexpr double kPointInSpanMaxLenS = 4.0;

namespace detail {

inline bool target_matches(const TimeTarget& pred, const TimeTarget& truth, std::string& rule) {
    if (!truth.is_span) {
        if (!pred.is_span) {
            rule = "timestamp_tolerance";
            return std::abs(pred.lo - truth.lo) <= kTimestampToleranceS;
        }
        rule = "span_midpoint_vs_point";
        double mid = (pred.lo + pred.hi) / 2.0;
        return std::abs(mid - truth.lo) <= kTimestampToleranceS;
    }
    if (pred.is_span) {
        rule = "span_iou";
        return iou(pred, truth) > kSpanIouThreshold;
    }
    rule = "point_in_span";
    return truth.lo <= pred.lo && pred.lo <= truth.hi &&
           (truth.hi - truth.lo) <= kPointInSpanMaxLenS;
}

}  // namespace detail

/// Event-localization scoring. Multiple valid truth instants use any-match
/// semantics; a prediction listing several candidates is correct when any of
/// them matches any truth target. Unparseable predictions score incorrect.
inline ScoreOutcome score_localization(const std::string& predicted,
                                       const std::vector<TimeTarget>& truth) {
    if (truth.empty()) throw InvalidInputError("score_localization: no ground-truth targets");
    auto pred_targets = parse_time_targets(predicted);
    if (pred_targets.empty()) {
        return {false, "parse_failure", "no timestamp or span found in prediction"};
    }
    std::string first_rule;
    for (const auto& t : truth) {
        for (const auto& p : pred_targets) {
            std::string rule;
            bool match = detail::target_matches(p, t, rule);
            if (first_rule.empty()) first_rule = rule;
            if (match) return {true, rule, ""};
        }
    }
    return {false, first_rule, ""};
}

/// Choice scoring: standalone option-label tokens are extracted from the
/// prediction and compared to the truth labels by exact set equality.
inline ScoreOutcome score_choice(const std::string& predicted,
                                 const std::set<std::string>& truth_labels,
                                 const std::set<std::string>& option_labels) {
    if (option_labels.empty()) throw InvalidInputError("score_choice: options required");
    std::set<std::string> chosen;
    std::string folded = fold_case(predicted);
    for (std::size_t i = 0; i < folded.size(); ++i) {
        std::string tok(1, folded[i]);
        if (!option_labels.count(tok)) continue;
        bool left_ok = i == 0 || !std::isalnum(static_cast<unsigned char>(folded[i - 1]));
        bool right_ok =
            i + 1 == folded.size() || !std::isalnum(static_cast<unsigned char>(folded[i + 1]));
        if (left_ok && right_ok) chosen.insert(tok);
    }
    if (chosen.empty()) return {false, "choice_set_equality", "no option label in prediction"};
    return {chosen == truth_labels, "choice_set_equality", ""};
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

enum class QuestionCategory { reasoning, information_summary, event_localization, external_knowledge };

inline const char* to_string(QuestionCategory c) {
    switch (c) {
        case QuestionCategory::reasoning: return "reasoning";
        case QuestionCategory::information_summary: return "information_summary";
        case QuestionCategory::event_localization: return "event_localization";
        case QuestionCategory::external_knowledge: return "external_knowledge";
    }
    return "?";
}

inline std::optional<QuestionCategory> category_from_string(std::string_view s) {
    if (s == "reasoning") return QuestionCategory::reasoning;
    if (s == "information_summary") return QuestionCategory::information_summary;
    if (s == "event_localization") return QuestionCategory::event_localization;
    if (s == "external_knowledge") return QuestionCategory::external_knowledge;
    return std::nullopt;
}

struct EvalQuestion {
    std::string qid;
    std::string video_id;
    std::string video_type;  // vlog | episode_movie | variety | documentary
    QuestionCategory category = QuestionCategory::reasoning;
    std::string question;
    std::vector<std::pair<std::string, std::string>> options;  // label -> text, ordered
    std::string ground_truth;

    bool is_choice() const { return category != QuestionCategory::event_localization; }

    std::set<std::string> option_labels() const {
        std::set<std::string> out;
        for (const auto& [label, _] : options) out.insert(fold_case(label));
        return out;
    }

    std::set<std::string> truth_labels() const {
        std::set<std::string> out;
        std::istringstream in(ground_truth);
        std::string piece;
        while (std::getline(in, piece, ',')) {
            auto tokens = tokenize_folded(piece);
            for (const auto& t : tokens) {
                if (t.size() == 1) out.insert(t);
            }
        }
        return out;
    }

    void validate() const {
        if (qid.empty() || question.empty()) {
            throw InvalidInputError("eval question requires qid and question text");
        }
        if (is_choice()) {
            if (options.empty()) {
                throw InvalidInputError("choice question " + qid + " has no options");
            }
            if (truth_labels().empty()) {
                throw InvalidInputError("choice question " + qid + " has no truth labels");
            }
        } else if (parse_time_targets(ground_truth).empty()) {
            throw InvalidInputError("localization question " + qid + " has no truth targets");
        }
    }

    /// Question text with options rendered, as presented to every mode.
    std::string rendered() const {
        std::ostringstream out;
        out << question;
        for (const auto& [label, text] : options) {
            out << "\n" << label << ". " << text;
        }
        return out.str();
    }
};

inline EvalQuestion eval_question_from_json(const nlohmann::json& j) {
    EvalQuestion q;
    q.qid = j.at("qid").get<std::string>();
    q.video_id = j.value("video_id", std::string{});
    q.video_type = j.value("video_type", std::string{"unknown"});
    auto cat = category_from_string(j.at("category").get<std::string>());
    if (!cat) throw InvalidInputError("unknown category in question " + q.qid);
    q.category = *cat;
    q.question = j.at("question").get<std::string>();
    if (j.contains("options")) {
        // Object keys sort alphabetically, which is the display order.
        for (auto it = j["options"].begin(); it != j["options"].end(); ++it) {
            q.options.emplace_back(it.key(), it.value().get<std::string>());
        }
    }
    q.ground_truth = j.at("ground_truth").get<std::string>();
    q.validate();
    return q;
}

inline std::vector<EvalQuestion> load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InvalidInputError("cannot open dataset: " + path);
    std::vector<EvalQuestion> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        out.push_back(eval_question_from_json(nlohmann::json::parse(line)));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

struct QuestionRecord {
    std::string qid;
    std::string category;
    std::string video_type;
    std::string predicted;
    bool correct = false;
    std::string rule;
    std::string note;
};

struct Tally {
    int correct = 0;
    int total = 0;

    double accuracy() const { return total == 0 ? 0.0 : static_cast<double>(correct) / total; }
};

struct EvalReport {
    std::map<std::string, Tally> per_category;
    std::map<std::string, Tally> per_video_type;
    Tally total;
    std::vector<QuestionRecord> records;

    /// Aggregates must recompute exactly from the per-question records.
    void self_check() const {
        std::map<std::string, Tally> cat, vid;
        Tally tot;
        for (const auto& r : records) {
            cat[r.category].total++;
            vid[r.video_type].total++;
            tot.total++;
            if (r.correct) {
                cat[r.category].correct++;
                vid[r.video_type].correct++;
                tot.correct++;
            }
        }
        auto same = [](const std::map<std::string, Tally>& a,
                       const std::map<std::string, Tally>& b) {
            if (a.size() != b.size()) return false;
            for (const auto& [k, v] : a) {
                auto it = b.find(k);
                if (it == b.end() || it->second.correct != v.correct ||
                    it->second.total != v.total) {
                    return false;
                }
            }
            return true;
        };
        if (!same(cat, per_category) || !same(vid, per_video_type) ||
            tot.correct != total.correct || tot.total != total.total) {
            throw InternalError("eval report aggregates do not match records");
        }
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["legend"] = {
            {"timestamp_tolerance", "point truth: |predicted - truth| <= 2 s (inclusive)"},
            {"span_iou", "span truth: IoU(predicted, truth) > 0.9 (strict)"},
            {"span_midpoint_vs_point",
             "span prediction against a point truth scores by its midpoint"},
            {"point_in_span",
             "point prediction against a span truth: inside the span and span length <= 4 s"},
            {"choice_set_equality", "extracted option labels must equal the truth set exactly"},
            {"any_match", "multiple truth instants: any matching element scores correct"},
        };
        auto tally_json = [](const Tally& t) {
            return nlohmann::json{{"correct", t.correct}, {"total", t.total},
                                  {"accuracy", t.accuracy()}};
        };
        j["total"] = tally_json(total);
        j["per_category"] = nlohmann::json::object();
        for (const auto& [k, v] : per_category) j["per_category"][k] = tally_json(v);
        j["per_video_type"] = nlohmann::json::object();
        for (const auto& [k, v] : per_video_type) j["per_video_type"][k] = tally_json(v);
        nlohmann::json records_json = nlohmann::json::array();
        for (const auto& r : records) {
            records_json.push_back({{"qid", r.qid},
                                    {"category", r.category},
                                    {"video_type", r.video_type},
                                    {"predicted", r.predicted},
                                    {"correct", r.correct},
                                    {"rule", r.rule},
                                    {"note", r.note}});
        }
        j["records"] = std::move(records_json);
        return j;
    }
};

// ---------------------------------------------------------------------------
// Benchmark runner
// ---------------------------------------------------------------------------

struct AnswerOutput {
    std::string text;
    std::string trace_text;
};

using Answerer = std::function<AnswerOutput(const EvalQuestion&)>;

inline ScoreOutcome score_question(const EvalQuestion& q, const std::string& predicted) {
    if (q.is_choice()) {
        return score_choice(predicted, q.truth_labels(), q.option_labels());
    }
    auto outcome = score_localization(predicted, parse_time_targets(q.ground_truth));
    if (parse_time_targets(q.ground_truth).size() > 1 && outcome.correct) {
        outcome.rule += "+any_match";
    }
    return outcome;
}

/// Dispatches every question to the answerer and scores it by category rule.
/// Per-question failures are recorded, never fatal. Traces, when requested,
/// land one file per question under trace_dir.
inline EvalReport run_benchmark(const std::vector<EvalQuestion>& dataset, const Answerer& answerer,
                                const std::string& out_path = "",
                                const std::string& trace_dir = "") {
    EvalReport report;
    for (const auto& q : dataset) {
        QuestionRecord rec;
        rec.qid = q.qid;
        rec.category = to_string(q.category);
        rec.video_type = q.video_type;
        try {
            AnswerOutput out = answerer(q);
            rec.predicted = out.text;
            ScoreOutcome score = score_question(q, out.text);
            rec.correct = score.correct;
            rec.rule = score.rule;
            rec.note = score.note;
            if (!trace_dir.empty() && !out.trace_text.empty()) {
                std::ofstream tf(trace_dir + "/" + q.qid + ".trace");
                tf << out.trace_text;
            }
        } catch (const std::exception& e) {
            rec.correct = false;
            rec.rule = "answerer_failure";
            rec.note = e.what();
        }
        report.per_category[rec.category].total++;
        report.per_video_type[rec.video_type].total++;
        report.total.total++;
        if (rec.correct) {
            report.per_category[rec.category].correct++;
            report.per_video_type[rec.video_type].correct++;
            report.total.correct++;
        }
        report.records.push_back(std::move(rec));
    }
    report.self_check();
    if (!out_path.empty()) {
        std::ofstream out(out_path);
        if (!out) throw InvalidInputError("cannot write report: " + out_path);
        out << report.to_json().dump(2) << "\n";
    }
    return report;
}

inline EvalReport run_benchmark(const std::string& dataset_path, const Answerer& answerer,
                                const std::string& out_path = "",
                                const std::string& trace_dir = "") {
    return run_benchmark(load_dataset(dataset_path), answerer, out_path, trace_dir);
}

// ---------------------------------------------------------------------------
// Answerers: the full agent and the two control groups
// ---------------------------------------------------------------------------

inline Answerer make_omagent_answerer(QueryEngine& engine) {
    return [&engine](const EvalQuestion& q) {
        Query query;
        query.text = q.rendered();
        if (!q.video_id.empty()) query.video_id = q.video_id;
        FinalAnswer answer = engine.answer(query);
        return AnswerOutput{answer.text, answer.trace_text};
    };
}

inline ChatRequest build_frames_stt_request(const std::string& question,
                                            const std::vector<Frame>& frames,
                                            const std::vector<Utterance>& transcript) {
    ChatRequest req;
    req.contract = ResponseContract::free_text;
    req.messages.push_back(
        {"system",
         "Answer the question about a video from evenly sampled frames and the full speech "
         "transcript only."});
    std::ostringstream user;
    user << "Question: " << question << "\n";
    user << "Transcript:\n";
    for (const auto& u : transcript) {
        user << "- [" << format_timecode(u.t0) << " - " << format_timecode(u.t1) << "] "
             << u.speaker << ": " << u.text << "\n";
    }
    req.messages.push_back({"user", user.str()});
    for (const auto& f : frames) req.images.push_back(f.annotated_ref.value_or(f.image_ref));
    return req;
}

/// Control group (a): a fixed number of evenly sampled frames plus the whole
/// transcript in a single chat context. No retrieval, no decomposition.
inline Answerer make_frames_stt_answerer(const SourceStore& sources, ChatProvider& chat,
                                         int frame_budget = 20) {
    return [&sources, &chat, frame_budget](const EvalQuestion& q) {
        const VideoSource* source = sources.find(q.video_id);
        if (!source) throw InvalidInputError("video not ingested: " + q.video_id);
        auto sampled = sample_frames({0.0, source->duration}, source->frames, frame_budget);
        Trace trace(q.rendered(), q.video_id, "frames_stt");
        std::string text = chat.chat(
            build_frames_stt_request(q.rendered(), sampled.frames, source->transcript));
        trace.add("synthesized", 0, {{"frames", sampled.frames.size()}});
        return AnswerOutput{text, trace.serialize()};
    };
}

inline ChatRequest build_rag_answer_request(const std::string& question,
                                            const std::vector<RetrievalHit>& hits) {
    ChatRequest req;
    req.contract = ResponseContract::free_text;
    req.messages.push_back(
        {"system",
         "Answer the question from the retrieved scene captions only."});
    std::ostringstream user;
    user << "Question: " << question << "\n";
    user << "Context segments:\n";
    for (const auto& hit : hits) {
        user << "[" << format_timecode(hit.entry.start_ts) << " - "
             << format_timecode(hit.entry.end_ts) << "] " << hit.entry.video_id << "\n"
             << hit.entry.caption_text << "\n";
    }
    req.messages.push_back({"user", user.str()});
    return req;
}

/// Control group (b): ingestion-side retrieval feeding one chat answer, with
/// no decomposition loop and no tools.
inline Answerer make_video2rag_answerer(const KnowledgeStore& store, EmbeddingProvider& embedder,
                                        ChatProvider& chat, int k = 10, double pad_s = 5.0) {
    return [&store, &embedder, &chat, k, pad_s](const EvalQuestion& q) {
        std::string question = q.rendered();
        TimeFilter filter;
        if (auto extracted = extract_time_filter(question, nullptr, pad_s)) filter = *extracted;
        if (!q.video_id.empty()) filter.video_id = q.video_id;
        Trace trace(question, q.video_id, "video2rag");
        bool fallback = false;
        std::vector<std::string> notices;
        auto hits =
            retrieve_with_fallback(store, embedder, question, filter, k, &fallback, &notices);
        trace.add("retrieved", 0,
                  {{"hits", hits.size()}, {"fallback", fallback}, {"notices", notices}});
        std::string text = chat.chat(build_rag_answer_request(question, hits));
        trace.add("synthesized", 0, {{"findings", hits.size()}});
        return AnswerOutput{text, trace.serialize()};
    };
}

}  // namespace vidrag

#pragma once

// Ingestion pipeline: scene detection over frame features, uniform frame
// sampling, visual-prompt annotation, transcript assembly, six-field scene
// captioning, and encode+store into the knowledge store.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <future>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vidrag/common.hpp"
#include "vidrag/knowledge_store.hpp"
#include "vidrag/media.hpp"
#include "vidrag/providers.hpp"

namespace vidrag {

struct DetectionParams {
    double diff_threshold = 0.3;      // normalized L1 distance that opens a boundary
    double min_segment_seconds = 2.0; // shorter spans merge into their successor
    int frames_per_segment = 10;

    void validate() const {
        if (!(diff_threshold > 0 && diff_threshold < 1)) {
            throw InvalidInputError("diff_threshold must be in (0,1)");
        }
        if (!(min_segment_seconds > 0)) {
            throw InvalidInputError("min_segment_seconds must be positive");
        }
        if (frames_per_segment < 1) {
            throw InvalidInputError("frames_per_segment must be >= 1");
        }
    }
};

using TimeSpan = std::pair<double, double>;

enum class DegeneratePolicy { error, single_span };

// ---------------------------------------------------------------------------
// Scene detection
// ---------------------------------------------------------------------------

namespace detail {

/// Per-frame feature scaled to unit L1 mass; all-zero vectors stay zero.
inline std::vector<double> l1_normalized(const std::vector<double>& v) {
    double sum = 0;
    for (double x : v) sum += std::abs(x);
    std::vector<double> out(v.size(), 0.0);
    if (sum > 0) {
        for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / sum;
    }
    return out;
}

inline double frame_change(const std::vector<double>& a, const std::vector<double>& b) {
    auto na = l1_normalized(a);
    auto nb = l1_normalized(b);
    double d = 0;
    for (std::size_t i = 0; i < na.size(); ++i) d += std::abs(na[i] - nb[i]);
    return d;
}

}  // namespace detail

/// Contiguous, non-overlapping spans covering [first_ts, last_ts]. A boundary
/// opens between consecutive frames whose normalized feature distance exceeds
/// the threshold; then spans shorter than min_segment_seconds merge into their
/// successor, with a trailing short span merging backward.
inline std::vector<TimeSpan> detect_scenes(const std::vector<Frame>& frames,
                                           const DetectionParams& params,
                                           DegeneratePolicy degenerate = DegeneratePolicy::error) {
    params.validate();
    if (frames.size() < 2) {
        if (degenerate == DegeneratePolicy::single_span && frames.size() == 1) {
            return {{frames[0].timestamp, frames[0].timestamp}};
        }
        throw InvalidInputError("detect_scenes: need at least 2 frames");
    }
    const std::size_t feature_len = frames[0].feature.size();
    for (const auto& f : frames) {
        if (f.feature.size() != feature_len) {
            throw InvalidInputError("detect_scenes: inconsistent feature length");
        }
        for (double v : f.feature) {
            if (!std::isfinite(v)) throw InvalidInputError("detect_scenes: non-finite feature");
        }
    }

    std::vector<TimeSpan> spans;
    double span_start = frames.front().timestamp;
    for (std::size_t i = 1; i < frames.size(); ++i) {
        double change = detail::frame_change(frames[i - 1].feature, frames[i].feature);
        if (change > params.diff_threshold) {
            spans.push_back({span_start, frames[i].timestamp});
            span_start = frames[i].timestamp;
        }
    }
    spans.push_back({span_start, frames.back().timestamp});

    // Merge pass: left to right, carrying short spans forward; a trailing
    // short span extends the last kept span instead.
    std::vector<TimeSpan> merged;
    std::optional<double> carry_start;
    for (const auto& span : spans) {
        double start = carry_start.value_or(span.first);
        TimeSpan candidate{start, span.second};
        if (candidate.second - candidate.first < params.min_segment_seconds) {
            carry_start = candidate.first;
        } else {
            merged.push_back(candidate);
            carry_start.reset();
        }
    }
    if (carry_start) {
        if (merged.empty()) {
            merged.push_back({*carry_start, spans.back().second});  // sole short segment
        } else {
            merged.back().second = spans.back().second;
        }
    }
    return merged;
}

// ---------------------------------------------------------------------------
// Frame sampling
// ---------------------------------------------------------------------------

struct SampledFrames {
    std::vector<Frame> frames;
    bool undersampled = false;  // fewer than k frames were available
};

/// k frames nearest to interior uniform grid points (i + 0.5) / k across the
/// span, without duplication. With fewer than k frames in the span, all of
/// them come back flagged.
inline SampledFrames sample_frames(const TimeSpan& span, const std::vector<Frame>& frames, int k) {
    if (!(span.first <= span.second)) throw InvalidInputError("sample_frames: inverted span");
    if (k < 1) throw InvalidInputError("sample_frames: k must be >= 1");
    std::vector<const Frame*> candidates;
    for (const auto& f : frames) {
        if (f.timestamp >= span.first && f.timestamp <= span.second) candidates.push_back(&f);
    }
    SampledFrames out;
    if (candidates.size() <= static_cast<std::size_t>(k)) {
        for (const Frame* f : candidates) out.frames.push_back(*f);
        out.undersampled = candidates.size() < static_cast<std::size_t>(k);
        return out;
    }
    const double len = span.second - span.first;
    std::vector<bool> used(candidates.size(), false);
    std::vector<std::size_t> picks;
    for (int i = 0; i < k; ++i) {
        double grid = span.first + (i + 0.5) * len / k;
        std::size_t best = candidates.size();
        double best_dist = 0;
        for (std::size_t c = 0; c < candidates.size(); ++c) {
            if (used[c]) continue;
            double dist = std::abs(candidates[c]->timestamp - grid);
            if (best == candidates.size() || dist < best_dist) {
                best = c;
                best_dist = dist;
            }
        }
        used[best] = true;
        picks.push_back(best);
    }
    std::sort(picks.begin(), picks.end());
    for (std::size_t p : picks) out.frames.push_back(*candidates[p]);
    return out;
}

// ---------------------------------------------------------------------------
// Visual prompting
// ---------------------------------------------------------------------------

class AnnotationRenderer {
public:
    virtual ~AnnotationRenderer() = default;
    /// Returns a derived image reference, or nullopt when there is nothing to
    /// burn boxes into (feature-only frames).
    virtual std::optional<std::string> render(const Frame& frame,
                                              const std::vector<Annotation>& annotations) = 0;
};

/// Writes a sidecar record next to real image files; synthetic frame refs
/// carry their annotations as structured text into captioning instead.
class SidecarRenderer : public AnnotationRenderer {
public:
    std::optional<std::string> render(const Frame& frame,
                                      const std::vector<Annotation>& annotations) override {
        if (!std::filesystem::exists(frame.image_ref)) return std::nullopt;
        std::string derived = frame.image_ref + ".boxes.json";
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& a : annotations) arr.push_back(annotation_to_json(a));
        std::ofstream out(derived);
        out << arr.dump() << "\n";
        return derived;
    }
};

/// Populates frame annotations from the detector, dropping boxes that violate
/// the unit-square invariant. Detector failures leave the frame unannotated
/// and are reported as warnings.
inline std::vector<std::string> annotate_frames(std::vector<Frame>& frames,
                                                DetectorProvider* detector,
                                                AnnotationRenderer* renderer = nullptr) {
    std::vector<std::string> warnings;
    if (!detector) return warnings;
    for (auto& frame : frames) {
        std::vector<Annotation> detected;
        try {
            detected = detector->detect(frame.image_ref);
        } catch (const std::exception& e) {
            warnings.push_back("detector failed for " + frame.image_ref + ": " + e.what());
            continue;
        }
        for (auto& a : detected) {
            if (!a.valid()) {
                warnings.push_back("rejected annotation on " + frame.image_ref + " (label \"" +
                                   a.label + "\")");
                continue;
            }
            frame.annotations.push_back(std::move(a));
        }
        if (renderer && !frame.annotations.empty()) {
            frame.annotated_ref = renderer->render(frame, frame.annotations);
        }
    }
    return warnings;
}

// ---------------------------------------------------------------------------
// Transcript
// ---------------------------------------------------------------------------

struct TranscriptResult {
    std::vector<Utterance> utterances;
    std::vector<std::string> warnings;
};

inline TranscriptResult build_transcript(const std::string& audio_ref, AsrProvider* asr,
                                         DiarizationProvider* diarizer = nullptr) {
    TranscriptResult out;
    if (audio_ref.empty() || !asr) return out;
    try {
        out.utterances = asr->transcribe(audio_ref);
    } catch (const std::exception& e) {
        out.warnings.push_back(std::string("transcription failed: ") + e.what());
        return out;
    }
    if (diarizer) diarizer->assign_speakers(out.utterances);
    std::stable_sort(out.utterances.begin(), out.utterances.end(),
                     [](const Utterance& a, const Utterance& b) {
                         if (a.t0 != b.t0) return a.t0 < b.t0;
                         return a.speaker < b.speaker;
                     });
    return out;
}

// ---------------------------------------------------------------------------
// Scene captions
// ---------------------------------------------------------------------------

struct SceneCaption {
    std::string time_context;
    std::string location;
    std::string characters;
    std::vector<std::string> events_chronological;
    std::string scene_details;
    std::string summary;

    /// Fixed-order labeled rendering; embeddings are computed over this, so
    /// the format is frozen.
    std::string to_text() const {
        std::ostringstream out;
        out << "time: " << time_context << "\n";
        out << "location: " << location << "\n";
        out << "characters: " << characters << "\n";
        out << "events:\n";
        for (const auto& e : events_chronological) out << "- " << e << "\n";
        out << "details: " << scene_details << "\n";
        out << "summary: " << summary;
        return out.str();
    }

    bool operator==(const SceneCaption&) const = default;
};

struct Segment {
    std::string segment_id;
    double start_ts = 0;
    double end_ts = 0;
    std::string video_id;
    std::vector<Frame> sampled_frames;
    bool undersampled = false;
    std::vector<Utterance> transcript;
    std::optional<SceneCaption> caption;
};

inline const char* caption_instructions() {
    return
        "You describe one video segment from its sampled frames (with any box "
        "annotations listed as text) and its transcript lines.\n"
        "Report, as JSON with exactly these fields:\n"
        "  time_context: period of day, season, year, or on-screen time cues\n"
        "  location: where the events take place, with setting detail\n"
        "  characters: who is present, their names, relationships, and what they are doing\n"
        "  events_chronological: array listing every distinct event in time order\n"
        "  scene_details: fine-grained detail - on-screen text, expressions, object state\n"
        "  summary: an overall summary of the segment\n"
        "Write \"unknown\" for anything the segment does not show.";
}

inline ChatRequest build_caption_request(const Segment& segment) {
    ChatRequest req;
    req.contract = ResponseContract::structured_caption;
    req.messages.push_back({"system", caption_instructions()});
    std::ostringstream user;
    user << "Segment " << segment.video_id << " [" << format_timecode(segment.start_ts) << " - "
         << format_timecode(segment.end_ts) << "]\n";
    user << "Annotations:\n";
    for (const auto& f : segment.sampled_frames) {
        for (const auto& a : f.annotations) {
            user << "- " << format_timecode(f.timestamp) << " " << a.label << "\n";
        }
    }
    user << "Transcript:\n";
    for (const auto& u : segment.transcript) {
        user << "- [" << format_timecode(u.t0) << " - " << format_timecode(u.t1) << "] "
             << u.speaker << ": " << u.text << "\n";
    }
    req.messages.push_back({"user", user.str()});
    for (const auto& f : segment.sampled_frames) {
        req.images.push_back(f.annotated_ref.value_or(f.image_ref));
    }
    return req;
}

struct CaptionResult {
    SceneCaption caption;
    std::vector<std::string> warnings;
};

inline CaptionResult caption_segment(const Segment& segment, ChatProvider& mllm) {
    if (segment.sampled_frames.empty()) {
        throw InvalidInputError("caption_segment: segment has no sampled frames");
    }
    CaptionResult out;
    std::string response;
    try {
        response = mllm.chat(build_caption_request(segment));
    } catch (const ProviderError& e) {
        if (e.kind() != ProviderErrorKind::contract_violation) throw;
        out.caption.time_context = "unknown";
        out.caption.location = "unknown";
        out.caption.characters = "unknown";
        out.caption.scene_details = "unknown";
        out.caption.summary = e.raw();
        out.warnings.push_back("caption response unparseable; raw text kept in summary");
        return out;
    }
    auto j = try_parse_json_object(response);
    if (!j) {
        out.caption.time_context = "unknown";
        out.caption.location = "unknown";
        out.caption.characters = "unknown";
        out.caption.scene_details = "unknown";
        out.caption.summary = response;
        out.warnings.push_back("caption response unparseable; raw text kept in summary");
        return out;
    }
    auto field = [&](const char* name) {
        return j->contains(name) && (*j)[name].is_string() ? (*j)[name].get<std::string>()
                                                           : std::string("unknown");
    };
    out.caption.time_context = field("time_context");
    out.caption.location = field("location");
    out.caption.characters = field("characters");
    out.caption.scene_details = field("scene_details");
    out.caption.summary = field("summary");
    if (j->contains("events_chronological") && (*j)["events_chronological"].is_array()) {
        for (const auto& e : (*j)["events_chronological"]) {
            out.caption.events_chronological.push_back(e.get<std::string>());
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Full ingest
// ---------------------------------------------------------------------------

struct IngestProviders {
    ChatProvider* mllm = nullptr;        // required
    EmbeddingProvider* embedder = nullptr;  // required
    DetectorProvider* detector = nullptr;
    AsrProvider* asr = nullptr;
    DiarizationProvider* diarizer = nullptr;
    AnnotationRenderer* renderer = nullptr;
    int caption_concurrency = 1;
};

struct SegmentOutcome {
    std::string segment_id;
    double start_ts = 0;
    double end_ts = 0;
    bool ok = false;
    std::string error;
    std::vector<std::string> warnings;
};

struct IngestReport {
    std::vector<SegmentOutcome> outcomes;
    std::vector<KnowledgeEntry> entries;

    std::size_t failures() const {
        std::size_t n = 0;
        for (const auto& o : outcomes) {
            if (!o.ok) ++n;
        }
        return n;
    }
};

inline std::string segment_entry_id(const std::string& video_id, const TimeSpan& span) {
    return video_id + "#" + format_timecode(span.first) + "-" + format_timecode(span.second);
}

/// detect -> sample -> annotate -> transcript slice -> caption -> embed ->
/// upsert. A failing stage aborts only its own segment. Idempotent per
/// (video_id, span) through the store's replace-on-upsert semantics.
inline IngestReport ingest(const VideoSource& source, const DetectionParams& params,
                           const IngestProviders& providers, KnowledgeStore& store) {
    source.validate();
    params.validate();
    if (!providers.mllm) throw InvalidInputError("ingest: chat provider required");
    if (!providers.embedder) throw InvalidInputError("ingest: embedding provider required");

    auto transcript = build_transcript(source.audio_ref, providers.asr, providers.diarizer);
    std::vector<Utterance> utterances =
        transcript.utterances.empty() ? source.transcript : transcript.utterances;

    auto spans = detect_scenes(source.frames, params);

    // Assemble segments sequentially (detection is a scan); caption them with
    // bounded concurrency; store sequentially so the writer stays single.
    std::vector<Segment> segments;
    IngestReport report;
    for (const auto& span : spans) {
        Segment seg;
        seg.segment_id = segment_entry_id(source.video_id, span);
        seg.video_id = source.video_id;
        seg.start_ts = span.first;
        seg.end_ts = span.second;
        SegmentOutcome outcome;
        outcome.segment_id = seg.segment_id;
        outcome.start_ts = span.first;
        outcome.end_ts = span.second;
        auto sampled = sample_frames(span, source.frames, params.frames_per_segment);
        seg.sampled_frames = std::move(sampled.frames);
        seg.undersampled = sampled.undersampled;
        if (seg.undersampled) outcome.warnings.push_back("fewer frames than requested in span");
        auto ann_warnings = annotate_frames(seg.sampled_frames, providers.detector,
                                            providers.renderer);
        outcome.warnings.insert(outcome.warnings.end(), ann_warnings.begin(), ann_warnings.end());
        for (const auto& u : utterances) {
            if (u.t0 <= seg.end_ts && u.t1 >= seg.start_ts) seg.transcript.push_back(u);
        }
        segments.push_back(std::move(seg));
        report.outcomes.push_back(std::move(outcome));
    }
    report.outcomes.front().warnings.insert(report.outcomes.front().warnings.end(),
                                            transcript.warnings.begin(),
                                            transcript.warnings.end());

    const int workers = std::max(1, providers.caption_concurrency);
    std::vector<std::optional<CaptionResult>> captions(segments.size());
    std::vector<std::string> caption_errors(segments.size());
    for (std::size_t base = 0; base < segments.size(); base += static_cast<std::size_t>(workers)) {
        std::size_t batch_end = std::min(segments.size(), base + static_cast<std::size_t>(workers));
        std::vector<std::future<void>> futures;
        for (std::size_t i = base; i < batch_end; ++i) {
            futures.push_back(std::async(std::launch::async, [&, i] {
                try {
                    captions[i] = caption_segment(segments[i], *providers.mllm);
                } catch (const std::exception& e) {
                    caption_errors[i] = e.what();
                }
            }));
        }
        for (auto& f : futures) f.get();
    }

    for (std::size_t i = 0; i < segments.size(); ++i) {
        SegmentOutcome& outcome = report.outcomes[i];
        if (!captions[i]) {
            outcome.ok = false;
            outcome.error = caption_errors[i];
            continue;
        }
        outcome.warnings.insert(outcome.warnings.end(), captions[i]->warnings.begin(),
                                captions[i]->warnings.end());
        segments[i].caption = captions[i]->caption;
        try {
            KnowledgeEntry entry;
            entry.entry_id = segments[i].segment_id;
            entry.video_id = source.video_id;
            entry.start_ts = segments[i].start_ts;
            entry.end_ts = segments[i].end_ts;
            entry.caption_text = segments[i].caption->to_text();
            entry.embedding = providers.embedder->embed(entry.caption_text);
            store.upsert(entry);
            report.entries.push_back(std::move(entry));
            outcome.ok = true;
        } catch (const std::exception& e) {
            outcome.ok = false;
            outcome.error = e.what();
        }
    }
    return report;
}

}  // namespace vidrag

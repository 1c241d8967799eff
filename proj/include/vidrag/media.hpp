#pragma once

// Video-side data types and the ingest manifest format. Video decoding stays
// out of process: an extractor produces a manifest (frame timestamps plus
// either feature vectors or image paths) and everything here consumes that.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "vidrag/common.hpp"

namespace vidrag {

struct Box {
    double x = 0, y = 0, w = 0, h = 0;

    bool within_unit_square() const {
        return x >= 0 && y >= 0 && w >= 0 && h >= 0 && x + w <= 1.0 && y + h <= 1.0;
    }
    bool operator==(const Box&) const = default;
};

struct Annotation {
    Box box;
    std::string label;
    std::string source;  // provider name

    bool valid() const { return box.within_unit_square() && !label.empty(); }
    bool operator==(const Annotation&) const = default;
};

struct Frame {
    double timestamp = 0;
    std::vector<double> feature;  // empty when only image bytes exist
    std::string image_ref;        // always set; synthetic "<video>@<timecode>" when no file
    std::vector<Annotation> annotations;
    std::optional<std::string> annotated_ref;  // derived image with burned-in boxes
};

struct Utterance {
    std::string speaker;
    std::string text;
    double t0 = 0;
    double t1 = 0;

    bool operator==(const Utterance&) const = default;
};

struct VideoMetadata {
    std::string title;
    std::string type;  // vlog | episode_movie | variety | documentary
};

struct VideoSource {
    std::string video_id;
    double duration = 0;
    std::vector<Frame> frames;  // strictly increasing timestamps within [0, duration]
    std::vector<Utterance> transcript;
    std::map<std::string, std::vector<Annotation>> annotation_truth;  // frame ref -> boxes
    std::string audio_ref;
    VideoMetadata metadata;

    void validate() const {
        if (video_id.empty()) throw InvalidInputError("manifest: video_id required");
        if (!(duration > 0)) throw InvalidInputError("manifest: duration must be positive");
        double prev = -1;
        std::size_t feature_len = 0;
        for (const auto& f : frames) {
            if (!(f.timestamp >= 0) || f.timestamp > duration) {
                throw InvalidInputError("manifest: frame timestamp outside [0, duration]");
            }
            if (f.timestamp <= prev) {
                throw InvalidInputError("manifest: frame timestamps must strictly increase");
            }
            prev = f.timestamp;
            if (!f.feature.empty()) {
                if (feature_len == 0) feature_len = f.feature.size();
                if (f.feature.size() != feature_len) {
                    throw InvalidInputError("manifest: feature length must be constant");
                }
                for (double v : f.feature) {
                    if (!std::isfinite(v)) throw InvalidInputError("manifest: non-finite feature");
                }
            }
        }
        for (const auto& u : transcript) {
            if (u.t1 < u.t0) throw InvalidInputError("manifest: utterance with t1 < t0");
        }
    }

    /// Utterances overlapping [t0, t1] (closed intervals), ordered by start
    /// time with ties broken by speaker label.
    std::vector<Utterance> transcript_slice(double t0, double t1) const {
        std::vector<Utterance> out;
        for (const auto& u : transcript) {
            if (u.t0 <= t1 && u.t1 >= t0) out.push_back(u);
        }
        std::stable_sort(out.begin(), out.end(), [](const Utterance& a, const Utterance& b) {
            if (a.t0 != b.t0) return a.t0 < b.t0;
            return a.speaker < b.speaker;
        });
        return out;
    }

    const Frame* frame_by_ref(const std::string& ref) const {
        for (const auto& f : frames) {
            if (f.image_ref == ref) return &f;
        }
        return nullptr;
    }
};

inline std::string synthetic_frame_ref(const std::string& video_id, double ts) {
    return video_id + "@" + format_timecode(ts);
}

// ---------------------------------------------------------------------------
// Manifest IO
// ---------------------------------------------------------------------------

inline nlohmann::json annotation_to_json(const Annotation& a) {
    return {{"x", a.box.x}, {"y", a.box.y}, {"w", a.box.w}, {"h", a.box.h},
            {"label", a.label}, {"source", a.source}};
}

inline Annotation annotation_from_json(const nlohmann::json& j) {
    Annotation a;
    a.box = {j.at("x").get<double>(), j.at("y").get<double>(), j.at("w").get<double>(),
             j.at("h").get<double>()};
    a.label = j.at("label").get<std::string>();
    a.source = j.value("source", std::string{});
    return a;
}

inline VideoSource manifest_from_json(const nlohmann::json& j) {
    VideoSource src;
    src.video_id = j.at("video_id").get<std::string>();
    src.duration = j.at("duration").get<double>();
    if (j.contains("metadata")) {
        src.metadata.title = j["metadata"].value("title", std::string{});
        src.metadata.type = j["metadata"].value("type", std::string{});
    }
    src.audio_ref = j.value("audio_ref", std::string{});
    for (const auto& fj : j.value("frames", nlohmann::json::array())) {
        Frame f;
        f.timestamp = fj.at("ts").get<double>();
        if (fj.contains("feature")) f.feature = fj["feature"].get<std::vector<double>>();
        if (fj.contains("image")) {
            f.image_ref = fj["image"].get<std::string>();
        } else {
            f.image_ref = synthetic_frame_ref(src.video_id, f.timestamp);
        }
        src.frames.push_back(std::move(f));
    }
    for (const auto& uj : j.value("transcript", nlohmann::json::array())) {
        Utterance u;
        u.t0 = uj.at("t0").get<double>();
        u.t1 = uj.at("t1").get<double>();
        u.speaker = uj.value("speaker", std::string{"speaker"});
        u.text = uj.at("text").get<std::string>();
        src.transcript.push_back(std::move(u));
    }
    if (j.contains("annotations")) {
        for (auto it = j["annotations"].begin(); it != j["annotations"].end(); ++it) {
            std::vector<Annotation> boxes;
            for (const auto& aj : it.value()) boxes.push_back(annotation_from_json(aj));
            src.annotation_truth[it.key()] = std::move(boxes);
        }
    }
    src.validate();
    return src;
}

inline nlohmann::json manifest_to_json(const VideoSource& src) {
    nlohmann::json j;
    j["video_id"] = src.video_id;
    j["duration"] = src.duration;
    j["metadata"] = {{"title", src.metadata.title}, {"type", src.metadata.type}};
    if (!src.audio_ref.empty()) j["audio_ref"] = src.audio_ref;
    nlohmann::json frames = nlohmann::json::array();
    for (const auto& f : src.frames) {
        nlohmann::json fj;
        fj["ts"] = f.timestamp;
        if (!f.feature.empty()) fj["feature"] = f.feature;
        if (f.image_ref != synthetic_frame_ref(src.video_id, f.timestamp)) {
            fj["image"] = f.image_ref;
        }
        frames.push_back(std::move(fj));
    }
    j["frames"] = std::move(frames);
    nlohmann::json transcript = nlohmann::json::array();
    for (const auto& u : src.transcript) {
        transcript.push_back({{"t0", u.t0}, {"t1", u.t1}, {"speaker", u.speaker}, {"text", u.text}});
    }
    j["transcript"] = std::move(transcript);
    if (!src.annotation_truth.empty()) {
        nlohmann::json ann = nlohmann::json::object();
        for (const auto& [ref, boxes] : src.annotation_truth) {
            nlohmann::json arr = nlohmann::json::array();
            for (const auto& b : boxes) arr.push_back(annotation_to_json(b));
            ann[ref] = std::move(arr);
        }
        j["annotations"] = std::move(ann);
    }
    return j;
}

inline VideoSource load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InvalidInputError("cannot open manifest: " + path);
    nlohmann::json j;
    in >> j;
    return manifest_from_json(j);
}

inline void save_manifest(const VideoSource& src, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw InvalidInputError("cannot write manifest: " + path);
    out << manifest_to_json(src).dump(2) << "\n";
}

/// Registry of ingested video sources; the rewinder re-reads original frames
/// through this, so it must outlive query execution.
class SourceStore {
public:
    void add(VideoSource src) {
        src.validate();
        sources_[src.video_id] = std::move(src);
    }

    void register_manifest(const std::string& path) { add(load_manifest(path)); }

    const VideoSource* find(const std::string& video_id) const {
        auto it = sources_.find(video_id);
        return it == sources_.end() ? nullptr : &it->second;
    }

    std::vector<std::string> video_ids() const {
        std::vector<std::string> ids;
        for (const auto& [id, _] : sources_) ids.push_back(id);
        return ids;
    }

private:
    std::map<std::string, VideoSource> sources_;
};

}  // namespace vidrag

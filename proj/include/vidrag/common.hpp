#pragma once

// Shared primitives: error types, timecode parsing/formatting, hashing and
// tokenization helpers used across the library.

#include <cctype>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace vidrag {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

/// Caller violated a documented precondition.
class InvalidInputError : public std::invalid_argument {
public:
    explicit InvalidInputError(const std::string& what) : std::invalid_argument(what) {}
};

/// An operation was applied to an object in the wrong state.
class StateTransitionError : public std::logic_error {
public:
    explicit StateTransitionError(const std::string& what) : std::logic_error(what) {}
};

/// A structural invariant broke; indicates a bug, not bad input.
class InternalError : public std::logic_error {
public:
    explicit InternalError(const std::string& what) : std::logic_error(what) {}
};

// ---------------------------------------------------------------------------
// Timecodes
//
// Canonical rendering is HH:MM:SS with an optional .fff millisecond suffix.
// MM:SS is accepted on input. Strict parsing rejects out-of-range fields;
// lenient parsing carries them over (e.g. "99:99" -> 99 min 99 s = 6039 s).
// ---------------------------------------------------------------------------

inline std::string format_timecode(double seconds) {
    if (seconds < 0 || !std::isfinite(seconds)) {
        throw InvalidInputError("format_timecode: negative or non-finite seconds");
    }
    auto total_ms = static_cast<std::int64_t>(std::llround(seconds * 1000.0));
    std::int64_t ms = total_ms % 1000;
    std::int64_t s = total_ms / 1000;
    std::int64_t hh = s / 3600;
    std::int64_t mm = (s % 3600) / 60;
    std::int64_t ss = s % 60;
    char buf[32];
    if (ms != 0) {
        std::snprintf(buf, sizeof(buf), "%02lld:%02lld:%02lld.%03lld",
                      static_cast<long long>(hh), static_cast<long long>(mm),
                      static_cast<long long>(ss), static_cast<long long>(ms));
    } else {
        std::snprintf(buf, sizeof(buf), "%02lld:%02lld:%02lld",
                      static_cast<long long>(hh), static_cast<long long>(mm),
                      static_cast<long long>(ss));
    }
    return buf;
}

namespace detail {

inline bool split_timecode_fields(std::string_view text, std::vector<double>& fields) {
    fields.clear();
    std::size_t pos = 0;
    while (pos <= text.size()) {
        std::size_t colon = text.find(':', pos);
        std::string_view part =
            colon == std::string_view::npos ? text.substr(pos) : text.substr(pos, colon - pos);
        if (part.empty()) return false;
        double value = 0;
        double frac_scale = 0;
        bool seen_digit = false;
        for (char c : part) {
            if (c == '.') {
                if (frac_scale != 0) return false;
                frac_scale = 0.1;
            } else if (c >= '0' && c <= '9') {
                seen_digit = true;
                if (frac_scale == 0) {
                    value = value * 10 + (c - '0');
                } else {
                    value += (c - '0') * frac_scale;
                    frac_scale /= 10;
                }
            } else {
                return false;
            }
        }
        if (!seen_digit) return false;
        fields.push_back(value);
        if (colon == std::string_view::npos) break;
        pos = colon + 1;
    }
    return fields.size() >= 2 && fields.size() <= 3;
}

}  // namespace detail

/// Parse "HH:MM:SS(.fff)" or "MM:SS(.fff)". Strict mode requires seconds < 60
/// (and minutes < 60 in the three-field form); lenient mode carries overflow.
inline std::optional<double> parse_timecode(std::string_view text, bool lenient = false) {
    std::vector<double> fields;
    if (!detail::split_timecode_fields(text, fields)) return std::nullopt;
    double hours = 0, minutes = 0, seconds = 0;
    if (fields.size() == 3) {
        hours = fields[0];
        minutes = fields[1];
        seconds = fields[2];
        if (!lenient && (minutes >= 60 || seconds >= 60)) return std::nullopt;
    } else {
        minutes = fields[0];
        seconds = fields[1];
        if (!lenient && seconds >= 60) return std::nullopt;
    }
    return hours * 3600 + minutes * 60 + seconds;
}

// ---------------------------------------------------------------------------
// Hashing / text
// ---------------------------------------------------------------------------

inline std::uint64_t fnv1a64(std::string_view data, std::uint64_t seed = 0xcbf29ce484222325ULL) {
    std::uint64_t h = seed;
    for (unsigned char c : data) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string to_hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

inline std::string fold_case(std::string_view s) {
    std::string out;
    out.reserve(s.size());
    for (char c : s) out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    return out;
}

/// Whitespace tokenization with case folding; leading/trailing punctuation is
/// trimmed from each token so "Logan." matches the term "logan".
inline std::vector<std::string> tokenize_folded(std::string_view text) {
    std::vector<std::string> tokens;
    std::size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
        std::size_t start = i;
        while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
        if (i > start) {
            std::size_t lo = start, hi = i;
            while (lo < hi && std::ispunct(static_cast<unsigned char>(text[lo]))) ++lo;
            while (hi > lo && std::ispunct(static_cast<unsigned char>(text[hi - 1]))) --hi;
            if (hi > lo) tokens.push_back(fold_case(text.substr(lo, hi - lo)));
        }
    }
    return tokens;
}

/// Fixed float rendering for digest material; %.9g is compact and stable.
inline std::string format_float(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

}  // namespace vidrag

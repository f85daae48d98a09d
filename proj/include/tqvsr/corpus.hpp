#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "tqvsr/types.hpp"

namespace tqvsr::corpus {

// 1.5-second sub-unit of a segment. Clip index is the position in the
// owning segment's clip vector; clips are contiguous from 0 by construction.
struct Clip {
    std::vector<float> appearance;   // dim D_v
    std::vector<float> transcript;   // dim D_t; all zero when has_transcript is false
    bool has_transcript = true;

    bool operator==(const Clip&) const = default;
};

struct VideoSegment {
    std::string segment_id;
    std::string video_id;
    std::string scenario;
    double start_s = 0.0;
    double end_s = 0.0;
    std::vector<Clip> clips;

    double duration_s() const { return end_s - start_s; }
    bool operator==(const VideoSegment&) const = default;
};

struct Video {
    std::string video_id;
    std::string scenario;
    std::vector<VideoSegment> segments;

    bool operator==(const Video&) const = default;
};

struct Region {
    std::vector<float> feature;                                  // dim D_v
    std::optional<std::pair<size_t, size_t>> aligned_token_span; // [start, end) over text tokens

    bool operator==(const Region&) const = default;
};

struct MultimodalQuestion {
    std::string question_id;
    FloatMatrix text_tokens;           // l_q x D_t
    std::vector<Region> regions;       // region 0 is the whole query image
    QueryType query_type = QueryType::Text;
    std::string scenario;
    // Answer segment ids; deduplicated and unordered. Multiple answers per
    // question are first class (the source corpora average about 1.03).
    std::set<std::string> answers;

    bool operator==(const MultimodalQuestion&) const = default;
};

struct FeatureDims {
    size_t visual = 0;
    size_t text = 0;
    bool operator==(const FeatureDims&) const = default;
};

struct Splits {
    std::vector<std::string> train;
    std::vector<std::string> val;
    std::vector<std::string> test;

    bool operator==(const Splits&) const = default;
};

struct SegmentCorpus {
    FeatureDims dims;
    std::vector<Video> videos;
    std::vector<MultimodalQuestion> questions;
    Splits splits;
    // Recomputed on load: scenarios of val/test questions absent from train.
    std::set<std::string> unseen_scenarios;

    const VideoSegment* find_segment(const std::string& segment_id) const;
    const Video* find_video(const std::string& video_id) const;
    const MultimodalQuestion* find_question(const std::string& question_id) const;
    // Split of a question = split of the video holding its first answer.
    std::string split_of_video(const std::string& video_id) const;
    std::string split_of_question(const MultimodalQuestion& q) const;
    std::vector<const VideoSegment*> segments_in_split(const std::string& split) const;
    std::vector<const MultimodalQuestion*> questions_in_split(const std::string& split) const;
    size_t total_segments() const;

    bool operator==(const SegmentCorpus&) const = default;
};

class CorpusError : public std::runtime_error {
public:
    enum class Kind {
        MissingFile,
        DimMismatch,
        DanglingAnswer,
        SplitOverlap,
        Invariant,
        Parse,
    };

    CorpusError(Kind kind, std::string offending_id, const std::string& message)
        : std::runtime_error(message), kind_(kind), offending_id_(std::move(offending_id)) {}

    Kind kind() const { return kind_; }
    const std::string& offending_id() const { return offending_id_; }

private:
    Kind kind_;
    std::string offending_id_;
};

// Loads manifest.json plus all referenced feature files and checks every
// structural invariant. Throws CorpusError with the offending id on failure.
SegmentCorpus load_corpus(const std::filesystem::path& manifest_path);

// Writes manifest + feature files so that load_corpus(save_corpus(c)) is
// bit-identical to c. Returns the manifest path.
std::filesystem::path save_corpus(const SegmentCorpus& corpus, const std::filesystem::path& dir);

// Checks invariants of an in-memory corpus (same checks load_corpus runs).
void validate_corpus(const SegmentCorpus& corpus);

struct SegmentationWarning {
    std::string segment_id;
    double duration_s;
    std::string message;
};

// Soft duration screen: one warning per segment outside [30, 120] s.
std::vector<SegmentationWarning> validate_segmentation(const SegmentCorpus& corpus);

struct SplitFractions {
    double train = 0.8;
    double val = 0.1;
    double test = 0.1;
};

struct SplitAssignment {
    Splits splits;
    std::set<std::string> unseen_scenarios;
    // Per split ("train"/"val"/"test"): question count per query type.
    std::map<std::string, std::map<QueryType, size_t>> type_histogram;
};

// Assigns whole videos to splits. Sizes: floor(train), floor(val), remainder
// to test. Deterministic under seed. Reports (does not optimize) the
// resulting unseen-scenario set and per-split query-type histograms.
SplitAssignment split_by_video(const SegmentCorpus& corpus, const SplitFractions& fractions,
                               uint64_t seed);

// Derives unseen_scenarios from question scenarios given split membership.
std::set<std::string> compute_unseen_scenarios(const SegmentCorpus& corpus, const Splits& splits);

}  // namespace tqvsr::corpus

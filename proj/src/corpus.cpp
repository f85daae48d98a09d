#include "tqvsr/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "tqvsr/io.hpp"
#include "tqvsr/rng.hpp"

namespace tqvsr::corpus {

using ordered_json = nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

constexpr int kManifestVersion = 1;
constexpr double kMinSegmentS = 30.0;
constexpr double kMaxSegmentS = 120.0;

[[noreturn]] void invariant_error(const std::string& id, const std::string& msg) {
    throw CorpusError(CorpusError::Kind::Invariant, id, msg);
}

bool all_zero(const std::vector<float>& v) {
    return std::all_of(v.begin(), v.end(), [](float x) { return x == 0.0f; });
}

FloatMatrix load_rows(const fs::path& base, const std::string& ref, size_t expect_rows,
                      size_t expect_cols, const std::string& owner_id) {
    const fs::path p = base / ref;
    if (!fs::exists(p)) {
        throw CorpusError(CorpusError::Kind::MissingFile, owner_id,
                          "missing feature file '" + p.string() + "' referenced by " + owner_id);
    }
    FloatMatrix m = io::read_feature_file(p);
    if (m.cols != expect_cols || m.rows != expect_rows) {
        std::ostringstream os;
        os << "feature dim mismatch for " << owner_id << ": '" << ref << "' is " << m.rows << "x"
           << m.cols << ", expected " << expect_rows << "x" << expect_cols;
        throw CorpusError(CorpusError::Kind::DimMismatch, owner_id, os.str());
    }
    return m;
}

}  // namespace

const VideoSegment* SegmentCorpus::find_segment(const std::string& segment_id) const {
    for (const auto& v : videos)
        for (const auto& s : v.segments)
            if (s.segment_id == segment_id) return &s;
    return nullptr;
}

const Video* SegmentCorpus::find_video(const std::string& video_id) const {
    for (const auto& v : videos)
        if (v.video_id == video_id) return &v;
    return nullptr;
}

const MultimodalQuestion* SegmentCorpus::find_question(const std::string& question_id) const {
    for (const auto& q : questions)
        if (q.question_id == question_id) return &q;
    return nullptr;
}

std::string SegmentCorpus::split_of_video(const std::string& video_id) const {
    auto in = [&](const std::vector<std::string>& ids) {
        return std::find(ids.begin(), ids.end(), video_id) != ids.end();
    };
    if (in(splits.train)) return "train";
    if (in(splits.val)) return "val";
    if (in(splits.test)) return "test";
    return "";
}

std::string SegmentCorpus::split_of_question(const MultimodalQuestion& q) const {
    if (q.answers.empty()) return "";
    const VideoSegment* seg = find_segment(*q.answers.begin());
    if (!seg) return "";
    return split_of_video(seg->video_id);
}

std::vector<const VideoSegment*> SegmentCorpus::segments_in_split(const std::string& split) const {
    std::vector<const VideoSegment*> out;
    for (const auto& v : videos) {
        if (split_of_video(v.video_id) != split) continue;
        for (const auto& s : v.segments) out.push_back(&s);
    }
    return out;
}

std::vector<const MultimodalQuestion*> SegmentCorpus::questions_in_split(
    const std::string& split) const {
    std::vector<const MultimodalQuestion*> out;
    for (const auto& q : questions)
        if (split_of_question(q) == split) out.push_back(&q);
    return out;
}

size_t SegmentCorpus::total_segments() const {
    size_t n = 0;
    for (const auto& v : videos) n += v.segments.size();
    return n;
}

void validate_corpus(const SegmentCorpus& corpus) {
    std::unordered_set<std::string> video_ids;
    std::unordered_set<std::string> segment_ids;

    for (const auto& video : corpus.videos) {
        if (!video_ids.insert(video.video_id).second)
            invariant_error(video.video_id, "duplicate video id '" + video.video_id + "'");
        for (const auto& seg : video.segments) {
            if (!segment_ids.insert(seg.segment_id).second)
                invariant_error(seg.segment_id, "duplicate segment id '" + seg.segment_id + "'");
            if (!(seg.end_s > seg.start_s))
                invariant_error(seg.segment_id,
                                "segment '" + seg.segment_id + "' has end_s <= start_s");
            if (seg.clips.empty())
                invariant_error(seg.segment_id, "segment '" + seg.segment_id + "' has no clips");
            for (size_t i = 0; i < seg.clips.size(); ++i) {
                const Clip& c = seg.clips[i];
                if (c.appearance.size() != corpus.dims.visual)
                    throw CorpusError(CorpusError::Kind::DimMismatch, seg.segment_id,
                                      "clip appearance dim mismatch in '" + seg.segment_id + "'");
                if (c.transcript.size() != corpus.dims.text)
                    throw CorpusError(CorpusError::Kind::DimMismatch, seg.segment_id,
                                      "clip transcript dim mismatch in '" + seg.segment_id + "'");
                if (!c.has_transcript && !all_zero(c.transcript))
                    invariant_error(seg.segment_id,
                                    "clip " + std::to_string(i) + " of '" + seg.segment_id +
                                        "' has has_transcript=false but a nonzero transcript row");
            }
        }
    }

    std::unordered_set<std::string> question_ids;
    for (const auto& q : corpus.questions) {
        if (!question_ids.insert(q.question_id).second)
            invariant_error(q.question_id, "duplicate question id '" + q.question_id + "'");
        if (q.regions.empty())
            invariant_error(q.question_id, "question '" + q.question_id + "' has no regions");
        if (q.text_tokens.cols != corpus.dims.text && q.text_tokens.rows > 0)
            throw CorpusError(CorpusError::Kind::DimMismatch, q.question_id,
                              "text token dim mismatch in '" + q.question_id + "'");
        for (const auto& r : q.regions) {
            if (r.feature.size() != corpus.dims.visual)
                throw CorpusError(CorpusError::Kind::DimMismatch, q.question_id,
                                  "region feature dim mismatch in '" + q.question_id + "'");
            if (r.aligned_token_span) {
                const auto [a, b] = *r.aligned_token_span;
                if (a >= b || b > q.text_tokens.rows)
                    invariant_error(q.question_id, "aligned_token_span [" + std::to_string(a) +
                                                       "," + std::to_string(b) + ") out of range in '" +
                                                       q.question_id + "'");
            }
        }
        if (q.answers.empty())
            invariant_error(q.question_id, "question '" + q.question_id + "' has an empty answer set");
        for (const auto& ans : q.answers) {
            if (!segment_ids.count(ans))
                throw CorpusError(CorpusError::Kind::DanglingAnswer, ans,
                                  "question '" + q.question_id + "' answers unknown segment '" +
                                      ans + "'");
        }
    }

    // Splits must partition the video ids.
    std::unordered_map<std::string, std::string> assigned;
    auto check_split = [&](const std::vector<std::string>& ids, const char* name) {
        for (const auto& id : ids) {
            if (!video_ids.count(id))
                invariant_error(id, std::string("split '") + name + "' references unknown video '" +
                                        id + "'");
            auto [it, inserted] = assigned.emplace(id, name);
            if (!inserted)
                throw CorpusError(CorpusError::Kind::SplitOverlap, id,
                                  "video '" + id + "' appears in splits '" + it->second + "' and '" +
                                      name + "'");
        }
    };
    check_split(corpus.splits.train, "train");
    check_split(corpus.splits.val, "val");
    check_split(corpus.splits.test, "test");
    for (const auto& id : video_ids)
        if (!assigned.count(id))
            invariant_error(id, "video '" + id + "' is not assigned to any split");
}

std::set<std::string> compute_unseen_scenarios(const SegmentCorpus& corpus, const Splits& splits) {
    std::unordered_set<std::string> train_videos(splits.train.begin(), splits.train.end());
    std::set<std::string> train_scen;
    std::set<std::string> eval_scen;
    for (const auto& q : corpus.questions) {
        if (q.answers.empty()) continue;
        const VideoSegment* seg = corpus.find_segment(*q.answers.begin());
        if (!seg) continue;
        if (train_videos.count(seg->video_id))
            train_scen.insert(q.scenario);
        else
            eval_scen.insert(q.scenario);
    }
    std::set<std::string> unseen;
    for (const auto& s : eval_scen)
        if (!train_scen.count(s)) unseen.insert(s);
    return unseen;
}

std::vector<SegmentationWarning> validate_segmentation(const SegmentCorpus& corpus) {
    std::vector<SegmentationWarning> warnings;
    for (const auto& v : corpus.videos) {
        for (const auto& s : v.segments) {
            const double d = s.duration_s();
            if (d < kMinSegmentS) {
                warnings.push_back({s.segment_id, d,
                                    "segment '" + s.segment_id + "' is " + std::to_string(d) +
                                        " s, shorter than the 30 s soft minimum"});
            } else if (d > kMaxSegmentS) {
                warnings.push_back({s.segment_id, d,
                                    "segment '" + s.segment_id + "' is " + std::to_string(d) +
                                        " s, longer than the 120 s soft maximum"});
            }
        }
    }
    return warnings;
}

std::filesystem::path save_corpus(const SegmentCorpus& corpus, const fs::path& dir) {
    validate_corpus(corpus);

    std::error_code ec;
    fs::create_directories(dir / "features", ec);
    if (ec || !fs::is_directory(dir / "features"))
        throw CorpusError(CorpusError::Kind::Parse, dir.string(),
                          "cannot create corpus directory '" + dir.string() + "'");

    ordered_json manifest;
    manifest["version"] = kManifestVersion;
    manifest["dims"] = {{"visual", corpus.dims.visual}, {"text", corpus.dims.text}};

    size_t seg_counter = 0;
    manifest["videos"] = ordered_json::array();
    for (const auto& video : corpus.videos) {
        ordered_json jv;
        jv["video_id"] = video.video_id;
        jv["scenario"] = video.scenario;
        jv["segments"] = ordered_json::array();
        for (const auto& seg : video.segments) {
            char tag[32];
            std::snprintf(tag, sizeof(tag), "%05zu", seg_counter++);
            const std::string app_ref = std::string("features/seg_") + tag + "_app.tqvf";
            const std::string trs_ref = std::string("features/seg_") + tag + "_trs.tqvf";

            FloatMatrix app(seg.clips.size(), corpus.dims.visual);
            FloatMatrix trs(seg.clips.size(), corpus.dims.text);
            std::vector<bool> mask(seg.clips.size());
            for (size_t i = 0; i < seg.clips.size(); ++i) {
                std::copy(seg.clips[i].appearance.begin(), seg.clips[i].appearance.end(),
                          app.row(i));
                std::copy(seg.clips[i].transcript.begin(), seg.clips[i].transcript.end(),
                          trs.row(i));
                mask[i] = seg.clips[i].has_transcript;
            }
            io::write_feature_file(dir / app_ref, app);
            io::write_feature_file(dir / trs_ref, trs);

            ordered_json js;
            js["segment_id"] = seg.segment_id;
            js["start_s"] = seg.start_s;
            js["end_s"] = seg.end_s;
            js["n_clips"] = seg.clips.size();
            js["appearance_ref"] = app_ref;
            js["transcript_ref"] = trs_ref;
            js["transcript_mask"] = mask;
            jv["segments"].push_back(std::move(js));
        }
        manifest["videos"].push_back(std::move(jv));
    }

    // All region features go to one corpus-level file; regions reference rows.
    size_t region_rows = 0;
    for (const auto& q : corpus.questions) region_rows += q.regions.size();
    FloatMatrix regions(region_rows, corpus.dims.visual);

    manifest["questions"] = ordered_json::array();
    size_t region_row = 0;
    size_t q_counter = 0;
    for (const auto& q : corpus.questions) {
        char tag[32];
        std::snprintf(tag, sizeof(tag), "%05zu", q_counter++);
        const std::string txt_ref = std::string("features/qst_") + tag + "_txt.tqvf";
        FloatMatrix txt = q.text_tokens;
        txt.cols = corpus.dims.text;  // normalize 0-row matrices to the declared width
        io::write_feature_file(dir / txt_ref, txt);

        ordered_json jq;
        jq["question_id"] = q.question_id;
        jq["text_ref"] = txt_ref;
        jq["n_tokens"] = q.text_tokens.rows;
        jq["regions"] = ordered_json::array();
        for (const auto& r : q.regions) {
            std::copy(r.feature.begin(), r.feature.end(), regions.row(region_row));
            ordered_json jr;
            jr["feature_row"] = region_row;
            if (r.aligned_token_span)
                jr["aligned_token_span"] =
                    ordered_json::array({r.aligned_token_span->first, r.aligned_token_span->second});
            else
                jr["aligned_token_span"] = nullptr;
            jq["regions"].push_back(std::move(jr));
            ++region_row;
        }
        jq["query_type"] = to_string(q.query_type);
        jq["scenario"] = q.scenario;
        jq["answers"] = std::vector<std::string>(q.answers.begin(), q.answers.end());
        manifest["questions"].push_back(std::move(jq));
    }
    io::write_feature_file(dir / "features/regions.tqvf", regions);
    manifest["region_features_ref"] = "features/regions.tqvf";

    manifest["splits"] = {{"train", corpus.splits.train},
                          {"val", corpus.splits.val},
                          {"test", corpus.splits.test}};

    const fs::path manifest_path = dir / "manifest.json";
    std::ofstream os(manifest_path, std::ios::trunc);
    if (!os)
        throw CorpusError(CorpusError::Kind::Parse, manifest_path.string(),
                          "cannot write manifest '" + manifest_path.string() + "'");
    os << manifest.dump(2) << "\n";
    return manifest_path;
}

SegmentCorpus load_corpus(const fs::path& manifest_path) {
    if (!fs::exists(manifest_path))
        throw CorpusError(CorpusError::Kind::MissingFile, manifest_path.string(),
                          "manifest not found: '" + manifest_path.string() + "'");
    std::ifstream is(manifest_path);
    ordered_json manifest;
    try {
        is >> manifest;
    } catch (const std::exception& e) {
        throw CorpusError(CorpusError::Kind::Parse, manifest_path.string(),
                          "manifest parse error: " + std::string(e.what()));
    }
    const fs::path base = manifest_path.parent_path();

    SegmentCorpus corpus;
    try {
        if (manifest.at("version").get<int>() != kManifestVersion)
            throw CorpusError(CorpusError::Kind::Parse, manifest_path.string(),
                              "unsupported manifest version");
        corpus.dims.visual = manifest.at("dims").at("visual").get<size_t>();
        corpus.dims.text = manifest.at("dims").at("text").get<size_t>();

        for (const auto& jv : manifest.at("videos")) {
            Video video;
            video.video_id = jv.at("video_id").get<std::string>();
            video.scenario = jv.at("scenario").get<std::string>();
            for (const auto& js : jv.at("segments")) {
                VideoSegment seg;
                seg.segment_id = js.at("segment_id").get<std::string>();
                seg.video_id = video.video_id;
                seg.scenario = video.scenario;
                seg.start_s = js.at("start_s").get<double>();
                seg.end_s = js.at("end_s").get<double>();
                const size_t n_clips = js.at("n_clips").get<size_t>();
                const auto mask = js.at("transcript_mask").get<std::vector<bool>>();
                if (mask.size() != n_clips)
                    invariant_error(seg.segment_id,
                                    "transcript_mask length mismatch in '" + seg.segment_id + "'");
                FloatMatrix app = load_rows(base, js.at("appearance_ref").get<std::string>(),
                                            n_clips, corpus.dims.visual, seg.segment_id);
                FloatMatrix trs = load_rows(base, js.at("transcript_ref").get<std::string>(),
                                            n_clips, corpus.dims.text, seg.segment_id);
                seg.clips.resize(n_clips);
                for (size_t i = 0; i < n_clips; ++i) {
                    seg.clips[i].appearance.assign(app.row(i), app.row(i) + corpus.dims.visual);
                    seg.clips[i].transcript.assign(trs.row(i), trs.row(i) + corpus.dims.text);
                    seg.clips[i].has_transcript = mask[i];
                }
                video.segments.push_back(std::move(seg));
            }
            corpus.videos.push_back(std::move(video));
        }

        FloatMatrix regions;
        if (manifest.contains("region_features_ref")) {
            const std::string ref = manifest.at("region_features_ref").get<std::string>();
            if (!fs::exists(base / ref))
                throw CorpusError(CorpusError::Kind::MissingFile, ref,
                                  "missing region feature file '" + (base / ref).string() + "'");
            regions = io::read_feature_file(base / ref);
            if (regions.cols != corpus.dims.visual)
                throw CorpusError(CorpusError::Kind::DimMismatch, ref,
                                  "region feature file dim mismatch");
        }

        for (const auto& jq : manifest.at("questions")) {
            MultimodalQuestion q;
            q.question_id = jq.at("question_id").get<std::string>();
            const size_t n_tokens = jq.at("n_tokens").get<size_t>();
            q.text_tokens = load_rows(base, jq.at("text_ref").get<std::string>(), n_tokens,
                                      corpus.dims.text, q.question_id);
            for (const auto& jr : jq.at("regions")) {
                Region r;
                const size_t row = jr.at("feature_row").get<size_t>();
                if (row >= regions.rows)
                    throw CorpusError(CorpusError::Kind::DimMismatch, q.question_id,
                                      "region feature_row " + std::to_string(row) +
                                          " out of range in '" + q.question_id + "'");
                r.feature.assign(regions.row(row), regions.row(row) + regions.cols);
                const auto& span = jr.at("aligned_token_span");
                if (!span.is_null())
                    r.aligned_token_span = {span.at(0).get<size_t>(), span.at(1).get<size_t>()};
                q.regions.push_back(std::move(r));
            }
            q.query_type = query_type_from_string(jq.at("query_type").get<std::string>());
            q.scenario = jq.at("scenario").get<std::string>();
            for (const auto& a : jq.at("answers")) q.answers.insert(a.get<std::string>());
            corpus.questions.push_back(std::move(q));
        }

        corpus.splits.train = manifest.at("splits").at("train").get<std::vector<std::string>>();
        corpus.splits.val = manifest.at("splits").at("val").get<std::vector<std::string>>();
        corpus.splits.test = manifest.at("splits").at("test").get<std::vector<std::string>>();
    } catch (const CorpusError&) {
        throw;
    } catch (const std::exception& e) {
        throw CorpusError(CorpusError::Kind::Parse, manifest_path.string(),
                          "manifest field error: " + std::string(e.what()));
    }

    validate_corpus(corpus);
    corpus.unseen_scenarios = compute_unseen_scenarios(corpus, corpus.splits);
    return corpus;
}

SplitAssignment split_by_video(const SegmentCorpus& corpus, const SplitFractions& fractions,
                               uint64_t seed) {
    const double sum = fractions.train + fractions.val + fractions.test;
    if (fractions.train < 0 || fractions.val < 0 || fractions.test < 0 ||
        std::fabs(sum - 1.0) > 1e-9)
        throw std::invalid_argument("split fractions must be non-negative and sum to 1");

    size_t nonzero = 0;
    for (double f : {fractions.train, fractions.val, fractions.test})
        if (f > 0) ++nonzero;
    if (corpus.videos.size() < nonzero)
        throw std::invalid_argument("fewer videos (" + std::to_string(corpus.videos.size()) +
                                    ") than nonzero splits (" + std::to_string(nonzero) + ")");

    std::vector<std::string> ids;
    ids.reserve(corpus.videos.size());
    for (const auto& v : corpus.videos) ids.push_back(v.video_id);
    std::sort(ids.begin(), ids.end());
    Rng rng = substream(seed, "split");
    rng.shuffle(ids);

    const size_t n = ids.size();
    const size_t n_train = static_cast<size_t>(std::floor(fractions.train * static_cast<double>(n)));
    const size_t n_val = static_cast<size_t>(std::floor(fractions.val * static_cast<double>(n)));

    SplitAssignment out;
    out.splits.train.assign(ids.begin(), ids.begin() + static_cast<long>(n_train));
    out.splits.val.assign(ids.begin() + static_cast<long>(n_train),
                          ids.begin() + static_cast<long>(n_train + n_val));
    out.splits.test.assign(ids.begin() + static_cast<long>(n_train + n_val), ids.end());

    out.unseen_scenarios = compute_unseen_scenarios(corpus, out.splits);

    std::unordered_map<std::string, std::string> video_split;
    for (const auto& id : out.splits.train) video_split[id] = "train";
    for (const auto& id : out.splits.val) video_split[id] = "val";
    for (const auto& id : out.splits.test) video_split[id] = "test";
    out.type_histogram["train"];
    out.type_histogram["val"];
    out.type_histogram["test"];
    for (const auto& q : corpus.questions) {
        if (q.answers.empty()) continue;
        const VideoSegment* seg = corpus.find_segment(*q.answers.begin());
        if (!seg) continue;
        auto it = video_split.find(seg->video_id);
        if (it == video_split.end()) continue;
        out.type_histogram[it->second][q.query_type] += 1;
    }
    return out;
}

}  // namespace tqvsr::corpus

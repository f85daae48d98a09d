#include "tqvsr/featurebank.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace tqvsr::fbank {

namespace {

void check_stream(const FeatureStream& s) {
    if (s.timestamps.size() != s.features.rows)
        throw std::invalid_argument("stream timestamp count does not match feature rows");
    for (size_t i = 1; i < s.timestamps.size(); ++i)
        if (!(s.timestamps[i] > s.timestamps[i - 1]))
            throw std::invalid_argument("stream timestamps must be strictly increasing");
}

}  // namespace

PooledWindows pool_windows(const FeatureStream& stream, double seg_start_s, double seg_end_s,
                           double window_s) {
    if (!(seg_end_s > seg_start_s)) throw std::invalid_argument("segment end must be after start");
    if (!(window_s > 0.0)) throw std::invalid_argument("window_s must be positive");
    check_stream(stream);

    const size_t l =
        static_cast<size_t>(std::ceil((seg_end_s - seg_start_s) / window_s - 1e-12));
    const size_t dim = stream.features.cols;

    PooledWindows out;
    out.values = FloatMatrix(std::max<size_t>(l, 1), dim);
    out.nonempty.assign(std::max<size_t>(l, 1), false);

    for (size_t i = 0; i < stream.timestamps.size(); ++i) {
        const double t = stream.timestamps[i];
        if (t < seg_start_s || t >= seg_end_s) continue;
        size_t j = static_cast<size_t>(std::floor((t - seg_start_s) / window_s));
        if (j >= out.values.rows) j = out.values.rows - 1;  // guard fp edge at window boundary
        const float* src = stream.features.row(i);
        float* dst = out.values.row(j);
        if (!out.nonempty[j]) {
            std::copy(src, src + dim, dst);
            out.nonempty[j] = true;
        } else {
            for (size_t c = 0; c < dim; ++c) dst[c] = std::max(dst[c], src[c]);
        }
    }
    return out;
}

SegmentBuild build_segment(const FeatureStream& appearance_stream,
                           const FeatureStream& transcript_stream, double seg_start_s,
                           double seg_end_s, double window_s) {
    PooledWindows app = pool_windows(appearance_stream, seg_start_s, seg_end_s, window_s);
    PooledWindows trs = pool_windows(transcript_stream, seg_start_s, seg_end_s, window_s);

    SegmentBuild out;
    const size_t l = app.values.rows;
    out.clips.resize(l);
    for (size_t j = 0; j < l; ++j) {
        corpus::Clip& clip = out.clips[j];
        clip.appearance.assign(app.values.row(j), app.values.row(j) + app.values.cols);
        clip.transcript.assign(trs.values.row(j), trs.values.row(j) + trs.values.cols);
        clip.has_transcript = trs.nonempty[j];
        if (!app.nonempty[j]) ++out.empty_appearance_windows;
    }
    return out;
}

}  // namespace tqvsr::fbank

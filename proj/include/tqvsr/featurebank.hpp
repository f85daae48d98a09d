#pragma once

#include <vector>

#include "tqvsr/corpus.hpp"
#include "tqvsr/types.hpp"

namespace tqvsr::fbank {

// A timestamped dense feature stream (frame features at some FPS, or token
// features carrying per-token timestamps). Timestamps strictly increasing.
struct FeatureStream {
    std::vector<double> timestamps;  // seconds
    FloatMatrix features;            // n x D
};

struct PooledWindows {
    FloatMatrix values;              // l x D, element-wise max per window
    std::vector<bool> nonempty;      // per window: had at least one stream entry
};

// Max-pools stream entries into half-open windows [start + j*w, start + (j+1)*w)
// covering [seg_start_s, seg_end_s); the last window may be partial.
// l = ceil((end - start)/w). Empty windows yield an all-zero row.
PooledWindows pool_windows(const FeatureStream& stream, double seg_start_s, double seg_end_s,
                           double window_s = 1.5);

struct SegmentBuild {
    std::vector<corpus::Clip> clips;
    size_t empty_appearance_windows = 0;  // diagnostic: zero-filled appearance rows
};

// Pools both channels on one window grid so clip j's appearance and
// transcript are temporally aligned. Empty transcript windows become
// zero rows with has_transcript=false.
SegmentBuild build_segment(const FeatureStream& appearance_stream,
                           const FeatureStream& transcript_stream, double seg_start_s,
                           double seg_end_s, double window_s = 1.5);

}  // namespace tqvsr::fbank

#pragma once

// Long-video prediction: per-window forward passes averaged into whole-video
// frame predictions, foreground-score post-processing into peaks, per-peak
// segment decoding, multi-scale accumulation, and temporal NMS.

#include <functional>
#include <string>
#include <vector>

#include "vground/config.hpp"
#include "vground/data.hpp"
#include "vground/model.hpp"

namespace vground {

// Whole-video per-frame predictions (plain buffers, averaged over windows).
struct VideoPredictions {
    std::vector<Box> boxes;
    std::vector<float> start_logits;
    std::vector<float> end_logits;
    std::vector<float> foreground;

    int length() const { return static_cast<int>(foreground.size()); }
};

struct Candidate {
    Segment segment;
    double score = 0;
    std::vector<Box> boxes;  // one per frame of segment, when emitted
};

struct ResponseTrack {
    enum class Kind { Tube, Segments };
    Kind kind = Kind::Segments;
    std::vector<Candidate> items;  // Tube: exactly one entry with boxes
};

// Window starts 0, k_step, 2*k_step, ...; the last window is clamped so every
// frame is covered. Returns [start, end) pairs.
std::vector<std::pair<int, int>> slide_windows(int total, int window, int step);

// Raw per-window model output as plain buffers.
struct WindowOutput {
    std::vector<Box> boxes;
    std::vector<float> start_logits;
    std::vector<float> end_logits;
    std::vector<float> foreground;
};

// The averaging rule alone: per frame, arithmetic-mean all 7 channels across
// the covering windows produced by `forward(start, len)`.
VideoPredictions accumulate_windows(int total, int window, int step,
                                    const std::function<WindowOutput(int, int)>& forward);

// Runs the model over sliding windows and averages.
VideoPredictions accumulate(const Model<float>& model, const VideoTensor& video, const Query& query, int window,
                            int step);

// (s', e') on the stride-r subsampled track covers original frames
// (r*s', min(r*e' + r - 1, total - 1)).
Segment remap_segment(const Segment& sub, int stride, int total);

// Centered median filter with zero padding at the boundaries.
std::vector<float> median_filter(const std::vector<float>& scores, int kernel);

// One peak per contiguous run of scores > thr, at the run maximum (earliest
// index on ties); ordered by index, truncated to the max_peaks best scores.
std::vector<std::pair<int, float>> find_peaks(const std::vector<float>& scores, double thr, int max_peaks);

// Masks start/end logits outside the span-length window centered at the
// peak, softmaxes inside, and returns the argmax pair (i, j) with j >= i.
Candidate decode_segment_at_peak(const VideoPredictions& preds, int peak, int span, bool attach_boxes);

ResponseTrack infer_vq2d(const VideoPredictions& preds, const InferenceConfig& cfg);

ResponseTrack infer_temporal(const VideoPredictions& preds, const InferenceConfig& cfg, int decode_span);

// Greedy suppression of candidates with temporal IoU above thr, ordered by
// score descending with earlier starts breaking ties.
std::vector<Candidate> temporal_nms(std::vector<Candidate> candidates, double thr);

// Accumulate-and-decode at every temporal subsampling stride in cfg.scales,
// remap candidates to original frame indices, pool, NMS, re-rank. VQ2D always
// runs at scale 1.
ResponseTrack multiscale_infer(const Model<float>& model, const VideoTensor& video, const Query& query, Task task,
                               const InferenceConfig& cfg);

// ---------------------------------------------------------------------------
// Dataset-level inference
// ---------------------------------------------------------------------------

struct PredictionRecord {
    std::string annotation_id;
    std::string video_id;
    Task task = Task::NLQ;
    ResponseTrack track;
};

std::vector<PredictionRecord> run_inference(const Model<float>& model, const Dataset& data, const std::string& split,
                                            const InferenceConfig& cfg, const std::vector<Task>& tasks, int threads);

// One JSON line per (video, query), stable field order.
void write_predictions(const std::vector<PredictionRecord>& records, const std::string& path);
std::vector<PredictionRecord> read_predictions(const std::string& path);

}  // namespace vground

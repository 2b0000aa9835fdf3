#pragma once

// Evaluation: temporal and spatio-temporal IoU, pooled average precision,
// Recovery/Success for tubes, recall@k at fixed tIoU, and the random-box
// baselines scored through the same pipeline.

#include <string>
#include <vector>

#include "vground/config.hpp"
#include "vground/data.hpp"
#include "vground/inference.hpp"
#include "vground/rng.hpp"

namespace vground {

// Inclusive-frame IoU: |intersection| / |union| in frames.
double temporal_iou(const Segment& a, const Segment& b);

struct Tube {
    Segment segment;
    std::vector<Box> boxes;  // one per frame of segment
};

// Sum of per-frame intersection areas over the sum of per-frame union areas,
// taken over the temporal union; frames covered by only one tube contribute
// that tube's box area to the denominator.
double st_tube_iou(const Tube& pred, const Tube& gt);

// One evaluated sample: prediction scores plus the IoU of every
// (prediction, ground truth) pair, iou[pred][gt].
struct ApInstance {
    std::vector<double> scores;
    std::vector<std::vector<double>> iou;
    int gt_count = 0;
};

// Pool predictions across samples, sort by confidence, greedy-match against
// unmatched ground truth at iou >= thr, and integrate the exact
// precision-recall staircase with recall denominator = total ground truth.
double average_precision(const std::vector<ApInstance>& samples, double thr);

// Percent of predicted-tube frames whose box overlaps the same-frame ground
// truth box at IoU >= box_iou_thr; frames outside the ground truth fail.
double recovery(const Tube& pred, const Tube& gt, double box_iou_thr = 0.5);

bool success(const Tube& pred, const Tube& gt, double min_st_iou = 0.05);

// Percent of samples (one ground truth each) whose top-k contains a segment
// with tIoU >= m.
double recall_at_k_single(const std::vector<std::vector<Segment>>& ranked, const std::vector<Segment>& gt, int k,
                          double m);

// Percent of ground-truth instances covered by any top-k prediction of their
// sample at tIoU >= m, averaged over instances.
double recall_at_k_instances(const std::vector<std::vector<Segment>>& ranked,
                             const std::vector<std::vector<Segment>>& gts, int k, double m);

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct EvalReport {
    struct Section {
        std::string task;
        std::vector<std::pair<std::string, double>> values;
    };
    std::vector<Section> sections;

    double get(const std::string& task, const std::string& metric) const;
    std::string to_json_text() const;
    std::string to_table_text() const;
    static EvalReport mean(const std::vector<EvalReport>& reports);
};

// Scores predictions against the annotations they reference. Unknown video or
// annotation ids raise an error listing them.
EvalReport evaluate(const Dataset& data, const std::vector<PredictionRecord>& predictions, const MetricConfig& cfg);

enum class BaselineMode { RandomBoxes, RandomCentered };

BaselineMode baseline_mode_from_name(const std::string& name);

std::vector<PredictionRecord> make_baseline_predictions(const Dataset& data, const std::string& split,
                                                        BaselineMode mode, std::uint64_t seed,
                                                        const std::vector<Task>& tasks);

// Baseline metric table, averaged over `repeats` seeded draws.
EvalReport random_baselines(const Dataset& data, const std::string& split, BaselineMode mode, std::uint64_t seed,
                            int repeats, const MetricConfig& cfg);

}  // namespace vground

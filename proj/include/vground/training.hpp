#pragma once

// Window sampling around ground truth, round-robin multi-task batching,
// AdamW with step-decay schedule, per-step loss logging, checkpointing.

#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "vground/config.hpp"
#include "vground/data.hpp"
#include "vground/losses.hpp"
#include "vground/model.hpp"
#include "vground/rng.hpp"

namespace vground {

// Picks a w-frame window that fully contains the ground-truth segment when it
// fits, and overlaps it by at least one frame otherwise. Uniform over the
// feasible starts.
Segment sample_training_window(const Segment& gt, int w, int video_len, Rng& rng);

struct TrainSample {
    const Episode* episode = nullptr;
    const Annotation* annotation = nullptr;
};

// Batch iterator over per-task sample lists. Round-robin cycles the tasks in
// fixed order with per-task shuffled, auto-reshuffling streams; concat
// shuffles the union once per pass.
class BatchStream {
  public:
    BatchStream(std::map<Task, std::vector<TrainSample>> per_task, SamplingMode mode, int batch_size, Rng rng);

    std::vector<TrainSample> next();

    // Task the most recent round-robin batch was drawn from.
    Task current_task() const { return task_order_[cursor_]; }
    int batches_per_pass() const;

  private:
    std::vector<TrainSample> draw_round_robin();
    std::vector<TrainSample> draw_concat();

    std::map<Task, std::vector<TrainSample>> per_task_;
    SamplingMode mode_;
    int batch_size_;
    Rng rng_;

    std::vector<Task> task_order_;
    std::size_t cursor_ = 0;  // round robin position (last drawn)
    std::map<Task, std::vector<std::size_t>> order_;
    std::map<Task, std::size_t> pos_;

    std::vector<TrainSample> concat_;
    std::vector<std::size_t> concat_order_;
    std::size_t concat_pos_ = 0;
};

// Decoupled weight decay Adam over the model parameter list, one learning
// rate per parameter group.
class AdamW {
  public:
    AdamW(std::vector<NamedParam<float>>& params, const TrainConfig& cfg);

    // grads holds one flat gradient per parameter, already batch-averaged.
    void step(const std::vector<std::vector<float>>& grads, double lr_scale);

    double group_lr(ParamGroup g) const;

  private:
    std::vector<NamedParam<float>>* params_;
    double lr_backbone_, lr_text_, lr_rest_, weight_decay_;
    std::vector<std::vector<float>> m_, v_;
    long t_ = 0;
};

double lr_scale_for_epoch(const TrainConfig& cfg, int epoch);

struct TrainResult {
    std::vector<double> epoch_mean_loss;
    int steps = 0;
    std::string final_checkpoint;
};

// Trains in place. Writes <out_dir>/train_log.jsonl (one JSON line per step),
// <out_dir>/train_summary.json, and per-epoch checkpoints. A non-finite loss
// aborts with a diagnostic dump of the offending batch.
TrainResult train(Model<float>& model, const Dataset& data, const TrainConfig& cfg, const LossWeights& weights,
                  const std::string& out_dir);

}  // namespace vground

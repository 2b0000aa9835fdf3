#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "vground/errors.hpp"

namespace vground {

enum class Task { VQ2D, NLQ, MQ };

const char* task_name(Task t);
Task task_from_name(const std::string& name);
std::vector<Task> all_tasks();

enum class SamplingMode { RoundRobin, Concat };

struct ModelConfig {
    int d = 32;              // hidden size
    int enc_layers = 2;      // video-query encoder depth
    int dec_layers = 2;      // space-time decoder depth
    int heads = 4;
    int grid_h = 4;          // post-backbone spatial grid
    int grid_w = 4;
    int input_h = 16;        // raw frame grid
    int input_w = 16;
    int channels = 3;
    int encoder_stride = 1;  // temporal stride k of the video-query encoder
    std::map<Task, int> window;  // per-task training window length in frames
    int vocab = 64;
    int num_classes = 12;
    bool shared_time_embedding = false;
    bool onehot_mq = false;  // encode moment queries as one-hot classes instead of text
    bool paper_preset = false;

    int patch_h() const { return input_h / grid_h; }
    int patch_w() const { return input_w / grid_w; }
    int patch_dim() const { return patch_h() * patch_w() * channels; }
    int num_patches() const { return grid_h * grid_w; }
    int ffn_dim() const { return 4 * d; }

    void validate() const;

    static ModelConfig desk();
    // Hyperparameters of the original full-scale setup; documented but far
    // beyond what this artifact is meant to run.
    static ModelConfig paper();
};

struct TrainConfig {
    int epochs = 30;
    int batch_size = 8;
    double lr_backbone = 3e-4;
    double lr_text = 3e-4;
    double lr_rest = 3e-4;
    int lr_drop_every = 10;    // epochs
    double lr_drop_factor = 10.0;
    double weight_decay = 0.01;
    std::uint64_t seed = 42;
    std::vector<Task> tasks = all_tasks();
    SamplingMode sampling = SamplingMode::RoundRobin;
    std::map<Task, int> task_stride;  // temporal subsampling per task
    int threads = 2;
    int checkpoint_every = 1;  // epochs

    void validate() const;

    static TrainConfig desk();
    static TrainConfig paper();
};

struct InferenceConfig {
    int window = 0;              // 0 = use the model's per-task window
    int step = 0;                // 0 = window / 2
    int medfilt_kernel = 5;
    double peak_thr_vq = 0.5;
    double peak_thr_temporal = 0.1;
    int max_peaks = 1000;
    int vq_peak_window = 24;     // decode span around the chosen peak (paper-scale value: 70)
    std::vector<int> scales = {1, 2, 4};  // temporal subsampling strides for NLQ/MQ
    double nms_thr = 0.4;
    bool use_foreground_head = true;
    bool emit_boxes_for_temporal = false;

    void validate() const;

    static InferenceConfig desk();
    static InferenceConfig paper();
};

struct MetricConfig {
    double ap_tiou = 0.25;
    std::vector<double> recall_tious = {0.3, 0.5};
    std::vector<int> recall_ks = {1, 5};
    double recovery_box_iou = 0.5;
    double success_iou = 0.05;

    void validate() const;
};

struct GenConfig {
    int train_episodes = 200;
    int val_episodes = 50;
    int concepts = 12;
    int min_frames = 64;
    int max_frames = 256;
    int pattern_size = 4;
    double noise_sigma = 0.1;
    std::uint64_t seed = 7;

    void validate() const;
};

// Everything one run needs, loadable from a single JSON file; unknown keys
// are rejected so config typos fail loudly.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    InferenceConfig inference;
    MetricConfig metrics;
    GenConfig gen;

    void validate() const;

    static RunConfig desk();
    static RunConfig from_json_text(const std::string& text);
    static RunConfig from_file(const std::string& path);
    std::string to_json_text() const;
};

std::vector<Task> parse_task_list(const std::string& csv);
std::vector<int> parse_int_list(const std::string& csv);

}  // namespace vground

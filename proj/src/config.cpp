#include "vground/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace vground {

using nlohmann::ordered_json;

const char* task_name(Task t) {
    switch (t) {
        case Task::VQ2D: return "vq2d";
        case Task::NLQ: return "nlq";
        case Task::MQ: return "mq";
    }
    return "?";
}

Task task_from_name(const std::string& name) {
    if (name == "vq2d") return Task::VQ2D;
    if (name == "nlq") return Task::NLQ;
    if (name == "mq") return Task::MQ;
    throw ConfigError("unknown task name: " + name);
}

std::vector<Task> all_tasks() { return {Task::VQ2D, Task::NLQ, Task::MQ}; }

std::vector<Task> parse_task_list(const std::string& csv) {
    std::vector<Task> tasks;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) tasks.push_back(task_from_name(item));
    }
    if (tasks.empty()) throw ConfigError("empty task list");
    return tasks;
}

std::vector<int> parse_int_list(const std::string& csv) {
    std::vector<int> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(std::stoi(item));
    }
    return out;
}

void ModelConfig::validate() const {
    if (d <= 0 || heads <= 0 || d % heads != 0) throw ConfigError("model: d must be positive and divisible by heads");
    if (enc_layers < 1 || dec_layers < 1) throw ConfigError("model: need at least one encoder and decoder layer");
    if (encoder_stride < 1) throw ConfigError("model: encoder_stride must be >= 1");
    if (input_h % grid_h != 0 || input_w % grid_w != 0)
        throw ConfigError("model: input grid must divide into the patch grid");
    if (vocab < 1 || num_classes < 1) throw ConfigError("model: vocab and num_classes must be positive");
    if (window.size() != 3) throw ConfigError("model: window must cover all three tasks");
    for (const auto& [task, w] : window)
        if (w < 2) throw ConfigError(std::string("model: window for ") + task_name(task) + " must be >= 2");
}

ModelConfig ModelConfig::desk() {
    ModelConfig cfg;
    cfg.window = {{Task::VQ2D, 32}, {Task::NLQ, 48}, {Task::MQ, 48}};
    return cfg;
}

ModelConfig ModelConfig::paper() {
    ModelConfig cfg;
    cfg.d = 256;
    cfg.enc_layers = 6;
    cfg.dec_layers = 6;
    cfg.heads = 8;
    cfg.grid_h = 10;
    cfg.grid_w = 10;
    cfg.input_h = 320;
    cfg.input_w = 320;
    cfg.window = {{Task::VQ2D, 200}, {Task::NLQ, 400}, {Task::MQ, 400}};
    cfg.vocab = 50000;
    cfg.num_classes = 110;
    cfg.paper_preset = true;
    return cfg;
}

void TrainConfig::validate() const {
    if (epochs < 1 || batch_size < 1) throw ConfigError("train: epochs and batch_size must be positive");
    if (lr_backbone <= 0 || lr_text <= 0 || lr_rest <= 0) throw ConfigError("train: learning rates must be > 0");
    if (lr_drop_every < 1 || lr_drop_factor <= 0) throw ConfigError("train: bad lr schedule");
    if (tasks.empty()) throw ConfigError("train: task set must be non-empty");
    if (threads < 1) throw ConfigError("train: threads must be >= 1");
    if (task_stride.size() != 3) throw ConfigError("train: task_stride must cover all three tasks");
    for (const auto& [task, s] : task_stride)
        if (s < 1) throw ConfigError("train: task strides must be >= 1");
}

TrainConfig TrainConfig::desk() {
    TrainConfig cfg;
    cfg.task_stride = {{Task::VQ2D, 1}, {Task::NLQ, 2}, {Task::MQ, 2}};
    return cfg;
}

TrainConfig TrainConfig::paper() {
    TrainConfig cfg = desk();
    cfg.epochs = 25;
    cfg.batch_size = 16;
    cfg.lr_backbone = 1e-5;
    cfg.lr_text = 5e-5;
    cfg.lr_rest = 5e-5;
    cfg.task_stride = {{Task::VQ2D, 1}, {Task::NLQ, 5}, {Task::MQ, 5}};
    return cfg;
}

void InferenceConfig::validate() const {
    if (window < 0 || step < 0) throw ConfigError("inference: window/step must be >= 0");
    if (window > 0 && step > window) throw ConfigError("inference: step must be <= window");
    if (medfilt_kernel < 1 || medfilt_kernel % 2 == 0) throw ConfigError("inference: median kernel must be odd");
    if (peak_thr_vq < 0 || peak_thr_vq > 1 || peak_thr_temporal < 0 || peak_thr_temporal > 1)
        throw ConfigError("inference: peak thresholds must lie in [0,1]");
    if (max_peaks < 1) throw ConfigError("inference: max_peaks must be >= 1");
    if (vq_peak_window < 1) throw ConfigError("inference: vq_peak_window must be >= 1");
    if (scales.empty()) throw ConfigError("inference: scales must be non-empty");
    for (int s : scales)
        if (s < 1) throw ConfigError("inference: scales must be >= 1");
    if (nms_thr < 0 || nms_thr > 1) throw ConfigError("inference: nms threshold must lie in [0,1]");
}

InferenceConfig InferenceConfig::desk() { return InferenceConfig{}; }

InferenceConfig InferenceConfig::paper() {
    InferenceConfig cfg;
    cfg.vq_peak_window = 70;
    cfg.scales = {1, 3, 5, 10, 25};  // the full-scale fps set expressed as strides
    return cfg;
}

void MetricConfig::validate() const {
    auto in01 = [](double v) { return v > 0 && v <= 1; };
    if (!in01(ap_tiou) || !in01(recovery_box_iou) || !in01(success_iou))
        throw ConfigError("metrics: thresholds must lie in (0,1]");
    for (double m : recall_tious)
        if (!in01(m)) throw ConfigError("metrics: recall tIoU thresholds must lie in (0,1]");
    for (int k : recall_ks)
        if (k < 1) throw ConfigError("metrics: recall k must be >= 1");
}

void GenConfig::validate() const {
    if (train_episodes < 0 || val_episodes < 0 || train_episodes + val_episodes < 1)
        throw ConfigError("gen: need at least one episode");
    if (concepts < 2) throw ConfigError("gen: need at least 2 concepts");
    if (min_frames < 8 || max_frames < min_frames) throw ConfigError("gen: bad frame range");
    if (pattern_size < 1) throw ConfigError("gen: pattern_size must be >= 1");
    if (noise_sigma <= 0) throw ConfigError("gen: noise_sigma must be > 0");
}

void RunConfig::validate() const {
    model.validate();
    train.validate();
    inference.validate();
    metrics.validate();
    gen.validate();
    if (model.num_classes < gen.concepts) throw ConfigError("model.num_classes must cover gen.concepts");
}

RunConfig RunConfig::desk() {
    RunConfig cfg;
    cfg.model = ModelConfig::desk();
    cfg.train = TrainConfig::desk();
    cfg.inference = InferenceConfig::desk();
    return cfg;
}

namespace {

void reject_unknown(const ordered_json& obj, const std::set<std::string>& known, const std::string& where) {
    for (const auto& [key, value] : obj.items())
        if (!known.contains(key)) throw ConfigError("unknown config key: " + where + "." + key);
}

std::map<Task, int> task_map_from_json(const ordered_json& obj, const std::string& where) {
    reject_unknown(obj, {"vq2d", "nlq", "mq"}, where);
    std::map<Task, int> out;
    for (Task t : all_tasks()) {
        if (!obj.contains(task_name(t))) throw ConfigError(where + " must name all three tasks");
        out[t] = obj.at(task_name(t)).get<int>();
    }
    return out;
}

ordered_json task_map_to_json(const std::map<Task, int>& m) {
    ordered_json obj;
    for (const auto& [t, v] : m) obj[task_name(t)] = v;
    return obj;
}

template <typename T>
void maybe(const ordered_json& obj, const char* key, T& target) {
    if (obj.contains(key)) target = obj.at(key).get<T>();
}

}  // namespace

RunConfig RunConfig::from_json_text(const std::string& text) {
    ordered_json root;
    try {
        root = ordered_json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    reject_unknown(root, {"model", "train", "inference", "metrics", "gen"}, "config");

    RunConfig cfg = RunConfig::desk();
    if (root.contains("model")) {
        const auto& m = root.at("model");
        reject_unknown(m,
                       {"d", "enc_layers", "dec_layers", "heads", "grid_h", "grid_w", "input_h", "input_w", "channels",
                        "encoder_stride", "window", "vocab", "num_classes", "shared_time_embedding", "onehot_mq",
                        "paper_preset"},
                       "model");
        maybe(m, "d", cfg.model.d);
        maybe(m, "enc_layers", cfg.model.enc_layers);
        maybe(m, "dec_layers", cfg.model.dec_layers);
        maybe(m, "heads", cfg.model.heads);
        maybe(m, "grid_h", cfg.model.grid_h);
        maybe(m, "grid_w", cfg.model.grid_w);
        maybe(m, "input_h", cfg.model.input_h);
        maybe(m, "input_w", cfg.model.input_w);
        maybe(m, "channels", cfg.model.channels);
        maybe(m, "encoder_stride", cfg.model.encoder_stride);
        if (m.contains("window")) cfg.model.window = task_map_from_json(m.at("window"), "model.window");
        maybe(m, "vocab", cfg.model.vocab);
        maybe(m, "num_classes", cfg.model.num_classes);
        maybe(m, "shared_time_embedding", cfg.model.shared_time_embedding);
        maybe(m, "onehot_mq", cfg.model.onehot_mq);
        maybe(m, "paper_preset", cfg.model.paper_preset);
    }
    if (root.contains("train")) {
        const auto& t = root.at("train");
        reject_unknown(t,
                       {"epochs", "batch_size", "lr_backbone", "lr_text", "lr_rest", "lr_drop_every", "lr_drop_factor",
                        "weight_decay", "seed", "tasks", "sampling", "task_stride", "threads", "checkpoint_every"},
                       "train");
        maybe(t, "epochs", cfg.train.epochs);
        maybe(t, "batch_size", cfg.train.batch_size);
        maybe(t, "lr_backbone", cfg.train.lr_backbone);
        maybe(t, "lr_text", cfg.train.lr_text);
        maybe(t, "lr_rest", cfg.train.lr_rest);
        maybe(t, "lr_drop_every", cfg.train.lr_drop_every);
        maybe(t, "lr_drop_factor", cfg.train.lr_drop_factor);
        maybe(t, "weight_decay", cfg.train.weight_decay);
        maybe(t, "seed", cfg.train.seed);
        if (t.contains("tasks")) {
            cfg.train.tasks.clear();
            for (const auto& name : t.at("tasks")) cfg.train.tasks.push_back(task_from_name(name.get<std::string>()));
        }
        if (t.contains("sampling")) {
            const std::string mode = t.at("sampling").get<std::string>();
            if (mode == "round_robin")
                cfg.train.sampling = SamplingMode::RoundRobin;
            else if (mode == "concat")
                cfg.train.sampling = SamplingMode::Concat;
            else
                throw ConfigError("train.sampling must be round_robin or concat");
        }
        if (t.contains("task_stride")) cfg.train.task_stride = task_map_from_json(t.at("task_stride"), "train.task_stride");
        maybe(t, "threads", cfg.train.threads);
        maybe(t, "checkpoint_every", cfg.train.checkpoint_every);
    }
    if (root.contains("inference")) {
        const auto& f = root.at("inference");
        reject_unknown(f,
                       {"window", "step", "medfilt_kernel", "peak_thr_vq", "peak_thr_temporal", "max_peaks",
                        "vq_peak_window", "scales", "nms_thr", "use_foreground_head", "emit_boxes_for_temporal"},
                       "inference");
        maybe(f, "window", cfg.inference.window);
        maybe(f, "step", cfg.inference.step);
        maybe(f, "medfilt_kernel", cfg.inference.medfilt_kernel);
        maybe(f, "peak_thr_vq", cfg.inference.peak_thr_vq);
        maybe(f, "peak_thr_temporal", cfg.inference.peak_thr_temporal);
        maybe(f, "max_peaks", cfg.inference.max_peaks);
        maybe(f, "vq_peak_window", cfg.inference.vq_peak_window);
        maybe(f, "scales", cfg.inference.scales);
        maybe(f, "nms_thr", cfg.inference.nms_thr);
        maybe(f, "use_foreground_head", cfg.inference.use_foreground_head);
        maybe(f, "emit_boxes_for_temporal", cfg.inference.emit_boxes_for_temporal);
    }
    if (root.contains("metrics")) {
        const auto& m = root.at("metrics");
        reject_unknown(m, {"ap_tiou", "recall_tious", "recall_ks", "recovery_box_iou", "success_iou"}, "metrics");
        maybe(m, "ap_tiou", cfg.metrics.ap_tiou);
        maybe(m, "recall_tious", cfg.metrics.recall_tious);
        maybe(m, "recall_ks", cfg.metrics.recall_ks);
        maybe(m, "recovery_box_iou", cfg.metrics.recovery_box_iou);
        maybe(m, "success_iou", cfg.metrics.success_iou);
    }
    if (root.contains("gen")) {
        const auto& g = root.at("gen");
        reject_unknown(g,
                       {"train_episodes", "val_episodes", "concepts", "min_frames", "max_frames", "pattern_size",
                        "noise_sigma", "seed"},
                       "gen");
        maybe(g, "train_episodes", cfg.gen.train_episodes);
        maybe(g, "val_episodes", cfg.gen.val_episodes);
        maybe(g, "concepts", cfg.gen.concepts);
        maybe(g, "min_frames", cfg.gen.min_frames);
        maybe(g, "max_frames", cfg.gen.max_frames);
        maybe(g, "pattern_size", cfg.gen.pattern_size);
        maybe(g, "noise_sigma", cfg.gen.noise_sigma);
        maybe(g, "seed", cfg.gen.seed);
    }
    cfg.validate();
    return cfg;
}

RunConfig RunConfig::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return from_json_text(ss.str());
}

std::string RunConfig::to_json_text() const {
    ordered_json root;
    root["model"] = {
        {"d", model.d},
        {"enc_layers", model.enc_layers},
        {"dec_layers", model.dec_layers},
        {"heads", model.heads},
        {"grid_h", model.grid_h},
        {"grid_w", model.grid_w},
        {"input_h", model.input_h},
        {"input_w", model.input_w},
        {"channels", model.channels},
        {"encoder_stride", model.encoder_stride},
        {"window", task_map_to_json(model.window)},
        {"vocab", model.vocab},
        {"num_classes", model.num_classes},
        {"shared_time_embedding", model.shared_time_embedding},
        {"onehot_mq", model.onehot_mq},
        {"paper_preset", model.paper_preset},
    };
    ordered_json tasks = ordered_json::array();
    for (Task t : train.tasks) tasks.push_back(task_name(t));
    root["train"] = {
        {"epochs", train.epochs},
        {"batch_size", train.batch_size},
        {"lr_backbone", train.lr_backbone},
        {"lr_text", train.lr_text},
        {"lr_rest", train.lr_rest},
        {"lr_drop_every", train.lr_drop_every},
        {"lr_drop_factor", train.lr_drop_factor},
        {"weight_decay", train.weight_decay},
        {"seed", train.seed},
        {"tasks", tasks},
        {"sampling", train.sampling == SamplingMode::RoundRobin ? "round_robin" : "concat"},
        {"task_stride", task_map_to_json(train.task_stride)},
        {"threads", train.threads},
        {"checkpoint_every", train.checkpoint_every},
    };
    root["inference"] = {
        {"window", inference.window},
        {"step", inference.step},
        {"medfilt_kernel", inference.medfilt_kernel},
        {"peak_thr_vq", inference.peak_thr_vq},
        {"peak_thr_temporal", inference.peak_thr_temporal},
        {"max_peaks", inference.max_peaks},
        {"vq_peak_window", inference.vq_peak_window},
        {"scales", inference.scales},
        {"nms_thr", inference.nms_thr},
        {"use_foreground_head", inference.use_foreground_head},
        {"emit_boxes_for_temporal", inference.emit_boxes_for_temporal},
    };
    root["metrics"] = {
        {"ap_tiou", metrics.ap_tiou},         {"recall_tious", metrics.recall_tious},
        {"recall_ks", metrics.recall_ks},     {"recovery_box_iou", metrics.recovery_box_iou},
        {"success_iou", metrics.success_iou},
    };
    root["gen"] = {
        {"train_episodes", gen.train_episodes},
        {"val_episodes", gen.val_episodes},
        {"concepts", gen.concepts},
        {"min_frames", gen.min_frames},
        {"max_frames", gen.max_frames},
        {"pattern_size", gen.pattern_size},
        {"noise_sigma", gen.noise_sigma},
        {"seed", gen.seed},
    };
    return root.dump(2);
}

}  // namespace vground

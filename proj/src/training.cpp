#include "vground/training.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <thread>

#include <json.hpp>

namespace vground {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

Segment sample_training_window(const Segment& gt, int w, int video_len, Rng& rng) {
    if (w > video_len) throw ConfigError("sample_training_window: window longer than the video");
    if (gt.start < 0 || gt.end >= video_len || gt.start > gt.end)
        throw ContractError("sample_training_window: ground truth outside the video");
    int lo, hi;
    if (gt.length() <= w) {
        lo = std::max(0, gt.end - w + 1);
        hi = std::min(gt.start, video_len - w);
    } else {
        lo = std::max(0, gt.start - w + 1);
        hi = std::min(gt.end, video_len - w);
    }
    const int start = rand_int(rng, lo, hi);
    return Segment{start, start + w - 1};
}

// ---------------------------------------------------------------------------
// BatchStream
// ---------------------------------------------------------------------------

BatchStream::BatchStream(std::map<Task, std::vector<TrainSample>> per_task, SamplingMode mode, int batch_size, Rng rng)
    : per_task_(std::move(per_task)), mode_(mode), batch_size_(batch_size), rng_(rng) {
    if (batch_size_ < 1) throw ConfigError("batch size must be >= 1");
    if (per_task_.empty()) throw ConfigError("batch stream needs at least one task");
    for (Task t : all_tasks()) {
        auto it = per_task_.find(t);
        if (it == per_task_.end()) continue;
        if (it->second.empty()) throw ConfigError(std::string("empty dataset for task ") + task_name(t));
        task_order_.push_back(t);
        order_[t].resize(it->second.size());
        std::iota(order_[t].begin(), order_[t].end(), 0);
        std::shuffle(order_[t].begin(), order_[t].end(), rng_);
        pos_[t] = 0;
    }
    cursor_ = task_order_.size() - 1;  // so the first draw lands on task 0

    for (const auto& [task, samples] : per_task_)
        for (const auto& s : samples) concat_.push_back(s);
    concat_order_.resize(concat_.size());
    std::iota(concat_order_.begin(), concat_order_.end(), 0);
    if (mode_ == SamplingMode::Concat) std::shuffle(concat_order_.begin(), concat_order_.end(), rng_);
}

int BatchStream::batches_per_pass() const {
    return static_cast<int>((concat_.size() + batch_size_ - 1) / static_cast<std::size_t>(batch_size_));
}

std::vector<TrainSample> BatchStream::next() {
    return mode_ == SamplingMode::RoundRobin ? draw_round_robin() : draw_concat();
}

std::vector<TrainSample> BatchStream::draw_round_robin() {
    cursor_ = (cursor_ + 1) % task_order_.size();
    const Task task = task_order_[cursor_];
    auto& order = order_[task];
    auto& pos = pos_[task];
    const auto& samples = per_task_[task];
    std::vector<TrainSample> batch;
    batch.reserve(static_cast<std::size_t>(batch_size_));
    for (int i = 0; i < batch_size_; ++i) {
        if (pos == order.size()) {
            std::shuffle(order.begin(), order.end(), rng_);
            pos = 0;
        }
        batch.push_back(samples[order[pos++]]);
    }
    return batch;
}

std::vector<TrainSample> BatchStream::draw_concat() {
    std::vector<TrainSample> batch;
    batch.reserve(static_cast<std::size_t>(batch_size_));
    for (int i = 0; i < batch_size_; ++i) {
        if (concat_pos_ == concat_order_.size()) {
            std::shuffle(concat_order_.begin(), concat_order_.end(), rng_);
            concat_pos_ = 0;
        }
        batch.push_back(concat_[concat_order_[concat_pos_++]]);
    }
    return batch;
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

AdamW::AdamW(std::vector<NamedParam<float>>& params, const TrainConfig& cfg)
    : params_(&params),
      lr_backbone_(cfg.lr_backbone),
      lr_text_(cfg.lr_text),
      lr_rest_(cfg.lr_rest),
      weight_decay_(cfg.weight_decay) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        m_[i].assign(static_cast<std::size_t>(params[i].value.size()), 0.0f);
        v_[i].assign(static_cast<std::size_t>(params[i].value.size()), 0.0f);
    }
}

double AdamW::group_lr(ParamGroup g) const {
    switch (g) {
        case ParamGroup::Backbone: return lr_backbone_;
        case ParamGroup::Text: return lr_text_;
        case ParamGroup::Rest: return lr_rest_;
    }
    return lr_rest_;
}

void AdamW::step(const std::vector<std::vector<float>>& grads, double lr_scale) {
    constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_->size(); ++i) {
        auto& p = (*params_)[i];
        const double lr = group_lr(p.group) * lr_scale;
        auto values = p.value.mutable_data();
        const auto& g = grads[i];
        for (std::size_t j = 0; j < values.size(); ++j) {
            const double gj = g[j];
            m_[i][j] = static_cast<float>(beta1 * m_[i][j] + (1.0 - beta1) * gj);
            v_[i][j] = static_cast<float>(beta2 * v_[i][j] + (1.0 - beta2) * gj * gj);
            const double mhat = m_[i][j] / bc1;
            const double vhat = v_[i][j] / bc2;
            values[j] = static_cast<float>(values[j] - lr * (mhat / (std::sqrt(vhat) + eps)) -
                                           lr * weight_decay_ * values[j]);
        }
    }
}

double lr_scale_for_epoch(const TrainConfig& cfg, int epoch) {
    return 1.0 / std::pow(cfg.lr_drop_factor, epoch / cfg.lr_drop_every);
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

namespace {

struct SampleJob {
    Task task;
    std::string annotation_id;
    VideoTensor window;
    Query query;
    WindowTargets<float> targets;
};

SampleJob prepare_sample(const TrainSample& sample, const ModelConfig& mcfg, const TrainConfig& tcfg, Rng& rng) {
    const Annotation& ann = *sample.annotation;
    SampleJob job;
    job.task = ann.task;
    job.annotation_id = ann.id;

    const int stride = tcfg.task_stride.at(ann.task);
    VideoTensor sub = subsample_video(sample.episode->video, stride);

    // One ground-truth instance per draw.
    const Segment seg = ann.segments.size() == 1
                            ? ann.segments.front()
                            : ann.segments[static_cast<std::size_t>(
                                  rand_int(rng, 0, static_cast<int>(ann.segments.size()) - 1))];
    const Segment seg_sub{seg.start / stride, seg.end / stride};

    // Short videos at large strides can undershoot the configured window.
    const int w_eff = std::min(mcfg.window.at(ann.task), sub.length());
    const Segment win = sample_training_window(seg_sub, w_eff, sub.length(), rng);
    job.window = crop_window(sub, win.start, w_eff);

    const Segment local{seg_sub.start - win.start, seg_sub.end - win.start};
    if (ann.task == Task::VQ2D) {
        std::vector<Box> boxes(static_cast<std::size_t>(seg_sub.length()));
        for (int i = 0; i < seg_sub.length(); ++i) {
            const int orig = std::clamp((seg_sub.start + i) * stride, seg.start, seg.end);
            boxes[static_cast<std::size_t>(i)] = ann.boxes[static_cast<std::size_t>(orig - seg.start)];
        }
        job.targets = build_window_targets<float>(local, w_eff, &boxes);
    } else {
        job.targets = build_window_targets<float>(local, w_eff, nullptr);
    }

    job.query = ann.query;
    if (ann.task == Task::MQ && mcfg.onehot_mq) {
        job.query = Query{};
        job.query.kind = QueryKind::Category;
        job.query.category = ann.category_id;
    }
    return job;
}

std::string batch_task_label(const std::vector<SampleJob>& jobs) {
    const Task first = jobs.front().task;
    for (const auto& j : jobs)
        if (j.task != first) return "mixed";
    return task_name(first);
}

}  // namespace

TrainResult train(Model<float>& model, const Dataset& data, const TrainConfig& cfg, const LossWeights& weights,
                  const std::string& out_dir) {
    cfg.validate();
    fs::create_directories(fs::path(out_dir) / "checkpoints");

    std::map<Task, std::vector<TrainSample>> per_task;
    for (Task t : cfg.tasks) per_task[t] = {};
    for (const auto& ep : data.episodes) {
        if (ep.split != "train") continue;
        for (const auto& ann : ep.annotations) {
            auto it = per_task.find(ann.task);
            if (it != per_task.end()) it->second.push_back(TrainSample{&ep, &ann});
        }
    }
    for (const auto& [task, samples] : per_task)
        if (samples.empty()) throw ConfigError(std::string("no training samples for task ") + task_name(task));

    Rng rng(mix_seed(cfg.seed, 0x7ea1));
    BatchStream stream(per_task, cfg.sampling, cfg.batch_size, Rng(mix_seed(cfg.seed, 0x57e9)));
    AdamW optimizer(model.parameters(), cfg);

    std::ofstream log(fs::path(out_dir) / "train_log.jsonl");
    if (!log) throw IoError("cannot write training log under " + out_dir);

    const int steps_per_epoch = stream.batches_per_pass();
    const int n_params = static_cast<int>(model.parameters().size());
    const int workers = std::max(1, std::min(cfg.threads, cfg.batch_size));

    TrainResult result;
    int global_step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr_scale = lr_scale_for_epoch(cfg, epoch);
        double epoch_loss = 0;
        for (int step = 0; step < steps_per_epoch; ++step, ++global_step) {
            const std::vector<TrainSample> batch = stream.next();
            std::vector<SampleJob> jobs;
            jobs.reserve(batch.size());
            for (const auto& s : batch) jobs.push_back(prepare_sample(s, model.config(), cfg, rng));

            // Shards run independent tapes; the reduction below is in fixed
            // sample order so results do not depend on the thread count.
            std::vector<std::vector<Array<float>>> shard_grads(jobs.size());
            std::vector<LossBreakdown> shard_bd(jobs.size());
            auto run_shard = [&](int tid) {
                for (std::size_t i = static_cast<std::size_t>(tid); i < jobs.size();
                     i += static_cast<std::size_t>(workers)) {
                    Tape<float> tape;
                    TapeScope<float> scope(tape);
                    auto fwd = model.forward(jobs[i].window, jobs[i].query);
                    auto [total, bd] = task_loss(jobs[i].task, fwd.preds, fwd.attention, jobs[i].targets, weights);
                    tape.backward(total);
                    shard_bd[i] = bd;
                    shard_grads[i].reserve(static_cast<std::size_t>(n_params));
                    for (const auto& p : model.parameters()) shard_grads[i].push_back(tape.grad(p.value));
                }
            };
            if (workers == 1) {
                run_shard(0);
            } else {
                std::vector<std::thread> pool;
                for (int tid = 0; tid < workers; ++tid) pool.emplace_back(run_shard, tid);
                for (auto& th : pool) th.join();
            }

            LossBreakdown mean_bd;
            const double inv_b = 1.0 / static_cast<double>(jobs.size());
            for (const auto& bd : shard_bd) {
                mean_bd.total += bd.total * inv_b;
                mean_bd.kl_s += bd.kl_s * inv_b;
                mean_bd.kl_e += bd.kl_e * inv_b;
                mean_bd.bce += bd.bce * inv_b;
                mean_bd.att += bd.att * inv_b;
                mean_bd.l1 += bd.l1 * inv_b;
                mean_bd.giou += bd.giou * inv_b;
            }

            if (!std::isfinite(mean_bd.total)) {
                ordered_json dump;
                dump["step"] = global_step;
                dump["epoch"] = epoch;
                ordered_json items = ordered_json::array();
                for (std::size_t i = 0; i < jobs.size(); ++i)
                    items.push_back({{"annotation", jobs[i].annotation_id}, {"total", shard_bd[i].total}});
                dump["batch"] = std::move(items);
                std::ofstream dump_out(fs::path(out_dir) / "nan_dump.json");
                dump_out << dump.dump(2) << "\n";
                throw RuntimeFailure("training aborted: non-finite loss at step " + std::to_string(global_step) +
                                     " (diagnostic dump written to nan_dump.json)");
            }

            std::vector<std::vector<float>> grads(static_cast<std::size_t>(n_params));
            for (int pi = 0; pi < n_params; ++pi)
                grads[static_cast<std::size_t>(pi)].assign(
                    static_cast<std::size_t>(model.parameters()[static_cast<std::size_t>(pi)].value.size()), 0.0f);
            for (std::size_t i = 0; i < jobs.size(); ++i)
                for (int pi = 0; pi < n_params; ++pi) {
                    auto g = shard_grads[i][static_cast<std::size_t>(pi)].data();
                    auto& acc = grads[static_cast<std::size_t>(pi)];
                    for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += static_cast<float>(g[j] * inv_b);
                }
            optimizer.step(grads, lr_scale);

            ordered_json line;
            line["step"] = global_step;
            line["epoch"] = epoch;
            line["task"] = batch_task_label(jobs);
            line["total"] = mean_bd.total;
            line["kl_s"] = mean_bd.kl_s;
            line["kl_e"] = mean_bd.kl_e;
            line["bce"] = mean_bd.bce;
            line["att"] = mean_bd.att;
            line["l1"] = mean_bd.l1;
            line["giou"] = mean_bd.giou;
            line["lr"] = optimizer.group_lr(ParamGroup::Rest) * lr_scale;
            log << line.dump() << "\n";
            epoch_loss += mean_bd.total;
        }
        result.epoch_mean_loss.push_back(epoch_loss / steps_per_epoch);

        if ((epoch + 1) % cfg.checkpoint_every == 0 || epoch + 1 == cfg.epochs) {
            char name[48];
            std::snprintf(name, sizeof(name), "checkpoints/epoch_%03d.vgc", epoch + 1);
            save_checkpoint(model, (fs::path(out_dir) / name).string());
        }
    }
    log.flush();

    result.steps = global_step;
    result.final_checkpoint = (fs::path(out_dir) / "checkpoint.vgc").string();
    save_checkpoint(model, result.final_checkpoint);

    ordered_json summary;
    summary["epochs"] = cfg.epochs;
    summary["steps"] = result.steps;
    summary["epoch_mean_loss"] = result.epoch_mean_loss;
    summary["final_checkpoint"] = "checkpoint.vgc";
    std::ofstream summary_out(fs::path(out_dir) / "train_summary.json");
    summary_out << summary.dump(2) << "\n";

    return result;
}

}  // namespace vground

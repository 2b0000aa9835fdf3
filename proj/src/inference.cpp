#include "vground/inference.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <thread>

#include <json.hpp>

#include "vground/metrics.hpp"

namespace vground {

using nlohmann::ordered_json;

std::vector<std::pair<int, int>> slide_windows(int total, int window, int step) {
    if (total < 1 || window < 1 || step < 1) throw ContractError("slide_windows: bad arguments");
    if (window >= total) return {{0, total}};
    std::vector<std::pair<int, int>> out;
    int start = 0;
    for (; start + window < total; start += step) out.emplace_back(start, start + window);
    const int last = std::min(start, total - window);
    if (out.empty() || out.back().first != last) out.emplace_back(last, last + window);
    return out;
}

VideoPredictions accumulate_windows(int total, int window, int step,
                                    const std::function<WindowOutput(int, int)>& forward) {
    VideoPredictions acc;
    acc.boxes.assign(static_cast<std::size_t>(total), Box{});
    acc.start_logits.assign(static_cast<std::size_t>(total), 0.0f);
    acc.end_logits.assign(static_cast<std::size_t>(total), 0.0f);
    acc.foreground.assign(static_cast<std::size_t>(total), 0.0f);
    std::vector<int> cover(static_cast<std::size_t>(total), 0);

    for (const auto& [w_start, w_end] : slide_windows(total, window, step)) {
        const WindowOutput out = forward(w_start, w_end - w_start);
        for (int i = 0; i < w_end - w_start; ++i) {
            const std::size_t t = static_cast<std::size_t>(w_start + i);
            const std::size_t j = static_cast<std::size_t>(i);
            acc.boxes[t].cx += out.boxes[j].cx;
            acc.boxes[t].cy += out.boxes[j].cy;
            acc.boxes[t].w += out.boxes[j].w;
            acc.boxes[t].h += out.boxes[j].h;
            acc.start_logits[t] += out.start_logits[j];
            acc.end_logits[t] += out.end_logits[j];
            acc.foreground[t] += out.foreground[j];
            ++cover[t];
        }
    }
    for (int t = 0; t < total; ++t) {
        const float n = static_cast<float>(cover[static_cast<std::size_t>(t)]);
        acc.boxes[static_cast<std::size_t>(t)].cx /= n;
        acc.boxes[static_cast<std::size_t>(t)].cy /= n;
        acc.boxes[static_cast<std::size_t>(t)].w /= n;
        acc.boxes[static_cast<std::size_t>(t)].h /= n;
        acc.start_logits[static_cast<std::size_t>(t)] /= n;
        acc.end_logits[static_cast<std::size_t>(t)] /= n;
        acc.foreground[static_cast<std::size_t>(t)] /= n;
    }
    return acc;
}

VideoPredictions accumulate(const Model<float>& model, const VideoTensor& video, const Query& query, int window,
                            int step) {
    return accumulate_windows(video.length(), window, step, [&](int start, int len) {
        VideoTensor win = crop_window(video, start, len);
        ForwardResult<float> fwd = model.forward(win, query);
        WindowOutput out;
        out.boxes.resize(static_cast<std::size_t>(len));
        out.start_logits.resize(static_cast<std::size_t>(len));
        out.end_logits.resize(static_cast<std::size_t>(len));
        out.foreground.resize(static_cast<std::size_t>(len));
        for (int i = 0; i < len; ++i) {
            out.boxes[static_cast<std::size_t>(i)] = Box{fwd.preds.boxes.at(i, 0), fwd.preds.boxes.at(i, 1),
                                                         fwd.preds.boxes.at(i, 2), fwd.preds.boxes.at(i, 3)};
            out.start_logits[static_cast<std::size_t>(i)] = fwd.preds.start_logits.at(i);
            out.end_logits[static_cast<std::size_t>(i)] = fwd.preds.end_logits.at(i);
            out.foreground[static_cast<std::size_t>(i)] = fwd.preds.foreground.at(i);
        }
        return out;
    });
}

Segment remap_segment(const Segment& sub, int stride, int total) {
    return Segment{sub.start * stride, std::min(sub.end * stride + stride - 1, total - 1)};
}

std::vector<float> median_filter(const std::vector<float>& scores, int kernel) {
    if (kernel < 1 || kernel % 2 == 0) throw ConfigError("median_filter: kernel must be odd");
    const int n = static_cast<int>(scores.size());
    const int half = kernel / 2;
    std::vector<float> out(scores.size());
    std::vector<float> window(static_cast<std::size_t>(kernel));
    for (int i = 0; i < n; ++i) {
        for (int k = -half; k <= half; ++k) {
            const int j = i + k;
            window[static_cast<std::size_t>(k + half)] =
                (j >= 0 && j < n) ? scores[static_cast<std::size_t>(j)] : 0.0f;
        }
        std::nth_element(window.begin(), window.begin() + half, window.end());
        out[static_cast<std::size_t>(i)] = window[static_cast<std::size_t>(half)];
    }
    return out;
}

std::vector<std::pair<int, float>> find_peaks(const std::vector<float>& scores, double thr, int max_peaks) {
    std::vector<std::pair<int, float>> peaks;
    const int n = static_cast<int>(scores.size());
    int i = 0;
    while (i < n) {
        if (scores[static_cast<std::size_t>(i)] <= thr) {
            ++i;
            continue;
        }
        int best = i;
        int j = i;
        while (j < n && scores[static_cast<std::size_t>(j)] > thr) {
            if (scores[static_cast<std::size_t>(j)] > scores[static_cast<std::size_t>(best)]) best = j;
            ++j;
        }
        peaks.emplace_back(best, scores[static_cast<std::size_t>(best)]);
        i = j;
    }
    if (static_cast<int>(peaks.size()) > max_peaks) {
        // Keep the max_peaks strongest, then restore index order.
        std::vector<std::pair<int, float>> by_score = peaks;
        std::stable_sort(by_score.begin(), by_score.end(),
                         [](const auto& a, const auto& b) { return a.second > b.second; });
        by_score.resize(static_cast<std::size_t>(max_peaks));
        std::sort(by_score.begin(), by_score.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
        peaks = std::move(by_score);
    }
    return peaks;
}

namespace {

std::vector<double> masked_softmax(const std::vector<float>& logits, int lo, int hi) {
    double mx = logits[static_cast<std::size_t>(lo)];
    for (int i = lo; i <= hi; ++i) mx = std::max(mx, static_cast<double>(logits[static_cast<std::size_t>(i)]));
    double z = 0;
    std::vector<double> p(static_cast<std::size_t>(hi - lo + 1));
    for (int i = lo; i <= hi; ++i) {
        p[static_cast<std::size_t>(i - lo)] = std::exp(static_cast<double>(logits[static_cast<std::size_t>(i)]) - mx);
        z += p[static_cast<std::size_t>(i - lo)];
    }
    for (auto& v : p) v /= z;
    return p;
}

std::vector<Box> boxes_in_range(const VideoPredictions& preds, const Segment& seg) {
    std::vector<Box> out;
    out.reserve(static_cast<std::size_t>(seg.length()));
    for (int t = seg.start; t <= seg.end; ++t) out.push_back(preds.boxes[static_cast<std::size_t>(t)]);
    return out;
}

}  // namespace

Candidate decode_segment_at_peak(const VideoPredictions& preds, int peak, int span, bool attach_boxes) {
    const int total = preds.length();
    if (peak < 0 || peak >= total) throw ContractError("decode_segment_at_peak: peak outside the video");
    const int lo = std::max(0, peak - span / 2);
    const int hi = std::min(total - 1, lo + span - 1);

    const std::vector<double> ps = masked_softmax(preds.start_logits, lo, hi);
    const std::vector<double> pe = masked_softmax(preds.end_logits, lo, hi);
    const int n = hi - lo + 1;

    // Best j >= i via suffix argmax of the end distribution, earliest on ties.
    std::vector<int> best_end(static_cast<std::size_t>(n));
    best_end[static_cast<std::size_t>(n - 1)] = n - 1;
    for (int j = n - 2; j >= 0; --j) {
        const int next = best_end[static_cast<std::size_t>(j + 1)];
        best_end[static_cast<std::size_t>(j)] = pe[static_cast<std::size_t>(j)] >= pe[static_cast<std::size_t>(next)]
                                                    ? j
                                                    : next;
    }
    int bi = 0, bj = best_end[0];
    double best = ps[0] * pe[static_cast<std::size_t>(bj)];
    for (int i = 1; i < n; ++i) {
        const int j = best_end[static_cast<std::size_t>(i)];
        const double v = ps[static_cast<std::size_t>(i)] * pe[static_cast<std::size_t>(j)];
        if (v > best) {
            best = v;
            bi = i;
            bj = j;
        }
    }

    Candidate cand;
    cand.segment = Segment{lo + bi, lo + bj};
    cand.score = best;
    if (attach_boxes) cand.boxes = boxes_in_range(preds, cand.segment);
    return cand;
}

ResponseTrack infer_vq2d(const VideoPredictions& preds, const InferenceConfig& cfg) {
    ResponseTrack track;
    track.kind = ResponseTrack::Kind::Tube;
    const int total = preds.length();

    if (!cfg.use_foreground_head) {
        // Whole-video decode, no peak gating.
        Candidate cand = decode_segment_at_peak(preds, total / 2, 2 * total, true);
        track.items.push_back(std::move(cand));
        return track;
    }

    const std::vector<float> filtered = median_filter(preds.foreground, cfg.medfilt_kernel);
    auto peaks = find_peaks(filtered, cfg.peak_thr_vq, cfg.max_peaks);
    int peak;
    float peak_score;
    if (!peaks.empty()) {
        peak = peaks.back().first;  // the most recent one
        peak_score = peaks.back().second;
    } else {
        // Flat score track: fall back to the global filtered maximum.
        peak = static_cast<int>(std::max_element(filtered.begin(), filtered.end()) - filtered.begin());
        peak_score = filtered[static_cast<std::size_t>(peak)];
    }
    Candidate cand = decode_segment_at_peak(preds, peak, cfg.vq_peak_window, true);
    cand.score = peak_score;
    track.items.push_back(std::move(cand));
    return track;
}

ResponseTrack infer_temporal(const VideoPredictions& preds, const InferenceConfig& cfg, int decode_span) {
    ResponseTrack track;
    track.kind = ResponseTrack::Kind::Segments;
    const std::vector<float> filtered = median_filter(preds.foreground, cfg.medfilt_kernel);
    for (const auto& [peak, score] : find_peaks(filtered, cfg.peak_thr_temporal, cfg.max_peaks)) {
        Candidate cand = decode_segment_at_peak(preds, peak, decode_span, cfg.emit_boxes_for_temporal);
        cand.score = score;
        track.items.push_back(std::move(cand));
    }
    std::stable_sort(track.items.begin(), track.items.end(), [](const Candidate& a, const Candidate& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.segment.start < b.segment.start;
    });
    return track;
}

std::vector<Candidate> temporal_nms(std::vector<Candidate> candidates, double thr) {
    std::stable_sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.segment.start < b.segment.start;
    });
    std::vector<Candidate> kept;
    for (auto& cand : candidates) {
        bool suppressed = false;
        for (const auto& k : kept)
            if (temporal_iou(cand.segment, k.segment) > thr) {
                suppressed = true;
                break;
            }
        if (!suppressed) kept.push_back(std::move(cand));
    }
    return kept;
}

namespace {

// Candidate decoded on the stride-r subsampled track, remapped to original
// frame indices. A one-sample segment covers its whole stride group.
Candidate remap_candidate(Candidate cand, int stride, int total, const VideoPredictions* sub_preds,
                          bool attach_boxes) {
    if (stride == 1) return cand;
    Candidate out;
    out.score = cand.score;
    out.segment = remap_segment(cand.segment, stride, total);
    if (attach_boxes) {
        out.boxes.reserve(static_cast<std::size_t>(out.segment.length()));
        for (int f = out.segment.start; f <= out.segment.end; ++f) {
            const int sub_idx = std::min(f / stride, sub_preds->length() - 1);
            out.boxes.push_back(sub_preds->boxes[static_cast<std::size_t>(sub_idx)]);
        }
    }
    return out;
}

}  // namespace

ResponseTrack multiscale_infer(const Model<float>& model, const VideoTensor& video, const Query& query, Task task,
                               const InferenceConfig& cfg) {
    cfg.validate();
    const int base_window = cfg.window > 0 ? cfg.window : model.config().window.at(task);

    if (task == Task::VQ2D) {
        const int w = std::min(base_window, video.length());
        const int step = cfg.step > 0 ? std::min(cfg.step, w) : std::max(1, w / 2);
        VideoPredictions preds = accumulate(model, video, query, w, step);
        return infer_vq2d(preds, cfg);
    }

    std::vector<Candidate> pooled;
    for (int stride : cfg.scales) {
        VideoTensor sub = subsample_video(video, stride);
        const int w = std::min(base_window, sub.length());
        const int step = cfg.step > 0 ? std::min(cfg.step, w) : std::max(1, w / 2);
        VideoPredictions preds = accumulate(model, sub, query, w, step);
        ResponseTrack per_scale = infer_temporal(preds, cfg, w);
        for (auto& cand : per_scale.items)
            pooled.push_back(
                remap_candidate(std::move(cand), stride, video.length(), &preds, cfg.emit_boxes_for_temporal));
    }

    ResponseTrack track;
    track.kind = ResponseTrack::Kind::Segments;
    track.items = temporal_nms(std::move(pooled), cfg.nms_thr);
    return track;
}

// ---------------------------------------------------------------------------
// Dataset-level inference
// ---------------------------------------------------------------------------

std::vector<PredictionRecord> run_inference(const Model<float>& model, const Dataset& data, const std::string& split,
                                            const InferenceConfig& cfg, const std::vector<Task>& tasks, int threads) {
    struct Job {
        const Episode* episode;
        const Annotation* annotation;
    };
    std::vector<Job> jobs;
    for (const Episode* ep : data.split(split))
        for (const Annotation& ann : ep->annotations)
            if (std::find(tasks.begin(), tasks.end(), ann.task) != tasks.end()) jobs.push_back({ep, &ann});

    std::vector<PredictionRecord> records(jobs.size());
    auto run = [&](int tid, int workers) {
        for (std::size_t i = static_cast<std::size_t>(tid); i < jobs.size(); i += static_cast<std::size_t>(workers)) {
            const Annotation& ann = *jobs[i].annotation;
            VideoTensor video = jobs[i].episode->video;
            // VQ2D retrieval looks only at frames before the query frame.
            if (ann.task == Task::VQ2D && ann.query_frame >= 0 && ann.query_frame + 1 < video.length())
                video = crop_window(video, 0, ann.query_frame + 1);

            Query query = ann.query;
            if (ann.task == Task::MQ && model.config().onehot_mq) {
                query = Query{};
                query.kind = QueryKind::Category;
                query.category = ann.category_id;
            }

            PredictionRecord rec;
            rec.annotation_id = ann.id;
            rec.video_id = ann.video_id;
            rec.task = ann.task;
            rec.track = multiscale_infer(model, video, query, ann.task, cfg);
            records[i] = std::move(rec);
        }
    };
    const int workers = std::max(1, threads);
    if (workers == 1 || jobs.size() <= 1) {
        run(0, 1);
    } else {
        std::vector<std::thread> pool;
        for (int tid = 0; tid < workers; ++tid) pool.emplace_back(run, tid, workers);
        for (auto& th : pool) th.join();
    }
    return records;
}

void write_predictions(const std::vector<PredictionRecord>& records, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write predictions: " + path);
    for (const auto& rec : records) {
        ordered_json j;
        j["annotation_id"] = rec.annotation_id;
        j["video_id"] = rec.video_id;
        j["task"] = task_name(rec.task);
        j["kind"] = rec.track.kind == ResponseTrack::Kind::Tube ? "tube" : "segments";
        ordered_json segs = ordered_json::array();
        for (const auto& cand : rec.track.items) segs.push_back({cand.segment.start, cand.segment.end, cand.score});
        j["segments"] = std::move(segs);
        bool any_boxes = false;
        for (const auto& cand : rec.track.items) any_boxes = any_boxes || !cand.boxes.empty();
        if (any_boxes) {
            ordered_json all = ordered_json::array();
            for (const auto& cand : rec.track.items) {
                ordered_json per = ordered_json::array();
                for (const auto& b : cand.boxes) per.push_back({b.cx, b.cy, b.w, b.h});
                all.push_back(std::move(per));
            }
            j["boxes"] = std::move(all);
        }
        out << j.dump() << "\n";
    }
}

std::vector<PredictionRecord> read_predictions(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open predictions: " + path);
    std::vector<PredictionRecord> records;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        ordered_json j;
        try {
            j = ordered_json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw IoError("predictions line " + std::to_string(line_no) + " is not valid JSON: " + e.what());
        }
        PredictionRecord rec;
        rec.annotation_id = j.at("annotation_id").get<std::string>();
        rec.video_id = j.at("video_id").get<std::string>();
        rec.task = task_from_name(j.at("task").get<std::string>());
        rec.track.kind =
            j.at("kind").get<std::string>() == "tube" ? ResponseTrack::Kind::Tube : ResponseTrack::Kind::Segments;
        for (const auto& s : j.at("segments")) {
            Candidate cand;
            cand.segment = Segment{s.at(0).get<int>(), s.at(1).get<int>()};
            cand.score = s.at(2).get<double>();
            rec.track.items.push_back(std::move(cand));
        }
        if (j.contains("boxes")) {
            const auto& all = j.at("boxes");
            for (std::size_t i = 0; i < all.size() && i < rec.track.items.size(); ++i)
                for (const auto& b : all[i])
                    rec.track.items[i].boxes.push_back(
                        Box{b.at(0).get<float>(), b.at(1).get<float>(), b.at(2).get<float>(), b.at(3).get<float>()});
        }
        records.push_back(std::move(rec));
    }
    return records;
}

}  // namespace vground

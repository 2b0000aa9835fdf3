#include "vground/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

namespace vground {

using nlohmann::ordered_json;

double temporal_iou(const Segment& a, const Segment& b) {
    const int inter = std::min(a.end, b.end) - std::max(a.start, b.start) + 1;
    if (inter <= 0) return 0.0;
    const int uni = a.length() + b.length() - inter;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

namespace {

double box_area(const Box& b) { return static_cast<double>(b.w) * static_cast<double>(b.h); }

double box_intersection(const Box& a, const Box& b) {
    const double iw = std::max(0.0, std::min(a.cx + a.w / 2.0, b.cx + b.w / 2.0) -
                                        std::max(a.cx - a.w / 2.0, b.cx - b.w / 2.0));
    const double ih = std::max(0.0, std::min(a.cy + a.h / 2.0, b.cy + b.h / 2.0) -
                                        std::max(a.cy - a.h / 2.0, b.cy - b.h / 2.0));
    return iw * ih;
}

const Box* tube_box_at(const Tube& tube, int frame) {
    if (frame < tube.segment.start || frame > tube.segment.end) return nullptr;
    return &tube.boxes[static_cast<std::size_t>(frame - tube.segment.start)];
}

}  // namespace

double st_tube_iou(const Tube& pred, const Tube& gt) {
    const int lo = std::min(pred.segment.start, gt.segment.start);
    const int hi = std::max(pred.segment.end, gt.segment.end);
    double inter = 0, uni = 0;
    for (int t = lo; t <= hi; ++t) {
        const Box* p = tube_box_at(pred, t);
        const Box* g = tube_box_at(gt, t);
        if (p != nullptr && g != nullptr) {
            const double bi = box_intersection(*p, *g);
            inter += bi;
            uni += box_area(*p) + box_area(*g) - bi;
        } else if (p != nullptr) {
            uni += box_area(*p);
        } else if (g != nullptr) {
            uni += box_area(*g);
        }
    }
    return uni > 0.0 ? inter / uni : 0.0;
}

double average_precision(const std::vector<ApInstance>& samples, double thr) {
    struct Pooled {
        int sample;
        int pred;
        double score;
    };
    std::vector<Pooled> pooled;
    int total_gt = 0;
    for (std::size_t s = 0; s < samples.size(); ++s) {
        total_gt += samples[s].gt_count;
        for (std::size_t p = 0; p < samples[s].scores.size(); ++p)
            pooled.push_back({static_cast<int>(s), static_cast<int>(p), samples[s].scores[p]});
    }
    if (total_gt == 0) return 0.0;
    std::stable_sort(pooled.begin(), pooled.end(), [](const Pooled& a, const Pooled& b) { return a.score > b.score; });

    std::vector<std::vector<bool>> matched(samples.size());
    for (std::size_t s = 0; s < samples.size(); ++s)
        matched[s].assign(static_cast<std::size_t>(samples[s].gt_count), false);

    double ap = 0.0;
    int tp = 0;
    int seen = 0;
    for (const auto& entry : pooled) {
        ++seen;
        const auto& inst = samples[static_cast<std::size_t>(entry.sample)];
        int best_gt = -1;
        double best_iou = 0.0;
        for (int g = 0; g < inst.gt_count; ++g) {
            if (matched[static_cast<std::size_t>(entry.sample)][static_cast<std::size_t>(g)]) continue;
            const double iou = inst.iou[static_cast<std::size_t>(entry.pred)][static_cast<std::size_t>(g)];
            if (iou >= thr && iou > best_iou) {
                best_iou = iou;
                best_gt = g;
            }
        }
        if (best_gt >= 0) {
            matched[static_cast<std::size_t>(entry.sample)][static_cast<std::size_t>(best_gt)] = true;
            ++tp;
            // Recall rises by 1/total_gt; precision is tp/seen here.
            ap += (1.0 / total_gt) * (static_cast<double>(tp) / seen);
        }
    }
    return ap;
}

double recovery(const Tube& pred, const Tube& gt, double box_iou_thr) {
    if (pred.segment.length() <= 0 || pred.boxes.empty()) return 0.0;
    int good = 0;
    for (int t = pred.segment.start; t <= pred.segment.end; ++t) {
        const Box* p = tube_box_at(pred, t);
        const Box* g = tube_box_at(gt, t);
        if (p != nullptr && g != nullptr && box_iou(*p, *g) >= box_iou_thr) ++good;
    }
    return 100.0 * static_cast<double>(good) / static_cast<double>(pred.segment.length());
}

bool success(const Tube& pred, const Tube& gt, double min_st_iou) { return st_tube_iou(pred, gt) >= min_st_iou; }

double recall_at_k_single(const std::vector<std::vector<Segment>>& ranked, const std::vector<Segment>& gt, int k,
                          double m) {
    if (k < 1) throw ConfigError("recall@k needs k >= 1");
    if (ranked.size() != gt.size()) throw ContractError("recall_at_k_single: sample count mismatch");
    if (ranked.empty()) return 0.0;
    int hits = 0;
    for (std::size_t s = 0; s < ranked.size(); ++s) {
        const auto& preds = ranked[s];
        const int top = std::min<int>(k, static_cast<int>(preds.size()));
        for (int i = 0; i < top; ++i)
            if (temporal_iou(preds[static_cast<std::size_t>(i)], gt[s]) >= m) {
                ++hits;
                break;
            }
    }
    return 100.0 * static_cast<double>(hits) / static_cast<double>(ranked.size());
}

double recall_at_k_instances(const std::vector<std::vector<Segment>>& ranked,
                             const std::vector<std::vector<Segment>>& gts, int k, double m) {
    if (k < 1) throw ConfigError("recall@k needs k >= 1");
    if (ranked.size() != gts.size()) throw ContractError("recall_at_k_instances: sample count mismatch");
    int instances = 0, hits = 0;
    for (std::size_t s = 0; s < ranked.size(); ++s) {
        const auto& preds = ranked[s];
        const int top = std::min<int>(k, static_cast<int>(preds.size()));
        for (const Segment& gt : gts[s]) {
            ++instances;
            for (int i = 0; i < top; ++i)
                if (temporal_iou(preds[static_cast<std::size_t>(i)], gt) >= m) {
                    ++hits;
                    break;
                }
        }
    }
    return instances == 0 ? 0.0 : 100.0 * static_cast<double>(hits) / static_cast<double>(instances);
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

double EvalReport::get(const std::string& task, const std::string& metric) const {
    for (const auto& section : sections)
        if (section.task == task)
            for (const auto& [name, value] : section.values)
                if (name == metric) return value;
    throw ContractError("metric not in report: " + task + "/" + metric);
}

std::string EvalReport::to_json_text() const {
    ordered_json j;
    for (const auto& section : sections) {
        ordered_json vals;
        for (const auto& [name, value] : section.values) vals[name] = value;
        j[section.task] = std::move(vals);
    }
    return j.dump(2);
}

std::string EvalReport::to_table_text() const {
    std::ostringstream out;
    for (const auto& section : sections) {
        std::size_t width = 0;
        for (const auto& [name, value] : section.values) width = std::max(width, name.size());
        out << section.task << "\n";
        for (const auto& [name, value] : section.values) {
            out << "  " << name;
            for (std::size_t i = name.size(); i < width + 2; ++i) out << ' ';
            char buf[32];
            std::snprintf(buf, sizeof(buf), "%.4f", value);
            out << buf << "\n";
        }
    }
    return out.str();
}

EvalReport EvalReport::mean(const std::vector<EvalReport>& reports) {
    if (reports.empty()) return {};
    EvalReport out = reports.front();
    for (std::size_t r = 1; r < reports.size(); ++r)
        for (std::size_t s = 0; s < out.sections.size(); ++s)
            for (std::size_t v = 0; v < out.sections[s].values.size(); ++v)
                out.sections[s].values[v].second += reports[r].sections[s].values[v].second;
    for (auto& section : out.sections)
        for (auto& [name, value] : section.values) value /= static_cast<double>(reports.size());
    return out;
}

// ---------------------------------------------------------------------------
// Dataset evaluation
// ---------------------------------------------------------------------------

namespace {

std::string metric_pct(double thr) {  // 0.25 -> "25"
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%g", thr * 100.0);
    return buf;
}

const Annotation* find_annotation(const Episode& ep, const std::string& id) {
    for (const auto& ann : ep.annotations)
        if (ann.id == id) return &ann;
    return nullptr;
}

Tube tube_of_prediction(const PredictionRecord& rec) {
    Tube t;
    if (!rec.track.items.empty()) {
        t.segment = rec.track.items.front().segment;
        t.boxes = rec.track.items.front().boxes;
    }
    return t;
}

Tube tube_of_annotation(const Annotation& ann) {
    Tube t;
    t.segment = ann.segments.front();
    t.boxes = ann.boxes;
    return t;
}

}  // namespace

EvalReport evaluate(const Dataset& data, const std::vector<PredictionRecord>& predictions, const MetricConfig& cfg) {
    cfg.validate();

    // Join predictions with their annotations; unknown references are errors.
    struct Joined {
        const PredictionRecord* pred;
        const Annotation* ann;
    };
    std::map<Task, std::vector<Joined>> per_task;
    std::set<std::string> unknown;
    for (const auto& rec : predictions) {
        const Episode* ep = data.find_episode(rec.video_id);
        const Annotation* ann = ep != nullptr ? find_annotation(*ep, rec.annotation_id) : nullptr;
        if (ep == nullptr || ann == nullptr) {
            unknown.insert(rec.video_id + "/" + rec.annotation_id);
            continue;
        }
        per_task[rec.task].push_back({&rec, ann});
    }
    if (!unknown.empty()) {
        std::string msg = "predictions reference unknown ids:";
        for (const auto& id : unknown) msg += " " + id;
        throw IoError(msg);
    }

    EvalReport report;

    if (per_task.contains(Task::VQ2D)) {
        const auto& joined = per_task[Task::VQ2D];
        std::vector<ApInstance> t_ap, st_ap;
        double rec_sum = 0;
        int succ = 0;
        for (const auto& [pred, ann] : joined) {
            const Tube p = tube_of_prediction(*pred);
            const Tube g = tube_of_annotation(*ann);
            const double score = pred->track.items.empty() ? 0.0 : pred->track.items.front().score;
            ApInstance ti;
            ti.gt_count = 1;
            if (!pred->track.items.empty()) {
                ti.scores = {score};
                ti.iou = {{temporal_iou(p.segment, g.segment)}};
            }
            t_ap.push_back(ti);
            ApInstance si;
            si.gt_count = 1;
            if (!pred->track.items.empty()) {
                si.scores = {score};
                si.iou = {{st_tube_iou(p, g)}};
            }
            st_ap.push_back(si);
            rec_sum += recovery(p, g, cfg.recovery_box_iou);
            if (success(p, g, cfg.success_iou)) ++succ;
        }
        EvalReport::Section section;
        section.task = "vq2d";
        section.values.emplace_back("tAP" + metric_pct(cfg.ap_tiou), average_precision(t_ap, cfg.ap_tiou));
        section.values.emplace_back("stAP" + metric_pct(cfg.ap_tiou), average_precision(st_ap, cfg.ap_tiou));
        section.values.emplace_back("rec%", joined.empty() ? 0.0 : rec_sum / static_cast<double>(joined.size()));
        section.values.emplace_back("Succ",
                                    joined.empty() ? 0.0 : 100.0 * succ / static_cast<double>(joined.size()));
        report.sections.push_back(std::move(section));
    }

    for (Task task : {Task::NLQ, Task::MQ}) {
        if (!per_task.contains(task)) continue;
        const auto& joined = per_task[task];
        std::vector<std::vector<Segment>> ranked;
        std::vector<Segment> single_gt;
        std::vector<std::vector<Segment>> multi_gt;
        for (const auto& [pred, ann] : joined) {
            std::vector<Segment> segs;
            for (const auto& cand : pred->track.items) segs.push_back(cand.segment);
            ranked.push_back(std::move(segs));
            single_gt.push_back(ann->segments.front());
            multi_gt.push_back(ann->segments);
        }
        EvalReport::Section section;
        section.task = task_name(task);
        for (int k : cfg.recall_ks)
            for (double m : cfg.recall_tious) {
                char name[48];
                std::snprintf(name, sizeof(name), "r@%d tIoU=%g", k, m);
                const double value = task == Task::NLQ ? recall_at_k_single(ranked, single_gt, k, m)
                                                       : recall_at_k_instances(ranked, multi_gt, k, m);
                section.values.emplace_back(name, value);
            }
        report.sections.push_back(std::move(section));
    }
    return report;
}

// ---------------------------------------------------------------------------
// Random baselines
// ---------------------------------------------------------------------------

BaselineMode baseline_mode_from_name(const std::string& name) {
    if (name == "random_boxes") return BaselineMode::RandomBoxes;
    if (name == "random_centered") return BaselineMode::RandomCentered;
    throw ConfigError("unknown baseline mode: " + name);
}

namespace {

Box random_box(Rng& rng, BaselineMode mode) {
    Box b;
    if (mode == BaselineMode::RandomCentered) {
        b.cx = 0.5f;
        b.cy = 0.5f;
        b.w = static_cast<float>(rand_int(rng, 20, 80)) / 100.0f;
        b.h = static_cast<float>(rand_int(rng, 20, 80)) / 100.0f;
    } else {
        std::uniform_real_distribution<double> size(0.05, 1.0);
        b.w = static_cast<float>(size(rng));
        b.h = static_cast<float>(size(rng));
        std::uniform_real_distribution<double> cx(b.w / 2.0, 1.0 - b.w / 2.0);
        std::uniform_real_distribution<double> cy(b.h / 2.0, 1.0 - b.h / 2.0);
        b.cx = static_cast<float>(cx(rng));
        b.cy = static_cast<float>(cy(rng));
    }
    return b;
}

Candidate random_candidate(Rng& rng, BaselineMode mode, int total, double score) {
    const int a = rand_int(rng, 0, total - 1);
    const int b = rand_int(rng, 0, total - 1);
    Candidate cand;
    cand.segment = Segment{std::min(a, b), std::max(a, b)};
    cand.score = score;
    cand.boxes.reserve(static_cast<std::size_t>(cand.segment.length()));
    for (int t = 0; t < cand.segment.length(); ++t) cand.boxes.push_back(random_box(rng, mode));
    return cand;
}

}  // namespace

std::vector<PredictionRecord> make_baseline_predictions(const Dataset& data, const std::string& split,
                                                        BaselineMode mode, std::uint64_t seed,
                                                        const std::vector<Task>& tasks) {
    std::vector<PredictionRecord> out;
    Rng rng(mix_seed(seed, 0xba5e));
    for (const Episode* ep : data.split(split)) {
        const int total = ep->video.length();
        for (const Annotation& ann : ep->annotations) {
            if (std::find(tasks.begin(), tasks.end(), ann.task) == tasks.end()) continue;
            PredictionRecord rec;
            rec.annotation_id = ann.id;
            rec.video_id = ann.video_id;
            rec.task = ann.task;
            if (ann.task == Task::VQ2D) {
                rec.track.kind = ResponseTrack::Kind::Tube;
                rec.track.items.push_back(random_candidate(rng, mode, total, 1.0));
            } else {
                rec.track.kind = ResponseTrack::Kind::Segments;
                std::vector<double> scores(5);
                std::uniform_real_distribution<double> uni(0.0, 1.0);
                for (auto& s : scores) s = uni(rng);
                std::sort(scores.rbegin(), scores.rend());
                for (double s : scores) rec.track.items.push_back(random_candidate(rng, mode, total, s));
            }
            out.push_back(std::move(rec));
        }
    }
    return out;
}

EvalReport random_baselines(const Dataset& data, const std::string& split, BaselineMode mode, std::uint64_t seed,
                            int repeats, const MetricConfig& cfg) {
    if (repeats < 1) throw ConfigError("baseline repeats must be >= 1");
    std::vector<EvalReport> reports;
    reports.reserve(static_cast<std::size_t>(repeats));
    for (int r = 0; r < repeats; ++r) {
        auto preds = make_baseline_predictions(data, split, mode, mix_seed(seed, static_cast<std::uint64_t>(r)),
                                               all_tasks());
        reports.push_back(evaluate(data, preds, cfg));
    }
    return EvalReport::mean(reports);
}

}  // namespace vground

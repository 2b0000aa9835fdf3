#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "vground/inference.hpp"
#include "vground/metrics.hpp"
#include "vground/rng.hpp"
#include "vground/synthgen.hpp"

using namespace vground;

namespace {

VideoPredictions preds_from_scores(std::vector<float> fg) {
    VideoPredictions p;
    p.foreground = std::move(fg);
    p.boxes.assign(p.foreground.size(), Box{0.5f, 0.5f, 0.2f, 0.2f});
    p.start_logits.assign(p.foreground.size(), 0.0f);
    p.end_logits.assign(p.foreground.size(), 0.0f);
    return p;
}

// Exhaustive argmax over all (i, j) with j >= i of the masked joint, the
// independent oracle for decode_segment_at_peak.
Segment brute_force_decode(const VideoPredictions& preds, int peak, int span) {
    const int total = preds.length();
    const int lo = std::max(0, peak - span / 2);
    const int hi = std::min(total - 1, lo + span - 1);
    const int n = hi - lo + 1;
    std::vector<double> ps(static_cast<std::size_t>(n)), pe(static_cast<std::size_t>(n));
    double ms = preds.start_logits[static_cast<std::size_t>(lo)], me = preds.end_logits[static_cast<std::size_t>(lo)];
    for (int i = 0; i < n; ++i) {
        ms = std::max(ms, static_cast<double>(preds.start_logits[static_cast<std::size_t>(lo + i)]));
        me = std::max(me, static_cast<double>(preds.end_logits[static_cast<std::size_t>(lo + i)]));
    }
    double zs = 0, ze = 0;
    for (int i = 0; i < n; ++i) {
        ps[static_cast<std::size_t>(i)] = std::exp(preds.start_logits[static_cast<std::size_t>(lo + i)] - ms);
        pe[static_cast<std::size_t>(i)] = std::exp(preds.end_logits[static_cast<std::size_t>(lo + i)] - me);
        zs += ps[static_cast<std::size_t>(i)];
        ze += pe[static_cast<std::size_t>(i)];
    }
    int bi = 0, bj = 0;
    double best = -1;
    for (int i = 0; i < n; ++i)
        for (int j = i; j < n; ++j) {
            const double v = (ps[static_cast<std::size_t>(i)] / zs) * (pe[static_cast<std::size_t>(j)] / ze);
            if (v > best) {
                best = v;
                bi = i;
                bj = j;
            }
        }
    return Segment{lo + bi, lo + bj};
}

}  // namespace

TEST_CASE("slide_windows fixtures") {
    auto w1 = slide_windows(10, 4, 3);
    REQUIRE(w1.size() == 3);
    CHECK(w1[0].first == 0);
    CHECK(w1[1].first == 3);
    CHECK(w1[2].first == 6);

    auto w2 = slide_windows(10, 4, 4);
    REQUIRE(w2.size() == 3);
    CHECK(w2[0].first == 0);
    CHECK(w2[1].first == 4);
    CHECK(w2[2].first == 6);  // clamped tail

    // Disjoint tiling when the step equals the window.
    auto w3 = slide_windows(12, 4, 4);
    REQUIRE(w3.size() == 3);
    std::vector<int> cover(12, 0);
    for (auto [s, e] : w3)
        for (int t = s; t < e; ++t) ++cover[static_cast<std::size_t>(t)];
    for (int c : cover) CHECK(c == 1);

    // Window longer than the video collapses to one clamped window.
    auto w4 = slide_windows(3, 8, 2);
    REQUIRE(w4.size() == 1);
    CHECK(w4[0] == std::pair<int, int>{0, 3});
}

TEST_CASE("slide_windows covers every frame on 1000 random configurations") {
    Rng rng(77);
    for (int iter = 0; iter < 1000; ++iter) {
        const int total = rand_int(rng, 1, 300);
        const int window = rand_int(rng, 1, std::max(1, total));
        const int step = rand_int(rng, 1, window);
        std::vector<int> cover(static_cast<std::size_t>(total), 0);
        for (auto [s, e] : slide_windows(total, window, step)) {
            CHECK(s >= 0);
            CHECK(e <= total);
            for (int t = s; t < e; ++t) ++cover[static_cast<std::size_t>(t)];
        }
        for (int c : cover) CHECK(c >= 1);
    }
}

TEST_CASE("accumulate_windows averages overlapping channels") {
    // Two windows [0,4) and [2,6): frames 2,3 see 0.4 and 0.8 -> 0.6.
    auto fwd = [](int start, int len) {
        WindowOutput out;
        const float value = start == 0 ? 0.4f : 0.8f;
        out.boxes.assign(static_cast<std::size_t>(len), Box{value, value, value, value});
        out.start_logits.assign(static_cast<std::size_t>(len), value);
        out.end_logits.assign(static_cast<std::size_t>(len), value);
        out.foreground.assign(static_cast<std::size_t>(len), value);
        return out;
    };
    VideoPredictions acc = accumulate_windows(6, 4, 2, fwd);
    CHECK(acc.foreground[0] == doctest::Approx(0.4));
    CHECK(acc.foreground[2] == doctest::Approx(0.6));
    CHECK(acc.foreground[3] == doctest::Approx(0.6));
    CHECK(acc.foreground[5] == doctest::Approx(0.8));
    CHECK(acc.boxes[2].cx == doctest::Approx(0.6));
    CHECK(acc.start_logits[3] == doctest::Approx(0.6));

    // No overlap: output equals the per-window concatenation.
    VideoPredictions tiled = accumulate_windows(8, 4, 4, fwd);
    for (int t = 0; t < 4; ++t) CHECK(tiled.foreground[static_cast<std::size_t>(t)] == 0.4f);
    for (int t = 4; t < 8; ++t) CHECK(tiled.foreground[static_cast<std::size_t>(t)] == 0.8f);

    // Identical windows pass through exactly.
    auto constant = [](int, int len) {
        WindowOutput out;
        out.boxes.assign(static_cast<std::size_t>(len), Box{0.3f, 0.3f, 0.3f, 0.3f});
        out.start_logits.assign(static_cast<std::size_t>(len), 1.25f);
        out.end_logits.assign(static_cast<std::size_t>(len), -2.5f);
        out.foreground.assign(static_cast<std::size_t>(len), 0.7f);
        return out;
    };
    VideoPredictions same = accumulate_windows(10, 4, 1, constant);
    for (int t = 0; t < 10; ++t) {
        CHECK(same.foreground[static_cast<std::size_t>(t)] == 0.7f);
        CHECK(same.start_logits[static_cast<std::size_t>(t)] == 1.25f);
    }
}

TEST_CASE("median_filter fixtures") {
    CHECK(median_filter({0, 0, 1, 0, 0}, 5) == std::vector<float>{0, 0, 0, 0, 0});
    CHECK(median_filter({1, 1, 1, 1, 1}, 5) == std::vector<float>{1, 1, 1, 1, 1});
    CHECK(median_filter({0, 0, 0, 0}, 5) == std::vector<float>{0, 0, 0, 0});
    CHECK_THROWS_AS(median_filter({1, 2, 3}, 4), ConfigError);
}

TEST_CASE("find_peaks fixtures") {
    auto peaks = find_peaks({0, 0.2f, 0.6f, 0.9f, 0.55f, 0.05f, 0, 0.7f, 0.8f, 0.3f}, 0.5, 1000);
    REQUIRE(peaks.size() == 2);
    CHECK(peaks[0].first == 3);
    CHECK(peaks[0].second == doctest::Approx(0.9));
    CHECK(peaks[1].first == 8);
    CHECK(peaks[1].second == doctest::Approx(0.8));

    CHECK(find_peaks({0.1f, 0.2f, 0.3f}, 0.5, 1000).empty());

    auto plateau = find_peaks({0.9f, 0.9f}, 0.5, 1000);
    REQUIRE(plateau.size() == 1);
    CHECK(plateau[0].first == 0);  // earliest index on ties

    // Truncation keeps the strongest peaks, back in index order.
    std::vector<float> many;
    for (int i = 0; i < 10; ++i) {
        many.push_back(0.0f);
        many.push_back(0.5f + 0.04f * static_cast<float>(i));
    }
    auto trimmed = find_peaks(many, 0.4, 3);
    REQUIRE(trimmed.size() == 3);
    CHECK(trimmed[0].first < trimmed[1].first);
    CHECK(trimmed[1].first < trimmed[2].first);
    CHECK(trimmed[0].second == doctest::Approx(0.78f));
}

TEST_CASE("decode_segment_at_peak one-hot fixture and edge clamp") {
    VideoPredictions p = preds_from_scores(std::vector<float>(12, 0.0f));
    p.start_logits[3] = 10.0f;
    p.end_logits[7] = 10.0f;
    Candidate cand = decode_segment_at_peak(p, 5, 12, false);
    CHECK(cand.segment == Segment{3, 7});

    // Span window at the video edge clamps into range.
    Candidate edge = decode_segment_at_peak(p, 0, 6, false);
    CHECK(edge.segment.start >= 0);
    CHECK(edge.segment.end < 12);
    Candidate tail = decode_segment_at_peak(p, 11, 6, false);
    CHECK(tail.segment.end <= 11);

    // Boxes attach over exactly the decoded range.
    Candidate boxed = decode_segment_at_peak(p, 5, 12, true);
    CHECK(static_cast<int>(boxed.boxes.size()) == boxed.segment.length());
}

TEST_CASE("decode matches the brute-force pair argmax on random inputs") {
    Rng rng(123);
    for (int iter = 0; iter < 300; ++iter) {
        const int total = rand_int(rng, 2, 40);
        VideoPredictions p = preds_from_scores(std::vector<float>(static_cast<std::size_t>(total), 0.0f));
        std::normal_distribution<double> dist(0.0, 2.0);
        for (int t = 0; t < total; ++t) {
            p.start_logits[static_cast<std::size_t>(t)] = static_cast<float>(dist(rng));
            p.end_logits[static_cast<std::size_t>(t)] = static_cast<float>(dist(rng));
        }
        const int peak = rand_int(rng, 0, total - 1);
        const int span = rand_int(rng, 1, total + 4);
        Candidate got = decode_segment_at_peak(p, peak, span, false);
        CHECK(got.segment == brute_force_decode(p, peak, span));
    }
}

TEST_CASE("decode picks the best feasible pair when the raw argmaxes are inverted") {
    VideoPredictions p = preds_from_scores(std::vector<float>(10, 0.0f));
    p.start_logits[7] = 5.0f;  // raw start argmax after raw end argmax
    p.end_logits[2] = 5.0f;
    Candidate cand = decode_segment_at_peak(p, 5, 10, false);
    CHECK(cand.segment == brute_force_decode(p, 5, 10));
    CHECK(cand.segment.start <= cand.segment.end);
}

TEST_CASE("infer_vq2d selects the most recent peak") {
    InferenceConfig cfg;
    cfg.vq_peak_window = 8;
    std::vector<float> fg(256, 0.0f);
    for (int t = 28; t < 34; ++t) fg[static_cast<std::size_t>(t)] = 0.9f;
    for (int t = 198; t < 204; ++t) fg[static_cast<std::size_t>(t)] = 0.7f;
    VideoPredictions p = preds_from_scores(fg);
    ResponseTrack track = infer_vq2d(p, cfg);
    REQUIRE(track.items.size() == 1);
    CHECK(track.kind == ResponseTrack::Kind::Tube);
    const Segment seg = track.items.front().segment;
    CHECK(seg.start >= 194);
    CHECK(seg.end <= 208);
    CHECK(static_cast<int>(track.items.front().boxes.size()) == seg.length());
    CHECK(track.items.front().score == doctest::Approx(0.7));
}

TEST_CASE("infer_vq2d falls back to the filtered maximum when no peak clears 0.5") {
    InferenceConfig cfg;
    cfg.vq_peak_window = 6;
    std::vector<float> fg(64, 0.05f);
    for (int t = 40; t < 44; ++t) fg[static_cast<std::size_t>(t)] = 0.3f;
    ResponseTrack track = infer_vq2d(preds_from_scores(fg), cfg);
    REQUIRE(track.items.size() == 1);
    CHECK(track.items.front().segment.start >= 34);
    CHECK(track.items.front().segment.end <= 49);
}

TEST_CASE("infer_vq2d without the foreground head decodes the whole video") {
    InferenceConfig cfg;
    cfg.use_foreground_head = false;
    std::vector<float> fg(64, 0.0f);
    for (int t = 50; t < 54; ++t) fg[static_cast<std::size_t>(t)] = 0.99f;  // ignored by this path
    VideoPredictions p = preds_from_scores(fg);
    p.start_logits[10] = 8.0f;
    p.end_logits[14] = 8.0f;
    ResponseTrack track = infer_vq2d(p, cfg);
    REQUIRE(track.items.size() == 1);
    CHECK(track.items.front().segment == Segment{10, 14});
}

TEST_CASE("infer_temporal ranks by peak score and honors the box flag") {
    InferenceConfig cfg;
    std::vector<float> fg(60, 0.0f);
    auto bump = [&](int at, float h) {
        for (int t = at - 1; t <= at + 1; ++t) fg[static_cast<std::size_t>(t)] = h;
    };
    bump(10, 0.2f);
    bump(30, 0.9f);
    bump(50, 0.4f);
    VideoPredictions p = preds_from_scores(fg);

    ResponseTrack track = infer_temporal(p, cfg, 8);
    REQUIRE(track.items.size() == 3);
    CHECK(track.items[0].score == doctest::Approx(0.9));
    CHECK(track.items[1].score == doctest::Approx(0.4));
    CHECK(track.items[2].score == doctest::Approx(0.2));
    for (const auto& cand : track.items) CHECK(cand.boxes.empty());

    CHECK(infer_temporal(preds_from_scores(std::vector<float>(30, 0.0f)), cfg, 8).items.empty());

    cfg.emit_boxes_for_temporal = true;
    ResponseTrack boxed = infer_temporal(p, cfg, 8);
    for (const auto& cand : boxed.items)
        CHECK(static_cast<int>(cand.boxes.size()) == cand.segment.length());
}

TEST_CASE("temporal_nms fixture, subset property, idempotence") {
    auto mk = [](int s, int e, double score) {
        Candidate c;
        c.segment = Segment{s, e};
        c.score = score;
        return c;
    };
    auto kept = temporal_nms({mk(0, 10, 0.9), mk(2, 12, 0.8), mk(20, 30, 0.7)}, 0.4);
    REQUIRE(kept.size() == 2);
    CHECK(kept[0].segment == Segment{0, 10});
    CHECK(kept[1].segment == Segment{20, 30});
    CHECK(temporal_iou(Segment{0, 10}, Segment{2, 12}) == doctest::Approx(9.0 / 13.0));

    auto disjoint = temporal_nms({mk(0, 5, 0.5), mk(10, 15, 0.4), mk(20, 25, 0.3)}, 0.4);
    CHECK(disjoint.size() == 3);

    Rng rng(321);
    for (int iter = 0; iter < 300; ++iter) {
        std::vector<Candidate> cands;
        const int n = rand_int(rng, 0, 12);
        for (int i = 0; i < n; ++i) {
            const int a = rand_int(rng, 0, 50), b = rand_int(rng, 0, 50);
            Candidate c = mk(std::min(a, b), std::max(a, b), rand_int(rng, 0, 100) / 100.0);
            cands.push_back(c);
        }
        auto once = temporal_nms(cands, 0.4);
        auto twice = temporal_nms(once, 0.4);
        REQUIRE(once.size() == twice.size());
        for (std::size_t i = 0; i < once.size(); ++i) CHECK(once[i].segment == twice[i].segment);
        for (std::size_t i = 0; i < once.size(); ++i)
            for (std::size_t j = i + 1; j < once.size(); ++j)
                CHECK(temporal_iou(once[i].segment, once[j].segment) <= 0.4);
    }
}

TEST_CASE("stride remapping fixture") {
    CHECK(remap_segment(Segment{3, 5}, 2, 20) == Segment{6, 11});
    CHECK(remap_segment(Segment{3, 5}, 1, 20) == Segment{3, 5});
    // End extension clamps at the last original frame.
    CHECK(remap_segment(Segment{4, 9}, 2, 19) == Segment{8, 18});
}

TEST_CASE("multiscale with scales={1} is bit-identical to single-scale inference") {
    GenConfig gcfg;
    gcfg.train_episodes = 1;
    gcfg.val_episodes = 0;
    gcfg.seed = 11;
    Dataset ds = generate_dataset(gcfg);
    Model<float> model(ModelConfig::desk(), 5);

    const Episode& ep = ds.episodes.front();
    const Annotation* nlq = nullptr;
    for (const auto& ann : ep.annotations)
        if (ann.task == Task::NLQ) nlq = &ann;
    REQUIRE(nlq != nullptr);

    InferenceConfig single;
    single.scales = {1};
    InferenceConfig multi = single;

    ResponseTrack a = multiscale_infer(model, ep.video, nlq->query, Task::NLQ, single);

    // Reference: accumulate + decode directly at scale 1, then NMS.
    const int w = std::min(model.config().window.at(Task::NLQ), ep.video.length());
    VideoPredictions preds = accumulate(model, ep.video, nlq->query, w, std::max(1, w / 2));
    ResponseTrack direct = infer_temporal(preds, single, w);
    std::vector<Candidate> ref = temporal_nms(direct.items, single.nms_thr);

    REQUIRE(a.items.size() == ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) {
        CHECK(a.items[i].segment == ref[i].segment);
        CHECK(a.items[i].score == ref[i].score);
    }
}

TEST_CASE("predictions file round-trips and keeps a stable field order") {
    std::vector<PredictionRecord> records(2);
    records[0].annotation_id = "ep0:vq2d";
    records[0].video_id = "ep0";
    records[0].task = Task::VQ2D;
    records[0].track.kind = ResponseTrack::Kind::Tube;
    Candidate tube;
    tube.segment = Segment{4, 7};
    tube.score = 0.75;
    tube.boxes.assign(4, Box{0.5f, 0.25f, 0.125f, 0.0625f});
    records[0].track.items.push_back(tube);

    records[1].annotation_id = "ep0:nlq";
    records[1].video_id = "ep0";
    records[1].task = Task::NLQ;
    records[1].track.kind = ResponseTrack::Kind::Segments;
    for (int i = 0; i < 3; ++i) {
        Candidate c;
        c.segment = Segment{10 * i, 10 * i + 4};
        c.score = 0.9 - 0.1 * i;
        records[1].track.items.push_back(c);
    }

    const std::string path = "/tmp/vground_preds_test.jsonl";
    write_predictions(records, path);
    auto back = read_predictions(path);
    REQUIRE(back.size() == 2);
    CHECK(back[0].annotation_id == records[0].annotation_id);
    CHECK(back[0].track.kind == ResponseTrack::Kind::Tube);
    CHECK(back[0].track.items.front().segment == Segment{4, 7});
    CHECK(back[0].track.items.front().score == 0.75);
    REQUIRE(back[0].track.items.front().boxes.size() == 4);
    CHECK(back[0].track.items.front().boxes[2].cy == 0.25f);
    CHECK(back[1].track.items.size() == 3);
    CHECK(back[1].track.items[1].segment == Segment{10, 14});

    // Re-writing the parsed records reproduces the file byte for byte.
    const std::string path2 = "/tmp/vground_preds_test2.jsonl";
    write_predictions(back, path2);
    std::ifstream f1(path), f2(path2);
    std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(s1 == s2);
    std::remove(path.c_str());
    std::remove(path2.c_str());
}

#include "vground/synthgen.hpp"

#include <algorithm>
#include <cmath>

namespace vground {

namespace {

double pearson(std::span<const float> a, std::span<const float> b) {
    const std::size_t n = a.size();
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < n; ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= static_cast<double>(n);
    mb /= static_cast<double>(n);
    double cov = 0, va = 0, vb = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double da = a[i] - ma, db = b[i] - mb;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    return cov / std::sqrt(va * vb);
}

// Segment length with mode near 5% of the video, floored at 3 frames.
int draw_length(Rng& rng, int total_frames) {
    std::normal_distribution<double> dist(0.05 * total_frames, 0.02 * total_frames);
    const int cap = std::max(4, total_frames / 6);
    const int len = static_cast<int>(std::lround(std::abs(dist(rng))));
    return std::clamp(len, 3, cap);
}

bool overlaps_any(const Segment& s, const std::vector<Segment>& placed, int gap) {
    for (const auto& p : placed)
        if (s.start <= p.end + gap && p.start <= s.end + gap) return true;
    return false;
}

std::vector<Box> linear_trajectory(Rng& rng, int frames, int pattern, int grid_h, int grid_w,
                                   std::vector<std::pair<int, int>>& pixel_positions) {
    const int max_y = grid_h - pattern;
    const int max_x = grid_w - pattern;
    const int y0 = rand_int(rng, 0, max_y), x0 = rand_int(rng, 0, max_x);
    const int y1 = rand_int(rng, 0, max_y), x1 = rand_int(rng, 0, max_x);
    std::vector<Box> boxes;
    boxes.reserve(static_cast<std::size_t>(frames));
    pixel_positions.clear();
    for (int i = 0; i < frames; ++i) {
        const double a = frames > 1 ? static_cast<double>(i) / (frames - 1) : 0.0;
        const int y = static_cast<int>(std::lround(y0 + a * (y1 - y0)));
        const int x = static_cast<int>(std::lround(x0 + a * (x1 - x0)));
        pixel_positions.emplace_back(y, x);
        Box b;
        b.cx = (static_cast<float>(x) + pattern / 2.0f) / static_cast<float>(grid_w);
        b.cy = (static_cast<float>(y) + pattern / 2.0f) / static_cast<float>(grid_h);
        b.w = static_cast<float>(pattern) / static_cast<float>(grid_w);
        b.h = static_cast<float>(pattern) / static_cast<float>(grid_h);
        boxes.push_back(b);
    }
    return boxes;
}

}  // namespace

ConceptBank make_concept_bank(int concepts, std::uint64_t seed, int pattern_size, int channels) {
    if (concepts < 2) throw ConfigError("concept bank needs at least 2 concepts");
    ConceptBank bank;
    bank.pattern_size = pattern_size;
    bank.channels = channels;

    Rng rng(mix_seed(seed, 0xbadc0ffee));
    const std::vector<int> shape{pattern_size, pattern_size, channels};
    for (int c = 0; c < concepts; ++c) {
        for (int attempt = 0;; ++attempt) {
            if (attempt >= 100) throw RuntimeFailure("concept bank: could not decorrelate pattern");
            Array<float> candidate = randn<float>(shape, rng);
            bool ok = true;
            for (const auto& other : bank.patterns)
                if (std::abs(pearson(candidate.data(), other.data())) >= 0.5) {
                    ok = false;
                    break;
                }
            if (ok) {
                bank.patterns.push_back(std::move(candidate));
                break;
            }
        }
    }

    bank.vocab = {"<pad>", "where", "is", "when", "did", "i", "do"};
    for (int c = 0; c < concepts; ++c) bank.vocab.push_back("thing" + std::to_string(c));
    return bank;
}

Episode generate_episode(const ConceptBank& bank, const GenConfig& cfg, std::uint64_t seed, const std::string& id,
                         const std::string& split) {
    const int pattern = bank.pattern_size;
    const int channels = bank.channels;
    const int grid = 16;  // matches the desk model input grid

    Rng rng(seed);
    const int total = rand_int(rng, cfg.min_frames, cfg.max_frames);

    Episode ep;
    ep.id = id;
    ep.split = split;
    ep.video.fps_tag = 1;
    ep.video.frames = randn<float>({total, grid, grid, channels}, rng, static_cast<float>(cfg.noise_sigma));

    // One concept per task; occurrence counts follow the task families.
    std::vector<int> order(static_cast<std::size_t>(bank.concept_count()));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    const int concept_vq = order[0], concept_nlq = order[1], concept_mq = order[2];

    struct Plan {
        int concept_id;
        Task family;
        int count;
    };
    const std::vector<Plan> plans = {
        {concept_vq, Task::VQ2D, rand_int(rng, 1, 2)},
        {concept_nlq, Task::NLQ, 1},
        {concept_mq, Task::MQ, rand_int(rng, 1, 4)},
    };

    // Temporally disjoint placement (with a small gap) keeps the planted
    // evidence unambiguous; the query frame is the last video frame, so no
    // occurrence may touch it.
    std::vector<Segment> placed;
    const int gap = 4;
    for (const auto& plan : plans) {
        for (int n = 0; n < plan.count; ++n) {
            Segment seg;
            bool ok = false;
            for (int attempt = 0; attempt < 100; ++attempt) {
                const int len = draw_length(rng, total);
                if (len > total - 1) continue;
                seg.start = rand_int(rng, 0, total - 1 - len);
                seg.end = seg.start + len - 1;
                if (!overlaps_any(seg, placed, gap)) {
                    ok = true;
                    break;
                }
            }
            if (!ok) throw RuntimeFailure("episode " + id + ": infeasible occurrence placement after 100 retries");
            placed.push_back(seg);

            Occurrence occ;
            occ.concept_id = plan.concept_id;
            occ.segment = seg;
            std::vector<std::pair<int, int>> positions;
            occ.boxes = linear_trajectory(rng, seg.length(), pattern, grid, grid, positions);

            auto frames = ep.video.frames.mutable_data();
            const auto pat = bank.patterns[static_cast<std::size_t>(plan.concept_id)].data();
            for (int i = 0; i < seg.length(); ++i) {
                const auto [y, x] = positions[static_cast<std::size_t>(i)];
                const int t = seg.start + i;
                for (int py = 0; py < pattern; ++py)
                    for (int px = 0; px < pattern; ++px)
                        for (int ch = 0; ch < channels; ++ch) {
                            const std::size_t vi =
                                ((static_cast<std::size_t>(t) * grid + (y + py)) * grid + (x + px)) * channels + ch;
                            const std::size_t pi =
                                (static_cast<std::size_t>(py) * pattern + px) * static_cast<std::size_t>(channels) +
                                ch;
                            frames[vi] += pat[pi];
                        }
            }
            ep.occurrences.push_back(std::move(occ));
        }
    }

    // VQ2D: most recent occurrence of its concept before the query frame.
    {
        const Occurrence* latest = nullptr;
        for (const auto& occ : ep.occurrences)
            if (occ.concept_id == concept_vq && (latest == nullptr || occ.segment.start > latest->segment.start))
                latest = &occ;
        Annotation ann;
        ann.id = id + ":vq2d";
        ann.task = Task::VQ2D;
        ann.video_id = id;
        ann.query.kind = QueryKind::Visual;
        // Re-rendered with fresh noise so the crop is never a pixel copy.
        ann.query.crop = randn<float>({pattern, pattern, channels}, rng, static_cast<float>(cfg.noise_sigma));
        {
            auto crop = ann.query.crop.mutable_data();
            const auto pat = bank.patterns[static_cast<std::size_t>(concept_vq)].data();
            for (std::size_t i = 0; i < crop.size(); ++i) crop[i] += pat[i];
        }
        ann.segments = {latest->segment};
        ann.boxes = latest->boxes;
        ann.query_frame = total - 1;
        ann.concept_id = concept_vq;
        ep.annotations.push_back(std::move(ann));
    }

    // NLQ: the single occurrence of its concept answers the question.
    {
        const Occurrence* occ = nullptr;
        for (const auto& o : ep.occurrences)
            if (o.concept_id == concept_nlq) occ = &o;
        Annotation ann;
        ann.id = id + ":nlq";
        ann.task = Task::NLQ;
        ann.video_id = id;
        ann.query.kind = QueryKind::Text;
        ann.query.tokens = bank.nlq_phrase(concept_nlq);
        ann.segments = {occ->segment};
        ann.concept_id = concept_nlq;
        ep.annotations.push_back(std::move(ann));
    }

    // MQ: every instance of the activity concept, in temporal order.
    {
        Annotation ann;
        ann.id = id + ":mq";
        ann.task = Task::MQ;
        ann.video_id = id;
        ann.query.kind = QueryKind::Text;
        ann.query.tokens = bank.mq_phrase(concept_mq);
        ann.category_id = concept_mq;
        for (const auto& o : ep.occurrences)
            if (o.concept_id == concept_mq) ann.segments.push_back(o.segment);
        std::sort(ann.segments.begin(), ann.segments.end(),
                  [](const Segment& a, const Segment& b) { return a.start < b.start; });
        ann.concept_id = concept_mq;
        ep.annotations.push_back(std::move(ann));
    }

    return ep;
}

Dataset generate_dataset(const GenConfig& cfg) {
    cfg.validate();
    Dataset ds;
    ds.gen_cfg = cfg;
    ds.bank = make_concept_bank(cfg.concepts, cfg.seed, cfg.pattern_size);

    const int total = cfg.train_episodes + cfg.val_episodes;
    for (int i = 0; i < total; ++i) {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "ep%04d", i);
        const std::string split = i < cfg.train_episodes ? "train" : "val";
        ds.episodes.push_back(generate_episode(ds.bank, cfg, mix_seed(cfg.seed, 1000 + i), buf, split));
    }
    return ds;
}

}  // namespace vground

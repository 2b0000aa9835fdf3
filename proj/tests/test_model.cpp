#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "vground/gradcheck.hpp"
#include "vground/losses.hpp"
#include "vground/model.hpp"
#include "vground/rng.hpp"

using namespace vground;

namespace {

VideoTensor random_video(int frames, const ModelConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    VideoTensor v;
    v.frames = randn<float>({frames, cfg.input_h, cfg.input_w, cfg.channels}, rng, 0.5f);
    return v;
}

Query text_query(std::vector<int> tokens) {
    Query q;
    q.kind = QueryKind::Text;
    q.tokens = std::move(tokens);
    return q;
}

Query crop_query(int h, int w, std::uint64_t seed) {
    Rng rng(seed);
    Query q;
    q.kind = QueryKind::Visual;
    q.crop = randn<float>({h, w, 3}, rng, 0.5f);
    return q;
}

bool same_values(const Array<float>& a, const Array<float>& b) {
    if (a.shape() != b.shape()) return false;
    auto pa = a.data();
    auto pb = b.data();
    for (std::size_t i = 0; i < pa.size(); ++i)
        if (pa[i] != pb[i]) return false;
    return true;
}

}  // namespace

TEST_CASE("encode_video shape and determinism") {
    Model<float> model(ModelConfig::desk(), 1);
    VideoTensor v = random_video(8, model.config(), 2);
    auto frames = model.encode_video(v);
    CHECK(frames.size() == 8);
    CHECK(frames[0].shape() == std::vector<int>{16, 32});

    // Duplicate a frame; its features must be identical.
    VideoTensor twin;
    twin.frames = Array<float>({2, 16, 16, 3});
    auto o = twin.frames.mutable_data();
    auto src = v.frames.data();
    const std::size_t frame_elems = 16 * 16 * 3;
    for (std::size_t i = 0; i < frame_elems; ++i) {
        o[i] = src[i];
        o[frame_elems + i] = src[i];
    }
    auto enc = model.encode_video(twin);
    CHECK(same_values(enc[0], enc[1]));
}

TEST_CASE("encode_video rejects mismatched grids") {
    Model<float> model(ModelConfig::desk(), 1);
    VideoTensor bad;
    bad.frames = Array<float>({4, 12, 16, 3});
    CHECK_THROWS_AS(model.encode_video(bad), ConfigError);
}

TEST_CASE("positional encoding breaks patch permutation symmetry") {
    Model<float> model(ModelConfig::desk(), 1);
    // Frame A has block X in patch (0,0) and block Y in patch (0,1);
    // frame B swaps them. Without positions, A's row 0 would equal B's row 1.
    Rng rng(5);
    Array<float> block_x = randn<float>({4, 4, 3}, rng);
    Array<float> block_y = randn<float>({4, 4, 3}, rng);
    auto paint = [&](Array<float>& frames, int frame, int gx, const Array<float>& block) {
        auto o = frames.mutable_data();
        auto b = block.data();
        for (int py = 0; py < 4; ++py)
            for (int px = 0; px < 4; ++px)
                for (int c = 0; c < 3; ++c)
                    o[((static_cast<std::size_t>(frame) * 16 + py) * 16 + (gx * 4 + px)) * 3 + c] =
                        b[(static_cast<std::size_t>(py) * 4 + px) * 3 + c];
    };
    VideoTensor va, vb;
    va.frames = Array<float>({1, 16, 16, 3});
    vb.frames = Array<float>({1, 16, 16, 3});
    paint(va.frames, 0, 0, block_x);
    paint(va.frames, 0, 1, block_y);
    paint(vb.frames, 0, 0, block_y);
    paint(vb.frames, 0, 1, block_x);

    auto ea = model.encode_video(va)[0];
    auto eb = model.encode_video(vb)[0];
    // Identical content at different positions encodes differently.
    bool differs = false;
    for (int j = 0; j < 32 && !differs; ++j) differs = ea.at(0, j) != eb.at(1, j);
    CHECK(differs);
}

TEST_CASE("encode_query shapes per modality") {
    Model<float> model(ModelConfig::desk(), 1);

    Array<float> text = model.encode_query(text_query({1, 2, 3, 4, 5}));
    CHECK(text.shape() == std::vector<int>{5, 32});

    // A 12x12 crop resamples onto the model input grid: 4x4 patch grid.
    Array<float> vis = model.encode_query(crop_query(12, 12, 9));
    CHECK(vis.shape() == std::vector<int>{16, 32});

    Query cat;
    cat.kind = QueryKind::Category;
    cat.category = 3;
    Array<float> c3 = model.encode_query(cat);
    CHECK(c3.shape() == std::vector<int>{1, 32});
    cat.category = 4;
    Array<float> c4 = model.encode_query(cat);
    bool differs = false;
    for (int j = 0; j < 32 && !differs; ++j) differs = c3.at(0, j) != c4.at(0, j);
    CHECK(differs);
}

TEST_CASE("encode_query rejects bad inputs") {
    Model<float> model(ModelConfig::desk(), 1);
    CHECK_THROWS_AS(model.encode_query(text_query({})), ContractError);
    CHECK_THROWS_AS(model.encode_query(text_query({999})), ContractError);
    Query cat;
    cat.kind = QueryKind::Category;
    cat.category = 99;
    CHECK_THROWS_AS(model.encode_query(cat), ContractError);
}

TEST_CASE("video_query_encode stride replication") {
    ModelConfig cfg = ModelConfig::desk();
    cfg.encoder_stride = 2;
    Model<float> model(cfg, 1);
    VideoTensor v = random_video(6, cfg, 11);
    auto frames = model.encode_video(v);
    Array<float> q = model.encode_query(text_query({7, 8}));
    auto enc = model.video_query_encode(frames, q);
    CHECK(enc.size() == 6);
    CHECK(enc[0].shape() == std::vector<int>{16 + 2, 32});
    CHECK(same_values(enc[1], enc[0]));
    CHECK(same_values(enc[3], enc[2]));
    CHECK(same_values(enc[5], enc[4]));
    CHECK_FALSE(same_values(enc[2], enc[0]));

    // Stride 1 encodes every frame: neighbours differ.
    ModelConfig cfg1 = ModelConfig::desk();
    Model<float> m1(cfg1, 1);
    auto enc1 = m1.video_query_encode(m1.encode_video(v), q);
    CHECK_FALSE(same_values(enc1[1], enc1[0]));
}

TEST_CASE("space_time_decode degeneracies and row sums") {
    Model<float> model(ModelConfig::desk(), 1);
    VideoTensor v1 = random_video(1, model.config(), 13);
    auto enc1 = model.video_query_encode(model.encode_video(v1), model.encode_query(text_query({3})));
    auto [e1, maps1] = model.space_time_decode(enc1, Modality::Text);
    CHECK(e1.shape() == std::vector<int>{1, 32});
    for (const auto& w : maps1.weights) {
        CHECK(w.shape() == std::vector<int>{1, 1});
        CHECK(w.at(0, 0) == doctest::Approx(1.0));
    }

    VideoTensor v = random_video(6, model.config(), 14);
    auto enc = model.video_query_encode(model.encode_video(v), model.encode_query(text_query({3, 4})));
    auto [e, maps] = model.space_time_decode(enc, Modality::Text);
    CHECK(maps.weights.size() == static_cast<std::size_t>(2 * 4));
    for (const auto& w : maps.weights)
        for (int i = 0; i < 6; ++i) {
            double total = 0;
            for (int j = 0; j < 6; ++j) total += w.at(i, j);
            CHECK(std::abs(total - 1.0) < 1e-6);
        }
}

TEST_CASE("shared time embedding makes the decode modality-independent") {
    ModelConfig cfg = ModelConfig::desk();
    cfg.shared_time_embedding = true;
    Model<float> model(cfg, 1);
    VideoTensor v = random_video(4, cfg, 15);
    auto enc = model.video_query_encode(model.encode_video(v), model.encode_query(text_query({5, 6})));
    auto [et, mt] = model.space_time_decode(enc, Modality::Text);
    auto [ev, mv] = model.space_time_decode(enc, Modality::Visual);
    CHECK(same_values(et, ev));

    ModelConfig cfg2 = ModelConfig::desk();
    Model<float> separate(cfg2, 1);
    auto enc2 = separate.video_query_encode(separate.encode_video(v), separate.encode_query(text_query({5, 6})));
    auto [et2, m2] = separate.space_time_decode(enc2, Modality::Text);
    auto [ev2, m3] = separate.space_time_decode(enc2, Modality::Visual);
    CHECK_FALSE(same_values(et2, ev2));
}

TEST_CASE("predict_heads ranges, shapes, per-frame determinism") {
    Model<float> model(ModelConfig::desk(), 1);
    Rng rng(16);
    Array<float> refined = randn<float>({8, 32}, rng);
    FramePredictions<float> preds = model.predict_heads(refined);
    CHECK(preds.boxes.shape() == std::vector<int>{8, 4});
    CHECK(preds.start_logits.shape() == std::vector<int>{8});
    CHECK(preds.end_logits.shape() == std::vector<int>{8});
    CHECK(preds.foreground.shape() == std::vector<int>{8});
    for (int i = 0; i < 8; ++i) {
        for (int j = 0; j < 4; ++j) {
            CHECK(preds.boxes.at(i, j) >= 0.0f);
            CHECK(preds.boxes.at(i, j) <= 1.0f);
        }
        CHECK(preds.foreground.at(i) > 0.0f);
        CHECK(preds.foreground.at(i) < 1.0f);
    }

    // Identical refined rows give identical predictions.
    Array<float> stacked = concat_rows<float>({slice_rows(refined, 0, 1), slice_rows(refined, 0, 1)});
    FramePredictions<float> twin = model.predict_heads(stacked);
    for (int j = 0; j < 4; ++j) CHECK(twin.boxes.at(0, j) == twin.boxes.at(1, j));
    CHECK(twin.foreground.at(0) == twin.foreground.at(1));
}

TEST_CASE("forward end-to-end shape and bit determinism") {
    Model<float> a(ModelConfig::desk(), 21);
    Model<float> b(ModelConfig::desk(), 21);
    VideoTensor v = random_video(8, a.config(), 22);
    Query q = crop_query(4, 4, 23);

    auto ra = a.forward(v, q);
    CHECK(ra.preds.length() == 8);
    auto ra2 = a.forward(v, q);
    CHECK(same_values(ra.preds.boxes, ra2.preds.boxes));
    CHECK(same_values(ra.preds.foreground, ra2.preds.foreground));

    auto rb = b.forward(v, q);
    CHECK(same_values(ra.preds.boxes, rb.preds.boxes));
    CHECK(same_values(ra.preds.start_logits, rb.preds.start_logits));
}

TEST_CASE("every parameter draws gradient from some task loss on random data") {
    Model<float> model(ModelConfig::desk(), 31);
    VideoTensor v = random_video(6, model.config(), 32);
    LossWeights lw;

    std::vector<bool> touched(model.parameters().size(), false);
    auto run = [&](Task task, const Query& q, bool with_boxes) {
        Tape<float> tape;
        TapeScope<float> scope(tape);
        auto result = model.forward(v, q);
        std::vector<Box> boxes(3, Box{0.5f, 0.4f, 0.25f, 0.25f});
        WindowTargets<float> tgt = build_window_targets<float>(Segment{1, 3}, 6, with_boxes ? &boxes : nullptr);
        Array<float> total = task_loss(task, result.preds, result.attention, tgt, lw).first;
        tape.backward(total);
        for (std::size_t i = 0; i < model.parameters().size(); ++i) {
            Array<float> g = tape.grad(model.parameters()[i].value);
            CHECK(g.all_finite());
            for (float x : g.data())
                if (x != 0.0f) touched[i] = true;
        }
    };

    run(Task::VQ2D, crop_query(4, 4, 33), true);
    run(Task::NLQ, text_query({2, 9, 11}), false);
    Query cat;
    cat.kind = QueryKind::Category;
    cat.category = 5;
    run(Task::MQ, cat, false);

    for (std::size_t i = 0; i < touched.size(); ++i)
        CHECK_MESSAGE(touched[i], "no gradient ever reached ", model.parameters()[i].name);
}

TEST_CASE("full model loss gradient passes 64-bit finite differences at 1e-4") {
    ModelConfig cfg = ModelConfig::desk();
    Model<double> model(cfg, 41);
    Rng rng(42);
    VideoTensor v;
    v.frames = randn<float>({4, cfg.input_h, cfg.input_w, cfg.channels}, rng, 0.5f);
    Query q;
    q.kind = QueryKind::Visual;
    q.crop = randn<float>({4, 4, 3}, rng, 0.5f);

    std::vector<Box> boxes(3, Box{0.5f, 0.4f, 0.25f, 0.25f});
    WindowTargets<double> tgt = build_window_targets<double>(Segment{1, 3}, 4, &boxes);
    LossWeights lw;
    auto loss_fn = [&]() {
        auto result = model.forward(v, q);
        return task_loss(Task::VQ2D, result.preds, result.attention, tgt, lw).first;
    };

    std::vector<std::pair<std::string, Array<double>>> params;
    for (const auto& p : model.parameters()) params.push_back({p.name, p.value});

    GradCheckOptions opt;
    opt.tol = 1e-4;
    opt.sampled_components = 3;
    opt.seed = 43;
    auto report = finite_diff_check(loss_fn, params, opt);
    for (const auto& e : report.entries)
        CHECK_MESSAGE(e.pass, e.name, " rel err ", e.max_rel_err);
}

TEST_CASE("checkpoint round-trip is bit-exact and rejects mismatched shapes") {
    namespace fs = std::filesystem;
    const std::string path = (fs::temp_directory_path() / "vground_ckpt_test.vgc").string();

    Model<float> model(ModelConfig::desk(), 51);
    save_checkpoint(model, path);

    Model<float> other(ModelConfig::desk(), 52);
    bool any_diff = false;
    for (std::size_t i = 0; i < model.parameters().size(); ++i)
        if (!same_values(model.parameters()[i].value, other.parameters()[i].value)) any_diff = true;
    CHECK(any_diff);

    load_checkpoint(other, path);
    for (std::size_t i = 0; i < model.parameters().size(); ++i)
        CHECK(same_values(model.parameters()[i].value, other.parameters()[i].value));

    // Saving the restored model reproduces the file byte for byte.
    const std::string path2 = (fs::temp_directory_path() / "vground_ckpt_test2.vgc").string();
    save_checkpoint(other, path2);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(s1 == s2);

    ModelConfig bigger = ModelConfig::desk();
    bigger.d = 64;
    Model<float> mismatched(bigger, 53);
    CHECK_THROWS_WITH_AS(load_checkpoint(mismatched, path),
                         doctest::Contains("shape mismatch"), IoError);
    std::remove(path.c_str());
    std::remove(path2.c_str());
}

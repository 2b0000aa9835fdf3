// Command-line entry point: synthetic data generation, training, inference,
// evaluation, and gradient verification over one shared JSON config.
//
// Exit codes: 0 success, 1 usage/config error, 2 runtime error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "vground/config.hpp"
#include "vground/gradcheck.hpp"
#include "vground/inference.hpp"
#include "vground/losses.hpp"
#include "vground/metrics.hpp"
#include "vground/model.hpp"
#include "vground/synthgen.hpp"
#include "vground/training.hpp"

namespace fs = std::filesystem;
using namespace vground;

namespace {

constexpr const char* kCodeVersion = "vground 0.1.0";

struct GlobalOpts {
    std::string config_path;
    std::string out_dir = "out";
    std::uint64_t seed = 0;
    bool seed_set = false;
};

RunConfig load_config(const GlobalOpts& g) {
    RunConfig cfg = g.config_path.empty() ? RunConfig::desk() : RunConfig::from_file(g.config_path);
    if (g.seed_set) {
        cfg.train.seed = g.seed;
        cfg.gen.seed = g.seed;
    }
    cfg.validate();
    return cfg;
}

void write_run_meta(const RunConfig& cfg, const std::string& out_dir, const std::string& command) {
    fs::create_directories(out_dir);
    nlohmann::ordered_json meta;
    meta["command"] = command;
    meta["code_version"] = kCodeVersion;
    meta["seed"] = cfg.train.seed;
    meta["config"] = nlohmann::ordered_json::parse(cfg.to_json_text());
    std::ofstream out(fs::path(out_dir) / "run_meta.json");
    if (!out) throw IoError("cannot write run_meta.json under " + out_dir);
    out << meta.dump(2) << "\n";
}

Model<float> build_model(const RunConfig& cfg) { return Model<float>(cfg.model, cfg.train.seed); }

int cmd_gen(const GlobalOpts& g) {
    RunConfig cfg = load_config(g);
    write_run_meta(cfg, g.out_dir, "gen");
    Dataset ds = generate_dataset(cfg.gen);
    write_dataset(ds, g.out_dir);
    std::cout << "wrote " << ds.episodes.size() << " episodes to " << g.out_dir << "\n";
    return 0;
}

int cmd_train(const GlobalOpts& g, const std::string& data_dir, const std::string& tasks_csv,
              const std::string& sampling, const std::string& init_from) {
    RunConfig cfg = load_config(g);
    if (!tasks_csv.empty()) cfg.train.tasks = parse_task_list(tasks_csv);
    if (!sampling.empty()) {
        if (sampling == "round_robin")
            cfg.train.sampling = SamplingMode::RoundRobin;
        else if (sampling == "concat")
            cfg.train.sampling = SamplingMode::Concat;
        else
            throw ConfigError("--sampling must be round_robin or concat");
    }
    write_run_meta(cfg, g.out_dir, "train");

    Dataset ds = read_dataset(data_dir);
    Model<float> model = build_model(cfg);
    if (!init_from.empty()) load_checkpoint(model, init_from);

    TrainResult result = train(model, ds, cfg.train, LossWeights{}, g.out_dir);
    std::cout << "trained " << result.steps << " steps; first-epoch mean loss " << result.epoch_mean_loss.front()
              << ", last " << result.epoch_mean_loss.back() << "\n"
              << "checkpoint: " << result.final_checkpoint << "\n";
    return 0;
}

int cmd_infer(const GlobalOpts& g, const std::string& ckpt, const std::string& data_dir, const std::string& split,
              const std::string& tasks_csv, const std::string& scales_csv, bool no_foreground_head, bool emit_boxes) {
    RunConfig cfg = load_config(g);
    if (!scales_csv.empty()) cfg.inference.scales = parse_int_list(scales_csv);
    if (no_foreground_head) cfg.inference.use_foreground_head = false;
    if (emit_boxes) cfg.inference.emit_boxes_for_temporal = true;
    cfg.inference.validate();
    write_run_meta(cfg, g.out_dir, "infer");

    Dataset ds = read_dataset(data_dir);
    Model<float> model = build_model(cfg);
    load_checkpoint(model, ckpt);

    const std::vector<Task> tasks = tasks_csv.empty() ? cfg.train.tasks : parse_task_list(tasks_csv);
    auto records = run_inference(model, ds, split, cfg.inference, tasks, cfg.train.threads);
    const std::string path = (fs::path(g.out_dir) / "predictions.jsonl").string();
    write_predictions(records, path);
    std::cout << "wrote " << records.size() << " prediction records to " << path << "\n";
    return 0;
}

int cmd_eval(const GlobalOpts& g, const std::string& pred_path, const std::string& data_dir,
             const std::string& baseline, int repeats, const std::string& split) {
    RunConfig cfg = load_config(g);
    write_run_meta(cfg, g.out_dir, "eval");
    Dataset ds = read_dataset(data_dir);

    EvalReport report;
    if (!baseline.empty()) {
        report = random_baselines(ds, split, baseline_mode_from_name(baseline), cfg.train.seed, repeats, cfg.metrics);
    } else {
        if (pred_path.empty()) throw ConfigError("eval needs --pred or --baseline");
        report = evaluate(ds, read_predictions(pred_path), cfg.metrics);
    }

    const std::string json_path = (fs::path(g.out_dir) / "eval_report.json").string();
    std::ofstream json_out(json_path);
    json_out << report.to_json_text() << "\n";
    std::cout << report.to_table_text();
    std::cout << "report: " << json_path << "\n";
    return 0;
}

int cmd_gradcheck(const GlobalOpts& g, const std::string& corrupt) {
    RunConfig cfg = load_config(g);
    write_run_meta(cfg, g.out_dir, "gradcheck");
    if (!corrupt.empty()) set_backward_corruption(corrupt);

    // Small double-precision fixtures per op, then the full model loss on a
    // 4-frame window.
    GradCheckOptions op_opt;
    op_opt.tol = 1e-5;
    GradCheckOptions model_opt;
    model_opt.tol = 1e-4;
    model_opt.sampled_components = 3;
    model_opt.seed = cfg.train.seed;

    bool all_pass = true;
    auto show = [&](const std::string& label, const GradCheckReport& report) {
        for (const auto& e : report.entries) {
            all_pass = all_pass && e.pass;
            std::cout << (e.pass ? "[pass] " : "[FAIL] ") << label << "/" << e.name << "  max rel err "
                      << e.max_rel_err << "\n";
        }
    };

    Rng rng(mix_seed(cfg.train.seed, 0x6c));
    {
        Array<double> a = randn<double>({3, 4}, rng);
        Array<double> b = randn<double>({4, 2}, rng);
        a.set_requires_grad(true);
        b.set_requires_grad(true);
        show("matmul", finite_diff_check([&] { return sum(matmul(a, b)); }, {{"a", a}, {"b", b}}, op_opt));
    }
    {
        Array<double> x = randn<double>({4, 5}, rng);
        Array<double> w = randn<double>({4, 5}, rng);
        x.set_requires_grad(true);
        show("softmax", finite_diff_check([&] { return sum(mul(w, softmax(x, 1))); }, {{"x", x}}, op_opt));
    }
    {
        Array<double> x = randn<double>({3, 6}, rng);
        Array<double> gain = randn<double>({6}, rng);
        Array<double> bias = randn<double>({6}, rng);
        Array<double> w = randn<double>({3, 6}, rng);
        x.set_requires_grad(true);
        gain.set_requires_grad(true);
        bias.set_requires_grad(true);
        show("layer_norm", finite_diff_check([&] { return sum(mul(w, layer_norm(x, gain, bias))); },
                                             {{"x", x}, {"gain", gain}, {"bias", bias}}, op_opt));
    }
    {
        Array<double> q = randn<double>({3, 4}, rng);
        Array<double> k = randn<double>({4, 4}, rng);
        Array<double> v = randn<double>({4, 4}, rng);
        q.set_requires_grad(true);
        k.set_requires_grad(true);
        v.set_requires_grad(true);
        show("attention", finite_diff_check(
                              [&] {
                                  auto res = attention(q, k, v, 2);
                                  Array<double> loss = sum(res.output);
                                  for (const auto& w : res.head_weights) loss = add(loss, sum(mul(w, w)));
                                  return loss;
                              },
                              {{"q", q}, {"k", k}, {"v", v}}, op_opt));
    }
    {
        const int w = 5;
        Array<double> raw_boxes = randn<double>({w, 4}, rng);
        Array<double> raw_sl = randn<double>({w}, rng);
        Array<double> raw_el = randn<double>({w}, rng);
        Array<double> raw_fg = randn<double>({w}, rng);
        Array<double> raw_att = randn<double>({w, w}, rng);
        for (Array<double>* p : {&raw_boxes, &raw_sl, &raw_el, &raw_fg, &raw_att}) p->set_requires_grad(true);
        std::vector<Box> seg_boxes(3, Box{0.4f, 0.6f, 0.3f, 0.2f});
        WindowTargets<double> tgt = build_window_targets<double>(Segment{1, 3}, w, &seg_boxes);
        LossWeights lw;
        show("task_loss",
             finite_diff_check(
                 [&] {
                     FramePredictions<double> preds;
                     preds.boxes = sigmoid(raw_boxes);
                     preds.start_logits = raw_sl;
                     preds.end_logits = raw_el;
                     preds.foreground = sigmoid(raw_fg);
                     AttentionMaps<double> maps;
                     maps.layers = 1;
                     maps.heads = 1;
                     maps.weights.push_back(softmax(raw_att, 1));
                     return task_loss(Task::VQ2D, preds, maps, tgt, lw).first;
                 },
                 {{"boxes", raw_boxes}, {"start", raw_sl}, {"end", raw_el}, {"fg", raw_fg}, {"att", raw_att}},
                 op_opt));
    }
    {
        Model<double> model(cfg.model, cfg.train.seed);
        VideoTensor window;
        window.frames = randn<float>({4, cfg.model.input_h, cfg.model.input_w, cfg.model.channels},
                                     rng, 0.5f);
        Query query;
        query.kind = QueryKind::Visual;
        query.crop = randn<float>({4, 4, cfg.model.channels}, rng, 0.5f);
        std::vector<Box> boxes(3, Box{0.5f, 0.4f, 0.25f, 0.25f});
        WindowTargets<double> tgt = build_window_targets<double>(Segment{1, 3}, 4, &boxes);
        LossWeights lw;
        std::vector<std::pair<std::string, Array<double>>> params;
        for (const auto& p : model.parameters()) params.push_back({p.name, p.value});
        show("model", finite_diff_check(
                          [&] {
                              auto fwd = model.forward(window, query);
                              return task_loss(Task::VQ2D, fwd.preds, fwd.attention, tgt, lw).first;
                          },
                          params, model_opt));
    }
    clear_backward_corruption();
    std::cout << (all_pass ? "gradcheck: PASS\n" : "gradcheck: FAIL\n");
    return all_pass ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Unified multi-task video grounding on synthetic feature-grid videos"};
    app.require_subcommand(1);

    GlobalOpts g;
    app.add_option("--config", g.config_path, "JSON config file (defaults to the built-in desk preset)");
    app.add_option("--out", g.out_dir, "output directory");
    auto* seed_opt = app.add_option("--seed", g.seed, "override the config seed");

    auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");

    std::string data_dir, tasks_csv, sampling, init_from;
    auto* train_cmd = app.add_subcommand("train", "train a model");
    train_cmd->add_option("--data", data_dir, "dataset directory")->required();
    train_cmd->add_option("--tasks", tasks_csv, "comma-separated task subset (vq2d,nlq,mq)");
    train_cmd->add_option("--sampling", sampling, "round_robin or concat");
    train_cmd->add_option("--init-from", init_from, "checkpoint to initialize from");

    std::string ckpt, split = "val", scales_csv, pred_path, baseline;
    bool no_fg = false, emit_boxes = false;
    int repeats = 5;
    auto* infer_cmd = app.add_subcommand("infer", "run inference over a dataset split");
    infer_cmd->add_option("--ckpt", ckpt, "checkpoint file")->required();
    infer_cmd->add_option("--data", data_dir, "dataset directory")->required();
    infer_cmd->add_option("--split", split, "dataset split (default val)");
    infer_cmd->add_option("--tasks", tasks_csv, "comma-separated task subset");
    infer_cmd->add_option("--scales", scales_csv, "temporal subsampling strides, e.g. 1,2,4");
    infer_cmd->add_flag("--no-foreground-head", no_fg, "decode over the whole video instead of peaks (VQ2D)");
    infer_cmd->add_flag("--emit-boxes", emit_boxes, "emit per-frame boxes for temporal tasks");

    auto* eval_cmd = app.add_subcommand("eval", "score predictions or a random baseline");
    eval_cmd->add_option("--pred", pred_path, "predictions.jsonl from infer");
    eval_cmd->add_option("--data", data_dir, "dataset directory")->required();
    eval_cmd->add_option("--baseline", baseline, "random_boxes or random_centered");
    eval_cmd->add_option("--repeats", repeats, "baseline repeats (default 5)");
    eval_cmd->add_option("--split", split, "dataset split for baselines (default val)");

    std::string corrupt;
    auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference verification of all gradients");
    gc_cmd->add_option("--corrupt", corrupt, "deliberately corrupt one op's backward rule (negative control)");

    try {
        app.parse(argc, argv);
        g.seed_set = seed_opt->count() > 0;
        if (gen->parsed()) return cmd_gen(g);
        if (train_cmd->parsed()) return cmd_train(g, data_dir, tasks_csv, sampling, init_from);
        if (infer_cmd->parsed()) return cmd_infer(g, ckpt, data_dir, split, tasks_csv, scales_csv, no_fg, emit_boxes);
        if (eval_cmd->parsed()) return cmd_eval(g, pred_path, data_dir, baseline, repeats, split);
        if (gc_cmd->parsed()) return cmd_gradcheck(g, corrupt);
        return 1;
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}

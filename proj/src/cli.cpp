#include "avflow/cli.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "avflow/analysis.hpp"
#include "avflow/gradcheck.hpp"
#include "avflow/toy_world.hpp"
#include "avflow/trainer.hpp"

namespace avflow {

namespace {

int run_train(const std::string& config_path) {
    RunConfig cfg = RunConfig::from_json_file(config_path);
    RunArtifacts art = train(cfg);
    std::cout << "checkpoint: " << art.checkpoint_path << "\n";
    std::cout << "metrics:    " << art.metrics_path << "\n";
    return 0;
}

int run_sample(const std::string& ckpt, const std::string& cls_name, std::uint64_t seed, int steps,
               double cfg_scale, bool cfg_audio_only, const std::string& out_path) {
    LoadedModel loaded = load_checkpoint(ckpt);
    SampleOptions opts;
    opts.steps = steps;
    opts.cfg_scale = cfg_scale;
    opts.cfg_audio_only = cfg_audio_only;
    opts.seed = seed;
    const EpisodeClass cls = parse_episode_class(cls_name);
    GeneratedBatch gen = sample_av(loaded.model, loaded.frames, cls, opts);

    const int frames = loaded.frames;
    const int n = frames * loaded.config.tokens_per_frame;
    const int d = loaded.config.dim;

    Episode ep;
    ep.cls = cls;
    ep.frames = frames;
    ep.tokens_per_frame = loaded.config.tokens_per_frame;
    ep.video = reshape(gen.video, {frames, d});
    ep.speech = reshape(gen.speech, {n, d});
    ep.sfx = gen.sfx.defined() ? reshape(gen.sfx, {n, d}) : Tensor::zeros({n, d});
    std::vector<double> cs, ca;
    class_conditions(cls, loaded.config.cond_dim, cs, ca);
    ep.cond_speech_sem = Tensor({loaded.config.cond_dim}, std::move(cs));
    ep.cond_scene_sem = Tensor({loaded.config.cond_dim}, std::move(ca));

    // Detect onsets in the generated sfx for the record and the summary line.
    double max_energy = 0.0;
    for (int i = 0; i < n; ++i) {
        double acc = 0.0;
        for (int j = 0; j < d; ++j) {
            const double x = ep.sfx.values()[static_cast<std::size_t>(i * d + j)];
            acc += x * x;
        }
        max_energy = std::max(max_energy, acc / d);
    }
    if (max_energy > 0.0) ep.onsets = onset_times(ep.sfx, 0.5 * max_energy);

    Dataset ds;
    ds.frames = frames;
    ds.tokens_per_frame = loaded.config.tokens_per_frame;
    ds.dims = {d, d, loaded.config.cond_dim};
    ds.episodes.push_back(std::move(ep));
    write_dataset(out_path, ds);

    std::cout << "generated " << episode_class_name(cls) << " sample -> " << out_path << "\n";
    std::cout << "steps=" << steps << " cfg_scale=" << cfg_scale << " seed=" << seed << "\n";
    std::cout << "detected sfx onsets:";
    for (int idx : ds.episodes[0].onsets) std::cout << ' ' << idx;
    std::cout << "\n";
    return 0;
}

int run_eval_sync(const std::string& ckpt, int episodes, std::uint64_t seed, int steps, double cfg_scale,
                  bool condition_video, const std::string& out_path) {
    LoadedModel loaded = load_checkpoint(ckpt);
    SyncEvalOptions opts;
    opts.episodes = episodes;
    opts.seed = seed;
    opts.steps = steps;
    opts.cfg_scale = cfg_scale;
    opts.condition_video = condition_video;
    SyncEvalResult result = eval_sync(loaded.model, loaded.frames, opts);

    std::ofstream out(out_path);
    if (!out) throw IoError("eval-sync: cannot write '" + out_path + "'");
    out << result.to_csv();
    std::cout << "episodes=" << episodes << " mean_abs_lag=" << result.aggregate_mean
              << " median=" << result.aggregate_median << " -> " << out_path << "\n";
    return 0;
}

int run_analyze_gates(const std::string& ckpt, int episodes, std::uint64_t seed, const std::string& out_path) {
    LoadedModel loaded = load_checkpoint(ckpt);
    FeatureDims dims{loaded.config.dim, loaded.config.dim, loaded.config.cond_dim};
    std::vector<Episode> data;
    for (int i = 0; i < episodes; ++i)
        data.push_back(generate_episode(seed + static_cast<std::uint64_t>(i), loaded.frames,
                                        loaded.config.tokens_per_frame, static_cast<EpisodeClass>(i % 3), dims));

    GateReport report = gate_analysis(loaded.model, data, sampler_timesteps(50), seed);
    std::ofstream out(out_path);
    if (!out) throw IoError("analyze-gates: cannot write '" + out_path + "'");
    out << report.to_csv();

    const int last = loaded.config.layers_audio - 1;
    std::cout << "gate means at final layer (all buckets):\n";
    for (int cls = 0; cls < 3; ++cls) {
        double sum_sp = 0.0, sum_fx = 0.0;
        long count = 0;
        for (int bucket = 0; bucket < 10; ++bucket) {
            auto it = report.cells.find({last, bucket, cls});
            if (it == report.cells.end()) continue;
            sum_sp += it->second.sum_speech;
            sum_fx += it->second.sum_sfx;
            count += it->second.count;
        }
        if (count > 0)
            std::printf("  %-15s g_sp=%.4f g_sfx=%.4f (n=%ld)\n",
                        episode_class_name(static_cast<EpisodeClass>(cls)), sum_sp / count, sum_fx / count, count);
    }
    std::cout << "report -> " << out_path << "\n";
    return 0;
}

int run_grad_check() {
    bool ok = true;
    for (const GradCheckResult& r : run_grad_checks()) {
        const bool pass = r.max_rel_error <= 1e-4;
        ok = ok && pass;
        std::printf("%-24s max_rel_error=%.3e  %s\n", r.name.c_str(), r.max_rel_error, pass ? "ok" : "FAIL");
    }
    return ok ? 0 : 1;
}

int run_dataset_gen(const std::string& out_path, int count, int frames, int tokens_per_frame, int dim,
                    int cond_dim, std::uint64_t seed) {
    Dataset ds;
    ds.frames = frames;
    ds.tokens_per_frame = tokens_per_frame;
    ds.dims = {dim, dim, cond_dim};
    for (int i = 0; i < count; ++i)
        ds.episodes.push_back(generate_episode(seed + static_cast<std::uint64_t>(i), frames, tokens_per_frame,
                                               static_cast<EpisodeClass>(i % 3), ds.dims));
    write_dataset(out_path, ds);
    std::cout << "wrote " << count << " episodes -> " << out_path << "\n";
    return 0;
}

}  // namespace

int cli_main(const std::vector<std::string>& args) {
    CLI::App app{"coupled audio-video flow-matching lab"};
    app.require_subcommand(1);

    auto* train_cmd = app.add_subcommand("train", "run the training loop from a JSON config");
    std::string config_path;
    train_cmd->add_option("--config", config_path, "path to run config JSON")->required();

    auto* sample_cmd = app.add_subcommand("sample", "generate one audio-video sample from a checkpoint");
    std::string ckpt, cls_name = "Balanced", sample_out = "sample.avfd";
    std::uint64_t seed = 0;
    int steps = 50;
    double cfg_scale = 6.0;
    bool cfg_audio_only = false;
    sample_cmd->add_option("--ckpt", ckpt, "checkpoint path")->required();
    sample_cmd->add_option("--class", cls_name, "episode class (NarrationHeavy|SfxHeavy|Balanced)");
    sample_cmd->add_option("--seed", seed, "noise seed");
    sample_cmd->add_option("--steps", steps, "sampler steps");
    sample_cmd->add_option("--cfg-scale", cfg_scale, "guidance scale");
    sample_cmd->add_flag("--cfg-audio-only", cfg_audio_only, "guide only the audio branch");
    sample_cmd->add_option("--out", sample_out, "output dataset file");

    auto* sync_cmd = app.add_subcommand("eval-sync", "measure generated motion/sfx alignment");
    std::string sync_ckpt, sync_out = "sync_report.csv";
    int sync_episodes = 9;
    std::uint64_t sync_seed = 0;
    int sync_steps = 50;
    double sync_cfg = 6.0;
    bool condition_video = false;
    sync_cmd->add_option("--ckpt", sync_ckpt, "checkpoint path")->required();
    sync_cmd->add_option("--episodes", sync_episodes, "number of evaluation episodes");
    sync_cmd->add_option("--seed", sync_seed, "noise/episode seed");
    sync_cmd->add_option("--steps", sync_steps, "sampler steps");
    sync_cmd->add_option("--cfg-scale", sync_cfg, "guidance scale");
    sync_cmd->add_flag("--condition-video", condition_video, "hold video at ground truth, integrate audio only");
    sync_cmd->add_option("--out", sync_out, "output CSV");

    auto* gates_cmd = app.add_subcommand("analyze-gates", "collect SCG gate statistics");
    std::string gates_ckpt, gates_out = "gate_report.csv";
    int gates_episodes = 6;
    std::uint64_t gates_seed = 12345;
    gates_cmd->add_option("--ckpt", gates_ckpt, "checkpoint path")->required();
    gates_cmd->add_option("--episodes", gates_episodes, "episodes per analysis");
    gates_cmd->add_option("--seed", gates_seed, "episode/noise seed");
    gates_cmd->add_option("--out", gates_out, "output CSV");

    app.add_subcommand("grad-check", "finite-difference checks over every block");

    auto* data_cmd = app.add_subcommand("dataset-gen", "write a synthetic episode dataset");
    std::string data_out;
    int data_count = 0, data_frames = 16, data_r = 2, data_dim = 32, data_cond = 8;
    std::uint64_t data_seed = 12345;
    data_cmd->add_option("--out", data_out, "output path")->required();
    data_cmd->add_option("--count", data_count, "episode count")->required();
    data_cmd->add_option("--frames", data_frames, "video frames per episode");
    data_cmd->add_option("--tokens-per-frame", data_r, "audio tokens per frame");
    data_cmd->add_option("--dim", data_dim, "feature dimension");
    data_cmd->add_option("--cond-dim", data_cond, "condition dimension");
    data_cmd->add_option("--seed", data_seed, "base episode seed");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (app.got_subcommand(train_cmd)) return run_train(config_path);
        if (app.got_subcommand(sample_cmd))
            return run_sample(ckpt, cls_name, seed, steps, cfg_scale, cfg_audio_only, sample_out);
        if (app.got_subcommand(sync_cmd))
            return run_eval_sync(sync_ckpt, sync_episodes, sync_seed, sync_steps, sync_cfg, condition_video, sync_out);
        if (app.got_subcommand(gates_cmd)) return run_analyze_gates(gates_ckpt, gates_episodes, gates_seed, gates_out);
        if (app.got_subcommand("grad-check")) return run_grad_check();
        if (app.got_subcommand(data_cmd))
            return run_dataset_gen(data_out, data_count, data_frames, data_r, data_dim, data_cond, data_seed);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}

}  // namespace avflow

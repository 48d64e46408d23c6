#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "avflow/analysis.hpp"
#include "avflow/cli.hpp"

using namespace avflow;

namespace {

Tensor impulses_at(const std::vector<int>& indices, int n, int dim) {
    Tensor t = Tensor::zeros({n, dim});
    for (int idx : indices)
        for (int j = 0; j < dim; ++j) t.mutate_data()[static_cast<std::size_t>(idx * dim + j)] = 1.5;
    return t;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.values().size(); ++i)
        worst = std::max(worst, std::abs(a.values()[i] - b.values()[i]));
    return worst;
}

}  // namespace

TEST_CASE("desync metric on constructed onset patterns") {
    const int n = 64, dim = 4;
    const std::vector<int> peaks{8, 16, 24, 32, 40, 48, 56};

    SUBCASE("onsets exactly at the peaks score zero lag") {
        SyncStats s = desync_metric(impulses_at(peaks, n, dim), peaks);
        CHECK(s.mean_abs_lag == 0.0);
        CHECK(s.matched == static_cast<int>(peaks.size()));
        CHECK(s.unmatched == 0);
    }
    SUBCASE("a uniform +3 shift scores lag 3") {
        std::vector<int> shifted;
        for (int p : peaks) shifted.push_back(p + 3);
        SyncStats s = desync_metric(impulses_at(shifted, n, dim), peaks);
        CHECK(s.mean_abs_lag == doctest::Approx(3.0));
        CHECK(s.matched == static_cast<int>(peaks.size()));
    }
    SUBCASE("translation of both sets leaves the lag unchanged") {
        std::vector<int> jittered{7, 18, 23, 34, 41, 47, 58};
        const double base = desync_metric(impulses_at(jittered, n, dim), peaks).mean_abs_lag;
        std::vector<int> peaks_shift, jitter_shift;
        for (int p : peaks) peaks_shift.push_back(p + 4);
        for (int p : jittered) jitter_shift.push_back(p + 4);
        const double moved = desync_metric(impulses_at(jitter_shift, n, dim), peaks_shift).mean_abs_lag;
        CHECK(base == doctest::Approx(moved));
    }
    SUBCASE("uniform +-2 token jitter matches the enumeration expectation") {
        // E|U{-2..2}| by direct enumeration.
        double expected = 0.0;
        for (int j = -2; j <= 2; ++j) expected += std::abs(j);
        expected /= 5.0;
        CHECK(expected == doctest::Approx(1.2));

        Rng rng(123);
        double total = 0.0;
        const int trials = 1000;
        for (int trial = 0; trial < trials; ++trial) {
            std::vector<int> jittered;
            for (int p : peaks) jittered.push_back(p + static_cast<int>(rng.below(5)) - 2);
            total += desync_metric(impulses_at(jittered, n, dim), peaks).mean_abs_lag;
        }
        const double mean = total / trials;
        CHECK(mean >= 0.8 * expected);
        CHECK(mean <= 1.2 * expected);
    }
    SUBCASE("unmatched onsets are reported, not dropped") {
        std::vector<int> sparse{8, 16};
        SyncStats s = desync_metric(impulses_at(sparse, n, dim), peaks);
        CHECK(s.matched == 2);
        CHECK(s.unmatched == static_cast<int>(peaks.size()) - 2);
    }
    SUBCASE("empty peak list is a domain error") {
        CHECK_THROWS_AS(desync_metric(impulses_at(peaks, n, dim), {}), DomainError);
    }
    SUBCASE("silent generation takes the full-window penalty") {
        SyncStats s = desync_metric(Tensor::zeros({n, dim}), peaks, 8);
        CHECK(s.matched == 0);
        CHECK(s.mean_abs_lag == 8.0);
    }
}

TEST_CASE("sampling is deterministic and honors the defaults") {
    SampleOptions defaults;
    CHECK(defaults.steps == 50);
    CHECK(defaults.cfg_scale == 6.0);

    Rng rng(101);
    ModelConfig mc;
    mc.layers_video = 1;
    mc.layers_audio = 1;
    mc.dim = 8;
    mc.heads = 2;
    mc.cond_dim = 6;
    FusionModel model(mc, rng);

    SampleOptions opts;
    opts.steps = 5;
    opts.seed = 3;
    GeneratedBatch a = sample_av(model, 8, EpisodeClass::Balanced, opts);
    GeneratedBatch b = sample_av(model, 8, EpisodeClass::Balanced, opts);
    CHECK(max_abs_diff(a.video, b.video) == 0.0);
    CHECK(max_abs_diff(a.speech, b.speech) == 0.0);
    CHECK(max_abs_diff(a.sfx, b.sfx) == 0.0);

    opts.seed = 4;
    GeneratedBatch c = sample_av(model, 8, EpisodeClass::Balanced, opts);
    CHECK(max_abs_diff(a.video, c.video) > 0.0);
}

TEST_CASE("zero-fusion video generation ignores the condition") {
    Rng rng(102);
    ModelConfig mc;
    mc.layers_video = 1;
    mc.layers_audio = 1;
    mc.dim = 8;
    mc.heads = 2;
    mc.cond_dim = 6;
    FusionModel model(mc, rng);
    model.zero_fusion();

    SampleOptions opts;
    opts.steps = 4;
    opts.seed = 9;
    GeneratedBatch narration = sample_av(model, 8, EpisodeClass::NarrationHeavy, opts);
    GeneratedBatch sfx_heavy = sample_av(model, 8, EpisodeClass::SfxHeavy, opts);
    CHECK(max_abs_diff(narration.video, sfx_heavy.video) == 0.0);
    CHECK(max_abs_diff(narration.speech, sfx_heavy.speech) > 0.0);
}

TEST_CASE("gate analysis reports neutral gates for an untrained model") {
    Rng rng(103);
    ModelConfig mc;
    mc.layers_video = 2;
    mc.layers_audio = 2;
    mc.dim = 8;
    mc.heads = 2;
    mc.cond_dim = 6;
    FusionModel model(mc, rng);

    FeatureDims dims{mc.dim, mc.dim, mc.cond_dim};
    std::vector<Episode> data;
    for (int i = 0; i < 6; ++i)
        data.push_back(generate_episode(static_cast<std::uint64_t>(i), 8, mc.tokens_per_frame,
                                        static_cast<EpisodeClass>(i % 3), dims));

    GateReport report = gate_analysis(model, data, sampler_timesteps(10), 7);
    for (int layer = 0; layer < 2; ++layer)
        for (int bucket = 0; bucket < 10; ++bucket)
            for (int cls = 0; cls < 3; ++cls) {
                CHECK(report.mean_speech(layer, bucket, cls) == 0.5);
                CHECK(report.mean_sfx(layer, bucket, cls) == 0.5);
            }

    SUBCASE("csv carries layers x 10 x classes rows and is reproducible") {
        const std::string csv = report.to_csv();
        int data_lines = -2;  // comment + column header
        std::stringstream ss(csv);
        std::string line;
        while (std::getline(ss, line))
            if (!line.empty()) ++data_lines;
        CHECK(data_lines == 2 * 10 * 3);

        GateReport again = gate_analysis(model, data, sampler_timesteps(10), 7);
        CHECK(again.to_csv() == csv);
    }

    SUBCASE("gate analysis demands the gated path") {
        ModelConfig no_gate = mc;
        no_gate.disable_scg = true;
        Rng rng2(104);
        FusionModel plain(no_gate, rng2);
        CHECK_THROWS_AS(gate_analysis(plain, data, sampler_timesteps(10), 7), ContractError);
    }
}

TEST_CASE("eval-sync produces one row per episode") {
    Rng rng(105);
    ModelConfig mc;
    mc.layers_video = 1;
    mc.layers_audio = 1;
    mc.dim = 8;
    mc.heads = 2;
    mc.cond_dim = 6;
    FusionModel model(mc, rng);

    SyncEvalOptions opts;
    opts.episodes = 3;
    opts.steps = 4;
    SyncEvalResult result = eval_sync(model, 8, opts);
    REQUIRE(result.rows.size() == 3);
    for (const EpisodeSync& row : result.rows) {
        CHECK(row.mean_abs_lag >= 0.0);
        CHECK(row.mean_abs_lag <= 8.0);
    }
    const std::string csv = result.to_csv();
    CHECK(csv.rfind("episode,mean_abs_lag,matched,unmatched\n", 0) == 0);

    SUBCASE("video-conditioned variant also runs") {
        opts.condition_video = true;
        SyncEvalResult r2 = eval_sync(model, 8, opts);
        CHECK(r2.rows.size() == 3);
    }
}

TEST_CASE("cli exit codes and smoke flow") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "avflow_cli_test";
    fs::remove_all(dir);
    fs::create_directories(dir);

    SUBCASE("usage errors exit with 2") {
        CHECK(cli_main({}) == 2);
        CHECK(cli_main({"frobnicate"}) == 2);
        CHECK(cli_main({"train"}) == 2);  // missing --config
        CHECK(cli_main({"sample", "--bogus-flag"}) == 2);
    }

    SUBCASE("dataset-gen then train then sample then eval-sync") {
        const std::string data_path = (dir / "toy.avfd").string();
        CHECK(cli_main({"dataset-gen", "--out", data_path, "--count", "3", "--frames", "8", "--dim", "8",
                        "--cond-dim", "6"}) == 0);
        CHECK(fs::exists(data_path));
        Dataset ds = read_dataset(data_path);
        CHECK(ds.episodes.size() == 3);

        const std::string cfg_path = (dir / "run.json").string();
        {
            std::ofstream cfg(cfg_path);
            cfg << "{\"total_steps\": 6, \"batch_size\": 2, \"episodes\": 3, \"frames\": 8, \"dim\": 8,"
                << "\"heads\": 2, \"layers_video\": 1, \"layers_audio\": 1, \"cond_dim\": 6,"
                << "\"out_dir\": \"" << (dir / "run").string() << "\"}";
        }
        CHECK(cli_main({"train", "--config", cfg_path}) == 0);
        const std::string ckpt = (dir / "run" / "checkpoint_final.unis").string();
        CHECK(fs::exists(ckpt));
        CHECK(fs::exists(dir / "run" / "metrics.csv"));

        const std::string sample_path = (dir / "gen.avfd").string();
        CHECK(cli_main({"sample", "--ckpt", ckpt, "--class", "NarrationHeavy", "--seed", "1", "--steps", "4",
                        "--out", sample_path}) == 0);
        Dataset gen = read_dataset(sample_path);
        CHECK(gen.episodes.size() == 1);
        CHECK(gen.episodes[0].cls == EpisodeClass::NarrationHeavy);

        const std::string sync_path = (dir / "sync.csv").string();
        CHECK(cli_main({"eval-sync", "--ckpt", ckpt, "--episodes", "2", "--steps", "3", "--out", sync_path}) == 0);
        CHECK(fs::exists(sync_path));

        const std::string gates_path = (dir / "gates.csv").string();
        CHECK(cli_main({"analyze-gates", "--ckpt", ckpt, "--episodes", "3", "--out", gates_path}) == 0);
        CHECK(fs::exists(gates_path));

        CHECK(cli_main({"sample", "--ckpt", (dir / "missing.unis").string()}) == 1);
    }
    fs::remove_all(dir);
}

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "avflow/trainer.hpp"

using namespace avflow;

namespace {

RunConfig tiny_run(const std::string& out_dir) {
    RunConfig cfg;
    cfg.total_steps = 10;
    cfg.batch_size = 2;
    cfg.episodes = 3;
    cfg.frames = 8;
    cfg.tokens_per_frame = 2;
    cfg.dim = 8;
    cfg.heads = 2;
    cfg.layers_video = 1;
    cfg.layers_audio = 1;
    cfg.cond_dim = 6;
    cfg.seed = 5;
    cfg.out_dir = out_dir;
    return cfg;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

struct CsvRow {
    long step;
    std::string phase;
    double t_v, t_a;
    int d;
    double w_v, w_a, loss_v, loss_sp, loss_sfx, loss_total;
};

std::vector<CsvRow> parse_metrics(const std::string& path) {
    std::ifstream in(path);
    REQUIRE(in);
    std::string line;
    std::getline(in, line);  // header
    std::vector<CsvRow> rows;
    while (std::getline(in, line)) {
        CsvRow r;
        char phase[64];
        const int got = std::sscanf(line.c_str(), "%ld,%63[^,],%lf,%lf,%d,%lf,%lf,%lf,%lf,%lf,%lf", &r.step, phase,
                                    &r.t_v, &r.t_a, &r.d, &r.w_v, &r.w_a, &r.loss_v, &r.loss_sp, &r.loss_sfx,
                                    &r.loss_total);
        REQUIRE(got == 11);
        r.phase = phase;
        rows.push_back(r);
    }
    return rows;
}

std::string temp_dir(const std::string& tag) {
    const auto p = std::filesystem::temp_directory_path() / ("avflow_" + tag);
    std::filesystem::remove_all(p);
    return p.string();
}

}  // namespace

TEST_CASE("dual audio loss is two independent flow-matching losses") {
    Rng rng(80);
    Tensor sp0 = Tensor::randn({2, 4, 3}, rng), sp1 = Tensor::randn({2, 4, 3}, rng);
    Tensor fx0 = Tensor::randn({2, 4, 3}, rng), fx1 = Tensor::randn({2, 4, 3}, rng);
    FlowSample sp = interpolate(sp0, sp1, 0.4);
    FlowSample fx = interpolate(fx0, fx1, 0.4);

    SUBCASE("perfect predictions give (0, 0)") {
        auto [a, b] = dual_audio_loss(sp.u_target, fx.u_target, sp, fx);
        CHECK(a.item() == 0.0);
        CHECK(b.item() == 0.0);
    }
    SUBCASE("perturbing the sfx prediction leaves the speech loss unchanged") {
        Tensor sp_pred = Tensor::randn({2, 4, 3}, rng);
        Tensor fx_pred = Tensor::randn({2, 4, 3}, rng);
        auto [a1, b1] = dual_audio_loss(sp_pred, fx_pred, sp, fx);
        Tensor fx_pred2 = Tensor::randn({2, 4, 3}, rng);
        auto [a2, b2] = dual_audio_loss(sp_pred, fx_pred2, sp, fx);
        CHECK(a1.item() == a2.item());
        CHECK(b1.item() != b2.item());
    }
    SUBCASE("each side equals the cfm oracle") {
        Tensor sp_pred = Tensor::randn({2, 4, 3}, rng);
        Tensor fx_pred = Tensor::randn({2, 4, 3}, rng);
        auto [a, b] = dual_audio_loss(sp_pred, fx_pred, sp, fx);
        CHECK(a.item() == doctest::Approx(cfm_loss(sp_pred, sp).item()).epsilon(1e-15));
        CHECK(b.item() == doctest::Approx(cfm_loss(fx_pred, fx).item()).epsilon(1e-15));
    }
}

TEST_CASE("ti2av steps under a synchronized schedule") {
    RunConfig cfg = tiny_run(temp_dir("sync_step"));
    cfg.schedule = ForcingSchedule::SyncOnly;
    cfg.total_steps = 20;

    FeatureDims dims{cfg.dim, cfg.dim, cfg.cond_dim};
    std::vector<Episode> data;
    for (int i = 0; i < 3; ++i)
        data.push_back(generate_episode(100 + static_cast<std::uint64_t>(i), cfg.frames, cfg.tokens_per_frame,
                                        static_cast<EpisodeClass>(i % 3), dims));
    std::vector<const Episode*> batch{&data[0], &data[1], &data[2]};

    Rng rng(cfg.seed);
    FusionModel model(cfg.model_config(), rng);
    Adam opt(model.parameters(), cfg.learning_rate);

    for (long s = 0; s < 20; ++s) {
        StepReport r = ti2av_step(model, batch, schedule_state(cfg, s), opt, rng);
        CHECK(r.t_v == r.t_a);
        CHECK(r.w_v == 1.0);
        CHECK(r.w_a == 1.0);
        CHECK(r.loss_total ==
              doctest::Approx(r.w_v * r.loss_v + r.w_a * (r.loss_sp + r.loss_sfx)).epsilon(1e-10));
    }
}

TEST_CASE("fifty full-batch steps reduce the loss") {
    RunConfig cfg = tiny_run(temp_dir("descent"));
    cfg.schedule = ForcingSchedule::ProgForcing;
    cfg.total_steps = 50;
    cfg.learning_rate = 1e-3;

    FeatureDims dims{cfg.dim, cfg.dim, cfg.cond_dim};
    std::vector<Episode> data;
    for (int i = 0; i < 8; ++i)
        data.push_back(generate_episode(200 + static_cast<std::uint64_t>(i), cfg.frames, cfg.tokens_per_frame,
                                        static_cast<EpisodeClass>(i % 3), dims));
    std::vector<const Episode*> batch;
    for (auto& e : data) batch.push_back(&e);

    Rng rng(0);
    FusionModel model(cfg.model_config(), rng);
    Adam opt(model.parameters(), cfg.learning_rate);

    double first = 0.0, last = 0.0;
    for (long s = 0; s < 50; ++s) {
        StepReport r = ti2av_step(model, batch, schedule_state(cfg, s), opt, rng);
        if (s == 0) first = r.loss_total;
        last = r.loss_total;
    }
    CHECK(last < first);
}

TEST_CASE("training boundaries, reweighting and the CMFS kill switch") {
    SUBCASE("ten steps split 3/4/3 across the phases") {
        RunConfig cfg = tiny_run(temp_dir("phases"));
        RunArtifacts art = train(cfg);
        auto rows = parse_metrics(art.metrics_path);
        REQUIRE(rows.size() == 10);
        for (long s = 0; s < 10; ++s) {
            const std::string& phase = rows[static_cast<std::size_t>(s)].phase;
            if (s < 3) CHECK(phase == "SyncWarmup");
            else if (s < 7) CHECK(phase == "IncrementalDecoupling");
            else CHECK(phase == "FullIndependence");
        }
    }
    SUBCASE("disable_CMFS forces synchronized steps with unit weights") {
        RunConfig cfg = tiny_run(temp_dir("nocmfs"));
        cfg.disable_cmfs = true;
        RunArtifacts art = train(cfg);
        for (const CsvRow& r : parse_metrics(art.metrics_path)) {
            CHECK(r.t_v == r.t_a);
            CHECK(r.w_v == 1.0);
            CHECK(r.w_a == 1.0);
            CHECK(r.phase == "SyncWarmup");
        }
    }
    SUBCASE("whenever reweighting is active the branch at larger t is upweighted") {
        RunConfig cfg = tiny_run(temp_dir("upweight"));
        cfg.total_steps = 60;
        RunArtifacts art = train(cfg);
        int decoupled_steps = 0;
        for (const CsvRow& r : parse_metrics(art.metrics_path)) {
            CHECK(r.loss_total ==
                  doctest::Approx(r.w_v * r.loss_v + r.w_a * (r.loss_sp + r.loss_sfx)).epsilon(1e-10));
            if (r.phase == "SyncWarmup") continue;
            if (r.t_v > r.t_a) {
                CHECK(r.d == 1);
                CHECK(r.w_v == doctest::Approx(1.5));
                CHECK(r.w_a == doctest::Approx(1.0));
                ++decoupled_steps;
            } else if (r.t_a > r.t_v) {
                CHECK(r.d == 0);
                CHECK(r.w_a == doctest::Approx(1.5));
                CHECK(r.w_v == doctest::Approx(1.0));
                ++decoupled_steps;
            } else {
                CHECK(r.d == 0);
            }
        }
        CHECK(decoupled_steps > 0);
    }
}

TEST_CASE("identical config and seed reproduce byte-identical artifacts") {
    RunConfig a = tiny_run(temp_dir("det_a"));
    RunConfig b = tiny_run(temp_dir("det_b"));
    RunArtifacts ra = train(a);
    RunArtifacts rb = train(b);
    CHECK(slurp(ra.metrics_path) == slurp(rb.metrics_path));
    CHECK(slurp(ra.checkpoint_path) == slurp(rb.checkpoint_path));

    RunConfig c = tiny_run(temp_dir("det_c"));
    c.seed = 6;
    RunArtifacts rc = train(c);
    CHECK(slurp(ra.metrics_path) != slurp(rc.metrics_path));
}

TEST_CASE("checkpoints round-trip parameters at float32 precision") {
    Rng rng(91);
    ModelConfig mc;
    mc.layers_video = 1;
    mc.layers_audio = 1;
    mc.dim = 8;
    mc.heads = 2;
    mc.cond_dim = 6;
    FusionModel model(mc, rng);

    const std::string path = (std::filesystem::temp_directory_path() / "avflow_ckpt.unis").string();
    save_checkpoint(path, model, 8);
    LoadedModel loaded = load_checkpoint(path);

    CHECK(loaded.frames == 8);
    CHECK(loaded.config.dim == 8);
    ParamRefs orig = model.parameters();
    ParamRefs back = loaded.model.parameters();
    REQUIRE(orig.size() == back.size());
    for (std::size_t i = 0; i < orig.size(); ++i) {
        CHECK(orig[i]->name == back[i]->name);
        for (std::size_t j = 0; j < orig[i]->value.values().size(); ++j) {
            const double expected = static_cast<double>(static_cast<float>(orig[i]->value.values()[j]));
            CHECK(back[i]->value.values()[j] == expected);
        }
    }
    std::filesystem::remove(path);

    CHECK_THROWS_AS(load_checkpoint("/nonexistent/nothing.unis"), IoError);
}

TEST_CASE("config parsing is strict about keys") {
    CHECK_THROWS_AS(RunConfig::from_json_text("{\"totally_unknown\": 1}"), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_json_text("{\"ratios\": [0.5, 0.5]}"), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_json_text("not json"), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_json_text("{\"schedule\": \"Sometimes\"}"), ConfigError);

    RunConfig cfg = RunConfig::from_json_text(
        "{\"total_steps\": 42, \"schedule\": \"IndepOnly\", \"lambda\": 0.25, \"disable_SCG\": true}");
    CHECK(cfg.total_steps == 42);
    CHECK(cfg.schedule == ForcingSchedule::IndepOnly);
    CHECK(cfg.lambda == 0.25);
    CHECK(cfg.disable_scg);
    CHECK(cfg.cfg_scale == 6.0);
    CHECK(cfg.sample_steps == 50);
    CHECK(cfg.delta_max == 0.25);
}

TEST_CASE("non-finite activations abort with a diagnostic") {
    RunConfig cfg = tiny_run(temp_dir("poison"));
    FeatureDims dims{cfg.dim, cfg.dim, cfg.cond_dim};
    Episode ep = generate_episode(1, cfg.frames, cfg.tokens_per_frame, EpisodeClass::Balanced, dims);
    std::vector<const Episode*> batch{&ep};

    Rng rng(0);
    FusionModel model(cfg.model_config(), rng);
    ParamRefs params = model.parameters();
    std::fill(params[0]->value.mutate_data().begin(), params[0]->value.mutate_data().end(), 1e308);
    Adam opt(params, cfg.learning_rate);
    CHECK_THROWS_AS(ti2av_step(model, batch, schedule_state(cfg, 0), opt, rng), EvalError);
}

TEST_CASE("unwritable output directory fails before any compute") {
    RunConfig cfg = tiny_run("/proc/avflow_forbidden/run");
    CHECK_THROWS_AS(train(cfg), IoError);
}

TEST_CASE("frozen video parameters stay put while audio learns") {
    RunConfig cfg = tiny_run(temp_dir("freeze"));
    cfg.freeze_video = true;
    cfg.total_steps = 5;
    RunArtifacts art = train(cfg);

    LoadedModel loaded = load_checkpoint(art.checkpoint_path);
    Rng rng(cfg.seed);
    FusionModel fresh(cfg.model_config(), rng);

    ParamRefs trained = loaded.model.parameters();
    ParamRefs init = fresh.parameters();
    ParamRefs frozen = fresh.video_parameters();
    REQUIRE(trained.size() == init.size());
    for (std::size_t i = 0; i < trained.size(); ++i) {
        const bool is_video = std::find(frozen.begin(), frozen.end(), init[i]) != frozen.end();
        if (!is_video) continue;
        for (std::size_t j = 0; j < trained[i]->value.values().size(); ++j) {
            const double expected = static_cast<double>(static_cast<float>(init[i]->value.values()[j]));
            CHECK(trained[i]->value.values()[j] == expected);
        }
    }
}

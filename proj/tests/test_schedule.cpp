#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "avflow/flow.hpp"
#include "avflow/schedule.hpp"

using namespace avflow;

namespace {

// Kolmogorov-Smirnov statistic against U[0,1].
double ks_statistic(std::vector<double> draws) {
    std::sort(draws.begin(), draws.end());
    const double n = static_cast<double>(draws.size());
    double worst = 0.0;
    for (std::size_t i = 0; i < draws.size(); ++i) {
        const double x = draws[i];
        const double lo = static_cast<double>(i) / n;
        const double hi = static_cast<double>(i + 1) / n;
        worst = std::max(worst, std::max(std::abs(hi - x), std::abs(x - lo)));
    }
    return worst;
}

}  // namespace

TEST_CASE("per-element timesteps are uniform and reproducible") {
    Rng rng(5);
    auto draws = sample_df_timesteps(4, rng);
    CHECK(draws.size() == 4);
    for (double t : draws) {
        CHECK(t >= 0.0);
        CHECK(t < 1.0);
    }

    Rng a(42), b(42);
    CHECK(sample_df_timesteps(16, a) == sample_df_timesteps(16, b));

    CHECK_THROWS_AS(sample_df_timesteps(0, rng), DomainError);

    Rng big(1234);
    CHECK(ks_statistic(sample_df_timesteps(100000, big)) < 0.01);
}

TEST_CASE("df loss sums per-element mean squared errors") {
    Rng rng(6);
    SUBCASE("single model call at one noise level reduces to L x batch loss") {
        const int length = 5;
        Tensor pred = Tensor::randn({length, 3, 4}, rng);
        Tensor target = Tensor::randn({length, 3, 4}, rng);
        std::vector<Tensor> preds, targets;
        for (int i = 0; i < length; ++i) {
            preds.push_back(Tensor({3, 4}, std::vector<double>(pred.values().begin() + i * 12,
                                                               pred.values().begin() + (i + 1) * 12)));
            targets.push_back(Tensor({3, 4}, std::vector<double>(target.values().begin() + i * 12,
                                                                 target.values().begin() + (i + 1) * 12)));
        }
        FlowSample batch;
        batch.u_target = target;
        const double whole = cfm_loss(pred, batch).item();
        CHECK(df_loss(preds, targets).item() == doctest::Approx(length * whole).epsilon(1e-12));
    }
    SUBCASE("perfect predictions score zero") {
        std::vector<Tensor> ts{Tensor::randn({2, 2}, rng), Tensor::randn({2, 2}, rng)};
        CHECK(df_loss(ts, ts).item() == 0.0);
    }
    SUBCASE("random case matches the loop oracle") {
        std::vector<Tensor> preds, targets;
        double oracle = 0.0;
        for (int i = 0; i < 3; ++i) {
            preds.push_back(Tensor::randn({2, 3}, rng));
            targets.push_back(Tensor::randn({2, 3}, rng));
            double acc = 0.0;
            for (std::size_t j = 0; j < 6; ++j) {
                const double d = preds.back().values()[j] - targets.back().values()[j];
                acc += d * d;
            }
            oracle += acc / 6.0;
        }
        CHECK(std::abs(df_loss(preds, targets).item() - oracle) <= 1e-12);
    }
    SUBCASE("length mismatch is rejected") {
        std::vector<Tensor> two{Tensor::zeros({2}), Tensor::zeros({2})};
        std::vector<Tensor> one{Tensor::zeros({2})};
        CHECK_THROWS_AS(df_loss(two, one), ShapeError);
    }
}

TEST_CASE("direction weights follow the printed rule") {
    TimestepPair p = direction_weights(0.6, 0.2, 0.5);
    CHECK(p.audio_leads == 1);
    CHECK(p.weight_video == doctest::Approx(1.5));
    CHECK(p.weight_audio == doctest::Approx(1.0));

    // Strict indicator: a tie counts as video leading.
    p = direction_weights(0.4, 0.4, 0.5);
    CHECK(p.audio_leads == 0);
    CHECK(p.weight_video == doctest::Approx(1.0));
    CHECK(p.weight_audio == doctest::Approx(1.5));

    p = direction_weights(0.9, 0.1, 0.0);
    CHECK(p.weight_video == doctest::Approx(1.0));
    CHECK(p.weight_audio == doctest::Approx(1.0));

    CHECK_THROWS_AS(direction_weights(1.2, 0.5, 0.5), DomainError);
    CHECK_THROWS_AS(direction_weights(0.5, 0.5, -0.1), DomainError);
}

TEST_CASE("curriculum state boundaries and ramp") {
    CurriculumState s = curriculum_state(0, 1000);
    CHECK(s.phase == Phase::SyncWarmup);
    CHECK(s.p_independent == 0.0);
    CHECK_FALSE(s.reweight_active);

    s = curriculum_state(700, 1000);
    CHECK(s.phase == Phase::FullIndependence);
    CHECK(s.p_independent == 1.0);
    CHECK(s.reweight_active);

    s = curriculum_state(500, 1000);
    CHECK(s.phase == Phase::IncrementalDecoupling);
    CHECK(s.p_independent == doctest::Approx(0.5));

    CHECK_THROWS_AS(curriculum_state(1000, 1000), DomainError);
    CHECK_THROWS_AS(curriculum_state(5, 10, {0.5, 0.4, 0.3}), DomainError);
}

TEST_CASE("phase boundaries are exact for awkward totals") {
    for (long total : {10L, 137L, 1000L, 1000000L}) {
        const long b1 = static_cast<long>(std::floor(0.3L * static_cast<long double>(total)));
        const long b2 = static_cast<long>(std::floor(0.7L * static_cast<long double>(total)));
        CHECK(curriculum_state(b1 - 1, total).phase == Phase::SyncWarmup);
        CHECK(curriculum_state(b1, total).phase == Phase::IncrementalDecoupling);
        CHECK(curriculum_state(b2 - 1, total).phase == Phase::IncrementalDecoupling);
        CHECK(curriculum_state(b2, total).phase == Phase::FullIndependence);
        CHECK(curriculum_state(total - 1, total).phase == Phase::FullIndependence);
    }
}

TEST_CASE("p_independent never decreases") {
    for (long total : {10L, 137L, 1000L}) {
        double prev = -1.0;
        for (long step = 0; step < total; ++step) {
            const double p = curriculum_state(step, total).p_independent;
            CHECK(p >= prev);
            prev = p;
        }
    }
}

TEST_CASE("pair sampling per phase") {
    SUBCASE("warmup ties the timesteps and disables reweighting") {
        Rng rng(11);
        CurriculumState s = curriculum_state(10, 1000);
        for (int i = 0; i < 1000; ++i) {
            TimestepPair p = sample_pair(s, rng);
            CHECK(p.t_video == p.t_audio);
            CHECK(p.weight_video == 1.0);
            CHECK(p.weight_audio == 1.0);
        }
    }
    SUBCASE("decoupling phase never violates the clamp") {
        Rng rng(12);
        CurriculumState s = curriculum_state(500, 1000);
        for (int i = 0; i < 10000; ++i) {
            TimestepPair p = sample_pair(s, rng);
            CHECK(std::abs(p.t_video - p.t_audio) <= 0.25 + 1e-12);
        }
    }
    SUBCASE("full independence decorrelates the pair") {
        Rng rng(13);
        CurriculumState s = curriculum_state(900, 1000);
        const int n = 100000;
        double sv = 0, sa = 0, svv = 0, saa = 0, sva = 0;
        for (int i = 0; i < n; ++i) {
            TimestepPair p = sample_pair(s, rng);
            sv += p.t_video;
            sa += p.t_audio;
            svv += p.t_video * p.t_video;
            saa += p.t_audio * p.t_audio;
            sva += p.t_video * p.t_audio;
        }
        const double mv = sv / n, ma = sa / n;
        const double cov = sva / n - mv * ma;
        const double corr = cov / std::sqrt((svv / n - mv * mv) * (saa / n - ma * ma));
        CHECK(std::abs(corr) <= 0.02);
    }
    SUBCASE("weights always sum to 2 + lambda with exactly one upweighted") {
        Rng rng(14);
        const double lambda = 0.5;
        for (int i = 0; i < 10000; ++i) {
            const long step = 300 + static_cast<long>(rng.below(700));
            CurriculumState s = curriculum_state(step, 1000, {0.3, 0.4, 0.3}, 0.25, lambda);
            TimestepPair p = sample_pair(s, rng);
            CHECK(p.weight_video + p.weight_audio == doctest::Approx(2.0 + lambda).epsilon(1e-12));
            const bool video_up = p.weight_video == doctest::Approx(1.0 + lambda);
            const bool audio_up = p.weight_audio == doctest::Approx(1.0 + lambda);
            CHECK(video_up != audio_up);
        }
    }
}

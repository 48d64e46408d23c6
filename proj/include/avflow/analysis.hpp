#pragma once

#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "avflow/model.hpp"
#include "avflow/toy_world.hpp"
#include "avflow/trainer.hpp"

namespace avflow {

struct SampleOptions {
    int steps = 50;
    double cfg_scale = 6.0;
    bool cfg_audio_only = false;  // default applies guidance to both branches
    std::uint64_t seed = 0;
};

/// Batched joint generation: both branches integrated by the Euler sampler at
/// synchronized timesteps with classifier-free guidance. sfx is undefined for
/// mixed-stream (disable_hghs) models.
struct GeneratedBatch {
    Tensor video;   // [B, F, dim]
    Tensor speech;  // [B, N, dim]
    Tensor sfx;     // [B, N, dim]
};

GeneratedBatch sample_av_batch(FusionModel& model, int frames, const ConditionPair& cond, const SampleOptions& opts);

/// Single-sample convenience wrapper over sample_av_batch.
GeneratedBatch sample_av(FusionModel& model, int frames, EpisodeClass cls, const SampleOptions& opts);

/// Integrate only the audio branch, holding video tokens at the given clean
/// features (video timestep pinned to the data side).
GeneratedBatch sample_audio_given_video(FusionModel& model, const Tensor& video_features, const ConditionPair& cond,
                                        const SampleOptions& opts);

struct SyncStats {
    double mean_abs_lag = 0.0;
    int matched = 0;
    int unmatched = 0;
};

/// Greedy nearest onset matching within the window, in audio-token units.
/// Episodes yielding no matches score the full window as a penalty lag.
SyncStats desync_metric(const Tensor& gen_sfx, const std::vector<int>& motion_peaks, int window = 8,
                        double rel_threshold = 0.5);

struct SyncEvalOptions {
    int episodes = 9;
    std::uint64_t seed = 0;
    int steps = 50;
    double cfg_scale = 6.0;
    bool cfg_audio_only = false;
    bool condition_video = false;  // hold video at ground-truth features, integrate audio only
    int window = 8;
};

struct EpisodeSync {
    int episode = 0;
    double mean_abs_lag = 0.0;
    int matched = 0;
    int unmatched = 0;
};

struct SyncEvalResult {
    std::vector<EpisodeSync> rows;
    double aggregate_mean = 0.0;
    double aggregate_median = 0.0;

    std::string to_csv() const;  // episode,mean_abs_lag,matched,unmatched
};

SyncEvalResult eval_sync(FusionModel& model, int frames, const SyncEvalOptions& opts);

/// Mean gate values per (layer, timestep decile, class). Buckets label the
/// flow time t in [0,1] with t=1 on the data side.
struct GateCell {
    double sum_speech = 0.0;
    double sum_sfx = 0.0;
    long count = 0;
};

struct GateReport {
    int layers = 0;
    int classes = 3;
    std::map<std::tuple<int, int, int>, GateCell> cells;  // (layer, bucket, class)

    double mean_speech(int layer, int bucket, int cls) const;
    double mean_sfx(int layer, int bucket, int cls) const;
    std::string to_csv() const;  // layer,t_bucket,class,mean_g_sp,mean_g_sfx,count
};

/// Collect gates over forwards of the dataset noised at each timestep.
/// Requires a model with the gated dual-stream path enabled.
GateReport gate_analysis(FusionModel& model, const std::vector<Episode>& episodes,
                         const std::vector<double>& timesteps, std::uint64_t noise_seed = 0);

/// Uniform sampler grid t_k = k/steps, k = 0..steps-1.
std::vector<double> sampler_timesteps(int steps);

}  // namespace avflow

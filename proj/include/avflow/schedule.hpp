#pragma once

#include <array>
#include <string>
#include <vector>

#include "avflow/rng.hpp"
#include "avflow/tensor.hpp"

namespace avflow {

enum class Phase { SyncWarmup, IncrementalDecoupling, FullIndependence };

const char* phase_name(Phase phase);

/// Decoupled per-branch timesteps plus the direction-aware loss weights.
/// audio_leads (d) is 1 exactly when t_audio < t_video.
struct TimestepPair {
    double t_video = 0.0;
    double t_audio = 0.0;
    int audio_leads = 0;
    double weight_video = 1.0;
    double weight_audio = 1.0;
};

struct CurriculumState {
    long step = 0;
    long total_steps = 1;
    Phase phase = Phase::SyncWarmup;
    double p_independent = 0.0;
    double delta_max = 0.25;
    double lambda = 0.5;
    bool reweight_active = false;
};

/// Per-element noise levels: L i.i.d. uniforms on [0,1].
std::vector<double> sample_df_timesteps(int length, Rng& rng);

/// Sum over sequence elements of the per-element mean squared error.
Tensor df_loss(const std::vector<Tensor>& preds, const std::vector<Tensor>& targets);

/// d = 1 if t_audio < t_video (strict), weights w_v = 1 + lambda*d,
/// w_a = 1 + lambda*(1-d).
TimestepPair direction_weights(double t_video, double t_audio, double lambda);

/// Phase boundaries at floor(r1*T) and floor((r1+r2)*T); p_independent ramps
/// linearly across the middle phase; reweighting is off only in the warmup.
CurriculumState curriculum_state(long step, long total_steps,
                                 std::array<double, 3> ratios = {0.3, 0.4, 0.3},
                                 double delta_max = 0.25, double lambda = 0.5);

/// Draw a timestep pair under the given curriculum state.
TimestepPair sample_pair(const CurriculumState& state, Rng& rng);

}  // namespace avflow

#include "avflow/schedule.hpp"

#include <algorithm>
#include <cmath>

#include "avflow/flow.hpp"

namespace avflow {

const char* phase_name(Phase phase) {
    switch (phase) {
        case Phase::SyncWarmup: return "SyncWarmup";
        case Phase::IncrementalDecoupling: return "IncrementalDecoupling";
        case Phase::FullIndependence: return "FullIndependence";
    }
    return "?";
}

std::vector<double> sample_df_timesteps(int length, Rng& rng) {
    if (length < 1) throw DomainError("sample_df_timesteps: length must be >= 1");
    std::vector<double> out(static_cast<std::size_t>(length));
    for (double& t : out) t = rng.uniform();
    return out;
}

Tensor df_loss(const std::vector<Tensor>& preds, const std::vector<Tensor>& targets) {
    if (preds.size() != targets.size())
        throw ShapeError("df_loss: " + std::to_string(preds.size()) + " predictions vs " + std::to_string(targets.size()) + " targets");
    if (preds.empty()) throw ShapeError("df_loss: empty sequence");
    Tensor total;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (preds[i].shape() != targets[i].shape())
            throw ShapeError("df_loss: element " + std::to_string(i) + " shapes disagree, " + shape_str(preds[i].shape()) + " vs " + shape_str(targets[i].shape()));
        Tensor term = mean_sq(sub(preds[i], targets[i]));
        total = (i == 0) ? term : add(total, term);
    }
    return total;
}

TimestepPair direction_weights(double t_video, double t_audio, double lambda) {
    if (!(t_video >= 0.0 && t_video <= 1.0) || !(t_audio >= 0.0 && t_audio <= 1.0))
        throw DomainError("direction_weights: timesteps must lie in [0,1]");
    if (lambda < 0.0) throw DomainError("direction_weights: lambda must be >= 0");
    TimestepPair p;
    p.t_video = t_video;
    p.t_audio = t_audio;
    p.audio_leads = (t_audio < t_video) ? 1 : 0;
    p.weight_video = 1.0 + lambda * static_cast<double>(p.audio_leads);
    p.weight_audio = 1.0 + lambda * static_cast<double>(1 - p.audio_leads);
    return p;
}

namespace {

// floor with a small upward nudge: products like 0.3*1000 land just below the
// exact integer in binary floating point.
long tolerant_floor(double x) { return static_cast<long>(std::floor(x + 1e-9)); }

}  // namespace

CurriculumState curriculum_state(long step, long total_steps, std::array<double, 3> ratios,
                                 double delta_max, double lambda) {
    if (total_steps < 1) throw DomainError("curriculum_state: total_steps must be >= 1");
    if (step < 0 || step >= total_steps)
        throw DomainError("curriculum_state: step " + std::to_string(step) + " outside [0," + std::to_string(total_steps) + ")");
    const double sum = ratios[0] + ratios[1] + ratios[2];
    if (std::abs(sum - 1.0) > 1e-9) throw DomainError("curriculum_state: phase ratios must sum to 1");
    if (delta_max < 0.0) throw DomainError("curriculum_state: delta_max must be >= 0");

    const long boundary1 = tolerant_floor(ratios[0] * static_cast<double>(total_steps));
    const long boundary2 = tolerant_floor((ratios[0] + ratios[1]) * static_cast<double>(total_steps));

    CurriculumState s;
    s.step = step;
    s.total_steps = total_steps;
    s.delta_max = delta_max;
    s.lambda = lambda;
    if (step < boundary1) {
        s.phase = Phase::SyncWarmup;
        s.p_independent = 0.0;
        s.reweight_active = false;
    } else if (step < boundary2) {
        s.phase = Phase::IncrementalDecoupling;
        s.p_independent = static_cast<double>(step - boundary1) / static_cast<double>(boundary2 - boundary1);
        s.reweight_active = true;
    } else {
        s.phase = Phase::FullIndependence;
        s.p_independent = 1.0;
        s.reweight_active = true;
    }
    return s;
}

TimestepPair sample_pair(const CurriculumState& state, Rng& rng) {
    double t_video = rng.uniform();
    double t_audio = t_video;
    switch (state.phase) {
        case Phase::SyncWarmup:
            break;
        case Phase::IncrementalDecoupling: {
            if (rng.uniform() < state.p_independent) {
                const double delta = rng.uniform(-state.delta_max, state.delta_max);
                t_audio = std::clamp(t_video + delta, 0.0, 1.0);
            }
            break;
        }
        case Phase::FullIndependence:
            t_audio = rng.uniform();
            break;
    }
    TimestepPair p = direction_weights(t_video, t_audio, state.lambda);
    if (!state.reweight_active) {
        p.weight_video = 1.0;
        p.weight_audio = 1.0;
    }
    return p;
}

}  // namespace avflow

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "avflow/dual_stream.hpp"
#include "avflow/tensor.hpp"

namespace avflow {

enum class EpisodeClass { NarrationHeavy, SfxHeavy, Balanced };

const char* episode_class_name(EpisodeClass cls);
EpisodeClass parse_episode_class(const std::string& name);

struct FeatureDims {
    int dim_video = 32;
    int dim_audio = 32;
    int cond_dim = 8;
};

/// One synthetic coupled sample. A latent motion signal m(t) (three seeded
/// sinusoids) drives everything: video features encode m and its slope, the
/// speech stream follows m as a zero-lag envelope, and the sfx stream is an
/// impulse train at the interior local maxima of m resampled to audio rate.
struct Episode {
    std::uint64_t seed = 0;
    EpisodeClass cls = EpisodeClass::Balanced;
    Tensor video;            // [F, dim_video]
    Tensor speech;           // [N, dim_audio]
    Tensor sfx;              // [N, dim_audio]
    Tensor cond_speech_sem;  // [cond_dim]
    Tensor cond_scene_sem;   // [cond_dim]
    std::vector<int> onsets;
    std::vector<double> motion_audio;  // latent motion at audio rate (not serialized)
    int frames = 0;
    int tokens_per_frame = 0;

    int audio_tokens() const { return frames * tokens_per_frame; }
};

/// Deterministic per seed. Class controls the speech/sfx energy split:
/// NarrationHeavy puts 4x the energy in speech, SfxHeavy the inverse,
/// Balanced equal.
Episode generate_episode(std::uint64_t seed, int frames, int tokens_per_frame, EpisodeClass cls,
                         const FeatureDims& dims = {});

/// Indices whose per-token mean-square energy exceeds the threshold and is a
/// local maximum (ties broken to the leftmost index).
std::vector<int> onset_times(const Tensor& sfx, double threshold);

/// Strict local maxima of a series, leftmost index on plateaus, interior only.
std::vector<int> local_maxima(const std::vector<double>& series);

/// Fixed global feature bases tying video features to the motion signal.
/// Deterministic across runs; analysis uses them to read motion back out.
void motion_basis(int dim_video, std::vector<double>& level, std::vector<double>& slope);

/// Least-squares per-frame motion readout from video features via the basis.
std::vector<double> extract_motion(const Tensor& video);

/// Linear resampling of a per-frame series onto n points.
std::vector<double> upsample_linear(const std::vector<double>& series, int n);

/// Per-class canonical condition vectors (orthogonal one-hot pattern, no noise).
void class_conditions(EpisodeClass cls, int cond_dim, std::vector<double>& speech_sem, std::vector<double>& scene_sem);

/// Stack per-episode conditions into a batched ConditionPair.
ConditionPair stack_conditions(const std::vector<const Episode*>& episodes);

// Dataset container: little-endian u32 header (frames, tokens_per_frame,
// dim_video, dim_audio, cond_dim, count), then per episode class, onset list
// and the flat float32 feature arrays.
struct Dataset {
    int frames = 0;
    int tokens_per_frame = 0;
    FeatureDims dims;
    std::vector<Episode> episodes;
};

void write_dataset(const std::string& path, const Dataset& dataset);
Dataset read_dataset(const std::string& path);

}  // namespace avflow

#include "avflow/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "avflow/flow.hpp"

namespace avflow {

namespace {

struct PackLayout {
    Shape video_shape, speech_shape, sfx_shape;
    std::int64_t video_size = 0, speech_size = 0, sfx_size = 0;
    bool has_sfx = false;

    std::int64_t total() const { return video_size + speech_size + (has_sfx ? sfx_size : 0); }
};

Tensor pack(const PackLayout& lay, const Tensor& video, const Tensor& speech, const Tensor& sfx) {
    std::vector<double> flat;
    flat.reserve(static_cast<std::size_t>(lay.total()));
    flat.insert(flat.end(), video.values().begin(), video.values().end());
    flat.insert(flat.end(), speech.values().begin(), speech.values().end());
    if (lay.has_sfx) flat.insert(flat.end(), sfx.values().begin(), sfx.values().end());
    return Tensor({static_cast<int>(lay.total())}, std::move(flat));
}

void unpack(const PackLayout& lay, const Tensor& flat, Tensor& video, Tensor& speech, Tensor& sfx) {
    const auto& v = flat.values();
    auto take = [&](std::int64_t offset, std::int64_t count, const Shape& shape) {
        return Tensor(shape, std::vector<double>(v.begin() + offset, v.begin() + offset + count));
    };
    video = take(0, lay.video_size, lay.video_shape);
    speech = take(lay.video_size, lay.speech_size, lay.speech_shape);
    if (lay.has_sfx) sfx = take(lay.video_size + lay.speech_size, lay.sfx_size, lay.sfx_shape);
}

ConditionPair null_conditions(const ConditionPair& cond) {
    return {Tensor::zeros(cond.speech_sem.shape()), Tensor::zeros(cond.scene_sem.shape())};
}

}  // namespace

std::vector<double> sampler_timesteps(int steps) {
    if (steps < 1) throw DomainError("sampler_timesteps: steps must be >= 1");
    std::vector<double> out(static_cast<std::size_t>(steps));
    for (int k = 0; k < steps; ++k) out[static_cast<std::size_t>(k)] = static_cast<double>(k) / static_cast<double>(steps);
    return out;
}

GeneratedBatch sample_av_batch(FusionModel& model, int frames, const ConditionPair& cond, const SampleOptions& opts) {
    cond.validate();
    const ModelConfig& mc = model.config();
    const int b = cond.batch();
    const int n = frames * mc.tokens_per_frame;
    const bool mixed = mc.disable_hghs;

    PackLayout lay;
    lay.video_shape = {b, frames, mc.dim};
    lay.speech_shape = {b, n, mc.dim};
    lay.sfx_shape = {b, n, mc.dim};
    lay.video_size = shape_size(lay.video_shape);
    lay.speech_size = shape_size(lay.speech_shape);
    lay.sfx_size = shape_size(lay.sfx_shape);
    lay.has_sfx = !mixed;

    Rng rng(opts.seed);
    Tensor video0 = Tensor::randn(lay.video_shape, rng);
    Tensor speech0 = Tensor::randn(lay.speech_shape, rng);
    Tensor sfx0 = mixed ? Tensor() : Tensor::randn(lay.sfx_shape, rng);

    const ConditionPair uncond = null_conditions(cond);

    auto velocity = [&](const Tensor& state, double t) {
        Tensor video, speech, sfx;
        unpack(lay, state, video, speech, sfx);
        Graph g;
        DualStreamLatent lat;
        lat.speech = speech;
        if (!mixed) lat.sfx = sfx;
        FusionModel::Velocities vc = model.forward(g, video, lat, t, t, cond);
        Tensor v_video = vc.video, v_speech = vc.speech, v_sfx = vc.sfx;
        if (opts.cfg_scale != 1.0) {
            Graph gu;
            FusionModel::Velocities vu = model.forward(gu, video, lat, t, t, uncond);
            v_speech = cfg_velocity(vc.speech, vu.speech, opts.cfg_scale);
            if (!mixed) v_sfx = cfg_velocity(vc.sfx, vu.sfx, opts.cfg_scale);
            if (!opts.cfg_audio_only) v_video = cfg_velocity(vc.video, vu.video, opts.cfg_scale);
        }
        return pack(lay, v_video, v_speech, v_sfx);
    };

    Tensor x1 = euler_sample(velocity, pack(lay, video0, speech0, sfx0), opts.steps);
    GeneratedBatch out;
    unpack(lay, x1, out.video, out.speech, out.sfx);
    return out;
}

GeneratedBatch sample_av(FusionModel& model, int frames, EpisodeClass cls, const SampleOptions& opts) {
    std::vector<double> speech_sem, scene_sem;
    class_conditions(cls, model.config().cond_dim, speech_sem, scene_sem);
    ConditionPair cond{Tensor({1, model.config().cond_dim}, std::move(speech_sem)),
                       Tensor({1, model.config().cond_dim}, std::move(scene_sem))};
    return sample_av_batch(model, frames, cond, opts);
}

GeneratedBatch sample_audio_given_video(FusionModel& model, const Tensor& video_features, const ConditionPair& cond,
                                        const SampleOptions& opts) {
    cond.validate();
    const ModelConfig& mc = model.config();
    if (video_features.rank() != 3) throw ShapeError("sample_audio_given_video: video must be [B,F,dim]");
    const int b = video_features.dim(0);
    const int frames = video_features.dim(1);
    const int n = frames * mc.tokens_per_frame;
    const bool mixed = mc.disable_hghs;

    PackLayout lay;
    lay.video_shape = {1};  // unused slot; audio-only state
    lay.video_size = 0;
    lay.speech_shape = {b, n, mc.dim};
    lay.sfx_shape = {b, n, mc.dim};
    lay.speech_size = shape_size(lay.speech_shape);
    lay.sfx_size = shape_size(lay.sfx_shape);
    lay.has_sfx = !mixed;

    Rng rng(opts.seed);
    Tensor speech0 = Tensor::randn(lay.speech_shape, rng);
    Tensor sfx0 = mixed ? Tensor() : Tensor::randn(lay.sfx_shape, rng);

    const ConditionPair uncond = null_conditions(cond);

    auto pack_audio = [&](const Tensor& speech, const Tensor& sfx) {
        std::vector<double> flat;
        flat.reserve(static_cast<std::size_t>(lay.total()));
        flat.insert(flat.end(), speech.values().begin(), speech.values().end());
        if (lay.has_sfx) flat.insert(flat.end(), sfx.values().begin(), sfx.values().end());
        return Tensor({static_cast<int>(lay.total())}, std::move(flat));
    };
    auto unpack_audio = [&](const Tensor& flat, Tensor& speech, Tensor& sfx) {
        const auto& v = flat.values();
        speech = Tensor(lay.speech_shape, std::vector<double>(v.begin(), v.begin() + lay.speech_size));
        if (lay.has_sfx) sfx = Tensor(lay.sfx_shape, std::vector<double>(v.begin() + lay.speech_size, v.end()));
    };

    auto velocity = [&](const Tensor& state, double t) {
        Tensor speech, sfx;
        unpack_audio(state, speech, sfx);
        Graph g;
        DualStreamLatent lat;
        lat.speech = speech;
        if (!mixed) lat.sfx = sfx;
        // Video context arrives clean: its timestep sits at the data side.
        FusionModel::Velocities vc = model.forward(g, video_features, lat, 1.0, t, cond);
        Tensor v_speech = vc.speech, v_sfx = vc.sfx;
        if (opts.cfg_scale != 1.0) {
            Graph gu;
            FusionModel::Velocities vu = model.forward(gu, video_features, lat, 1.0, t, uncond);
            v_speech = cfg_velocity(vc.speech, vu.speech, opts.cfg_scale);
            if (!mixed) v_sfx = cfg_velocity(vc.sfx, vu.sfx, opts.cfg_scale);
        }
        return pack_audio(v_speech, v_sfx);
    };

    Tensor x1 = euler_sample(velocity, pack_audio(speech0, sfx0), opts.steps);
    GeneratedBatch out;
    out.video = video_features;
    unpack_audio(x1, out.speech, out.sfx);
    return out;
}

SyncStats desync_metric(const Tensor& gen_sfx, const std::vector<int>& motion_peaks, int window,
                        double rel_threshold) {
    if (motion_peaks.empty()) throw DomainError("desync_metric: empty motion peak list");
    if (gen_sfx.rank() != 2) throw ShapeError("desync_metric: expected [N,dim], got " + shape_str(gen_sfx.shape()));

    // Relative threshold against the loudest token keeps the detector scale-free.
    const int n = gen_sfx.dim(0);
    const int d = gen_sfx.dim(1);
    double max_energy = 0.0;
    const auto& v = gen_sfx.values();
    for (int i = 0; i < n; ++i) {
        double acc = 0.0;
        for (int j = 0; j < d; ++j) {
            const double x = v[static_cast<std::size_t>(i * d + j)];
            acc += x * x;
        }
        max_energy = std::max(max_energy, acc / static_cast<double>(d));
    }
    std::vector<int> onsets;
    if (max_energy > 0.0) onsets = onset_times(gen_sfx, rel_threshold * max_energy);

    struct Pair {
        int lag;
        int onset_idx;
        int peak_idx;
    };
    std::vector<Pair> candidates;
    for (std::size_t oi = 0; oi < onsets.size(); ++oi)
        for (std::size_t pi = 0; pi < motion_peaks.size(); ++pi) {
            const int lag = std::abs(onsets[oi] - motion_peaks[pi]);
            if (lag <= window) candidates.push_back({lag, static_cast<int>(oi), static_cast<int>(pi)});
        }
    std::sort(candidates.begin(), candidates.end(), [](const Pair& a, const Pair& b) {
        if (a.lag != b.lag) return a.lag < b.lag;
        if (a.onset_idx != b.onset_idx) return a.onset_idx < b.onset_idx;
        return a.peak_idx < b.peak_idx;
    });

    std::vector<char> onset_used(onsets.size(), 0), peak_used(motion_peaks.size(), 0);
    long lag_sum = 0;
    int matched = 0;
    for (const Pair& c : candidates) {
        if (onset_used[static_cast<std::size_t>(c.onset_idx)] || peak_used[static_cast<std::size_t>(c.peak_idx)]) continue;
        onset_used[static_cast<std::size_t>(c.onset_idx)] = 1;
        peak_used[static_cast<std::size_t>(c.peak_idx)] = 1;
        lag_sum += c.lag;
        ++matched;
    }

    SyncStats s;
    s.matched = matched;
    s.unmatched = static_cast<int>(onsets.size()) - matched + static_cast<int>(motion_peaks.size()) - matched;
    s.mean_abs_lag = matched > 0 ? static_cast<double>(lag_sum) / matched : static_cast<double>(window);
    return s;
}

std::string SyncEvalResult::to_csv() const {
    std::ostringstream out;
    out << "episode,mean_abs_lag,matched,unmatched\n";
    char buf[128];
    for (const EpisodeSync& r : rows) {
        std::snprintf(buf, sizeof(buf), "%d,%.17g,%d,%d\n", r.episode, r.mean_abs_lag, r.matched, r.unmatched);
        out << buf;
    }
    return out.str();
}

SyncEvalResult eval_sync(FusionModel& model, int frames, const SyncEvalOptions& opts) {
    if (opts.episodes < 1) throw DomainError("eval_sync: need at least one episode");
    const ModelConfig& mc = model.config();
    const int n = frames * mc.tokens_per_frame;

    FeatureDims dims{mc.dim, mc.dim, mc.cond_dim};
    std::vector<Episode> episodes;
    for (int i = 0; i < opts.episodes; ++i)
        episodes.push_back(generate_episode(opts.seed + 1000 + static_cast<std::uint64_t>(i), frames,
                                            mc.tokens_per_frame, static_cast<EpisodeClass>(i % 3), dims));

    std::vector<const Episode*> refs;
    for (const Episode& e : episodes) refs.push_back(&e);
    ConditionPair cond = stack_conditions(refs);

    SampleOptions sopts;
    sopts.steps = opts.steps;
    sopts.cfg_scale = opts.cfg_scale;
    sopts.cfg_audio_only = opts.cfg_audio_only;
    sopts.seed = opts.seed;

    GeneratedBatch gen;
    if (opts.condition_video) {
        Tensor video = Tensor::zeros({opts.episodes, frames, mc.dim});
        for (int i = 0; i < opts.episodes; ++i) {
            const auto& src = episodes[static_cast<std::size_t>(i)].video.values();
            std::copy(src.begin(), src.end(),
                      video.mutate_data().begin() + static_cast<std::int64_t>(i) * frames * mc.dim);
        }
        gen = sample_audio_given_video(model, video, cond, sopts);
    } else {
        gen = sample_av_batch(model, frames, cond, sopts);
    }

    SyncEvalResult result;
    std::vector<double> lags;
    for (int i = 0; i < opts.episodes; ++i) {
        Tensor sfx_i = reshape(slice(gen.sfx.defined() ? gen.sfx : gen.speech, 0, i, 1), {n, mc.dim});

        std::vector<int> peaks;
        if (opts.condition_video) {
            peaks = episodes[static_cast<std::size_t>(i)].onsets;
        } else {
            Tensor video_i = reshape(slice(gen.video, 0, i, 1), {frames, mc.dim});
            std::vector<double> motion = extract_motion(video_i);
            peaks = local_maxima(upsample_linear(motion, n));
        }

        EpisodeSync row;
        row.episode = i;
        if (peaks.empty()) {
            // Degenerate generation: no recoverable motion peaks; full-window penalty.
            row.mean_abs_lag = static_cast<double>(opts.window);
            row.matched = 0;
            row.unmatched = 0;
        } else {
            SyncStats s = desync_metric(sfx_i, peaks, opts.window);
            row.mean_abs_lag = s.mean_abs_lag;
            row.matched = s.matched;
            row.unmatched = s.unmatched;
        }
        lags.push_back(row.mean_abs_lag);
        result.rows.push_back(row);
    }

    double sum = 0.0;
    for (double l : lags) sum += l;
    result.aggregate_mean = sum / static_cast<double>(lags.size());
    std::vector<double> sorted = lags;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t mid = sorted.size() / 2;
    result.aggregate_median = sorted.size() % 2 == 1 ? sorted[mid] : 0.5 * (sorted[mid - 1] + sorted[mid]);
    return result;
}

double GateReport::mean_speech(int layer, int bucket, int cls) const {
    auto it = cells.find({layer, bucket, cls});
    if (it == cells.end() || it->second.count == 0) throw ContractError("gate report cell is empty");
    return it->second.sum_speech / static_cast<double>(it->second.count);
}

double GateReport::mean_sfx(int layer, int bucket, int cls) const {
    auto it = cells.find({layer, bucket, cls});
    if (it == cells.end() || it->second.count == 0) throw ContractError("gate report cell is empty");
    return it->second.sum_sfx / static_cast<double>(it->second.count);
}

std::string GateReport::to_csv() const {
    std::ostringstream out;
    out << "# t_bucket b covers t in [b/10,(b+1)/10); t=1 is the data side\n";
    out << "layer,t_bucket,class,mean_g_sp,mean_g_sfx,count\n";
    char buf[192];
    for (int layer = 0; layer < layers; ++layer)
        for (int bucket = 0; bucket < 10; ++bucket)
            for (int cls = 0; cls < classes; ++cls) {
                auto it = cells.find({layer, bucket, cls});
                const long count = (it == cells.end()) ? 0 : it->second.count;
                if (count > 0) {
                    std::snprintf(buf, sizeof(buf), "%d,%d,%s,%.17g,%.17g,%ld\n", layer, bucket,
                                  episode_class_name(static_cast<EpisodeClass>(cls)),
                                  it->second.sum_speech / static_cast<double>(count),
                                  it->second.sum_sfx / static_cast<double>(count), count);
                } else {
                    std::snprintf(buf, sizeof(buf), "%d,%d,%s,nan,nan,0\n", layer, bucket,
                                  episode_class_name(static_cast<EpisodeClass>(cls)));
                }
                out << buf;
            }
    return out.str();
}

GateReport gate_analysis(FusionModel& model, const std::vector<Episode>& episodes,
                         const std::vector<double>& timesteps, std::uint64_t noise_seed) {
    const ModelConfig& mc = model.config();
    if (mc.disable_hghs || mc.disable_biaca || mc.disable_scg)
        throw ContractError("gate_analysis: model has no semantic-conditioned gates");
    if (episodes.empty()) throw ContractError("gate_analysis: empty dataset");
    if (timesteps.empty()) throw ContractError("gate_analysis: no timesteps given");

    std::vector<const Episode*> refs;
    for (const Episode& e : episodes) refs.push_back(&e);
    ConditionPair cond = stack_conditions(refs);
    Tensor video = Tensor::zeros({static_cast<int>(episodes.size()), episodes[0].frames, mc.dim});
    Tensor speech = Tensor::zeros({static_cast<int>(episodes.size()), episodes[0].audio_tokens(), mc.dim});
    Tensor sfx = speech;
    {
        auto fill = [&](Tensor& dst, const Tensor Episode::* field) {
            std::vector<double> data;
            for (const Episode& e : episodes) {
                const auto& v = (e.*field).values();
                data.insert(data.end(), v.begin(), v.end());
            }
            dst = Tensor(dst.shape(), std::move(data));
        };
        fill(video, &Episode::video);
        fill(speech, &Episode::speech);
        fill(sfx, &Episode::sfx);
    }

    Rng rng(noise_seed);
    Tensor video_noise = Tensor::randn(video.shape(), rng);
    Tensor speech_noise = Tensor::randn(speech.shape(), rng);
    Tensor sfx_noise = Tensor::randn(sfx.shape(), rng);

    GateReport report;
    report.layers = mc.layers_audio;

    for (double t : timesteps) {
        const int bucket = std::min(9, static_cast<int>(t * 10.0));
        FlowSample video_s = interpolate(video_noise, video, t);
        FlowSample speech_s = interpolate(speech_noise, speech, t);
        FlowSample sfx_s = interpolate(sfx_noise, sfx, t);

        Graph g;
        DualStreamLatent lat{speech_s.x_t, sfx_s.x_t};
        std::vector<Tensor> gate_log;
        (void)model.forward(g, video_s.x_t, lat, t, t, cond, &gate_log);
        if (static_cast<int>(gate_log.size()) != mc.layers_audio)
            throw ContractError("gate_analysis: expected one gate pair per audio layer");

        for (int layer = 0; layer < mc.layers_audio; ++layer) {
            const auto& gates = gate_log[static_cast<std::size_t>(layer)].values();  // [B,2]
            for (std::size_t b = 0; b < episodes.size(); ++b) {
                GateCell& cell = report.cells[{layer, bucket, static_cast<int>(episodes[b].cls)}];
                cell.sum_speech += gates[2 * b];
                cell.sum_sfx += gates[2 * b + 1];
                cell.count += 1;
            }
        }
    }
    return report;
}

}  // namespace avflow

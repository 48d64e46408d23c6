#include "avflow/toy_world.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

namespace avflow {

namespace {

constexpr std::uint64_t kBasisSeed = 0x9e3779b97f4a7c15ull;
constexpr double kCondNoise = 0.05;

struct Sinusoids {
    double amp[3], freq[3], phase[3];

    double value(double t) const {
        double m = 0.0;
        for (int k = 0; k < 3; ++k) m += amp[k] * std::sin(2.0 * M_PI * freq[k] * t + phase[k]);
        return m;
    }
    double slope(double t) const {
        double d = 0.0;
        for (int k = 0; k < 3; ++k) d += amp[k] * 2.0 * M_PI * freq[k] * std::cos(2.0 * M_PI * freq[k] * t + phase[k]);
        return d;
    }
};

Sinusoids draw_sinusoids(Rng& rng) {
    Sinusoids s;
    for (int k = 0; k < 3; ++k) {
        s.amp[k] = rng.uniform(0.5, 1.0);
        s.freq[k] = rng.uniform(1.0, 3.0);
        s.phase[k] = rng.uniform(0.0, 2.0 * M_PI);
    }
    return s;
}

double rms(const std::vector<double>& v) {
    double acc = 0.0;
    for (double x : v) acc += x * x;
    return std::sqrt(acc / static_cast<double>(v.size()));
}

void class_amplitudes(EpisodeClass cls, double& speech_amp, double& sfx_amp) {
    switch (cls) {
        case EpisodeClass::NarrationHeavy: speech_amp = 2.0; sfx_amp = 1.0; return;
        case EpisodeClass::SfxHeavy: speech_amp = 1.0; sfx_amp = 2.0; return;
        case EpisodeClass::Balanced: speech_amp = 1.5; sfx_amp = 1.5; return;
    }
    throw DomainError("unknown episode class");
}

}  // namespace

const char* episode_class_name(EpisodeClass cls) {
    switch (cls) {
        case EpisodeClass::NarrationHeavy: return "NarrationHeavy";
        case EpisodeClass::SfxHeavy: return "SfxHeavy";
        case EpisodeClass::Balanced: return "Balanced";
    }
    return "?";
}

EpisodeClass parse_episode_class(const std::string& name) {
    if (name == "NarrationHeavy" || name == "narration") return EpisodeClass::NarrationHeavy;
    if (name == "SfxHeavy" || name == "sfx") return EpisodeClass::SfxHeavy;
    if (name == "Balanced" || name == "balanced") return EpisodeClass::Balanced;
    throw DomainError("unknown episode class '" + name + "'");
}

std::vector<int> local_maxima(const std::vector<double>& series) {
    std::vector<int> peaks;
    const int n = static_cast<int>(series.size());
    for (int i = 1; i + 1 < n; ++i) {
        if (!(series[static_cast<std::size_t>(i)] > series[static_cast<std::size_t>(i - 1)])) continue;
        // Scan forward across any plateau; the leftmost index wins.
        int j = i;
        while (j + 1 < n && series[static_cast<std::size_t>(j + 1)] == series[static_cast<std::size_t>(i)]) ++j;
        if (j + 1 < n && series[static_cast<std::size_t>(j + 1)] < series[static_cast<std::size_t>(i)]) peaks.push_back(i);
    }
    return peaks;
}

void motion_basis(int dim_video, std::vector<double>& level, std::vector<double>& slope) {
    if (dim_video < 2) throw DomainError("motion basis needs dim_video >= 2");
    Rng rng(kBasisSeed);
    level.resize(static_cast<std::size_t>(dim_video));
    slope.resize(static_cast<std::size_t>(dim_video));
    for (double& x : level) x = rng.normal();
    for (double& x : slope) x = rng.normal();
    const double ln = rms(level) * std::sqrt(static_cast<double>(dim_video));
    const double sn = rms(slope) * std::sqrt(static_cast<double>(dim_video));
    for (double& x : level) x /= ln / std::sqrt(static_cast<double>(dim_video));
    for (double& x : slope) x /= sn / std::sqrt(static_cast<double>(dim_video));
    // Orthogonalize slope against level so the least-squares readout is crisp.
    double dot = 0.0, ll = 0.0;
    for (int d = 0; d < dim_video; ++d) {
        dot += level[static_cast<std::size_t>(d)] * slope[static_cast<std::size_t>(d)];
        ll += level[static_cast<std::size_t>(d)] * level[static_cast<std::size_t>(d)];
    }
    for (int d = 0; d < dim_video; ++d) slope[static_cast<std::size_t>(d)] -= dot / ll * level[static_cast<std::size_t>(d)];
}

void class_conditions(EpisodeClass cls, int cond_dim, std::vector<double>& speech_sem, std::vector<double>& scene_sem) {
    if (cond_dim < 6) throw DomainError("cond_dim must be >= 6 to hold orthogonal class vectors");
    const int k = static_cast<int>(cls);
    speech_sem.assign(static_cast<std::size_t>(cond_dim), 0.0);
    scene_sem.assign(static_cast<std::size_t>(cond_dim), 0.0);
    speech_sem[static_cast<std::size_t>(2 * k)] = 1.0;
    scene_sem[static_cast<std::size_t>(2 * k + 1)] = 1.0;
}

Episode generate_episode(std::uint64_t seed, int frames, int tokens_per_frame, EpisodeClass cls,
                         const FeatureDims& dims) {
    if (frames < 8) throw DomainError("generate_episode: need at least 8 frames for peak detection");
    if (tokens_per_frame < 1) throw DomainError("generate_episode: tokens_per_frame must be >= 1");
    if (dims.dim_audio < 1) throw DomainError("generate_episode: dim_audio must be >= 1");

    const int n = frames * tokens_per_frame;
    Rng rng(seed);

    // Redraw until the motion has at least one interior audio-rate peak; the
    // frequency range makes a miss essentially impossible, but an impulse-free
    // sfx stream would break the class energy contract.
    Sinusoids motion{};
    std::vector<double> m_audio(static_cast<std::size_t>(n));
    std::vector<int> onsets;
    for (int attempt = 0; attempt < 100; ++attempt) {
        motion = draw_sinusoids(rng);
        for (int i = 0; i < n; ++i) m_audio[static_cast<std::size_t>(i)] = motion.value(static_cast<double>(i) / static_cast<double>(n));
        onsets = local_maxima(m_audio);
        if (!onsets.empty()) break;
    }
    if (onsets.empty()) throw EvalError("generate_episode: no motion peaks after 100 attempts");

    std::vector<double> level, slope;
    motion_basis(dims.dim_video, level, slope);

    std::vector<double> video(static_cast<std::size_t>(frames * dims.dim_video));
    for (int f = 0; f < frames; ++f) {
        const double t = static_cast<double>(f) / static_cast<double>(frames);
        const double mv = motion.value(t);
        const double ms = motion.slope(t);
        for (int d = 0; d < dims.dim_video; ++d)
            video[static_cast<std::size_t>(f * dims.dim_video + d)] =
                mv * level[static_cast<std::size_t>(d)] + ms * slope[static_cast<std::size_t>(d)];
    }
    const double video_rms = rms(video);
    for (double& x : video) x /= video_rms;

    // Fixed per-channel patterns shared by every episode.
    Rng pattern_rng(kBasisSeed ^ 0x5bf03635ull);
    std::vector<double> speech_pattern(static_cast<std::size_t>(dims.dim_audio));
    std::vector<double> sfx_pattern(static_cast<std::size_t>(dims.dim_audio));
    for (double& x : speech_pattern) x = pattern_rng.normal();
    for (double& x : sfx_pattern) x = pattern_rng.normal();

    double speech_amp = 1.0, sfx_amp = 1.0;
    class_amplitudes(cls, speech_amp, sfx_amp);

    std::vector<double> speech(static_cast<std::size_t>(n * dims.dim_audio));
    for (int i = 0; i < n; ++i)
        for (int d = 0; d < dims.dim_audio; ++d)
            speech[static_cast<std::size_t>(i * dims.dim_audio + d)] = m_audio[static_cast<std::size_t>(i)] * speech_pattern[static_cast<std::size_t>(d)];
    const double speech_rms = rms(speech);
    for (double& x : speech) x *= speech_amp / speech_rms;

    std::vector<double> sfx(static_cast<std::size_t>(n * dims.dim_audio), 0.0);
    for (int idx : onsets)
        for (int d = 0; d < dims.dim_audio; ++d)
            sfx[static_cast<std::size_t>(idx * dims.dim_audio + d)] = sfx_pattern[static_cast<std::size_t>(d)];
    const double sfx_rms = rms(sfx);
    for (double& x : sfx) x *= sfx_amp / sfx_rms;

    std::vector<double> c_speech, c_scene;
    class_conditions(cls, dims.cond_dim, c_speech, c_scene);
    for (double& x : c_speech) x += kCondNoise * rng.normal();
    for (double& x : c_scene) x += kCondNoise * rng.normal();

    Episode ep;
    ep.seed = seed;
    ep.cls = cls;
    ep.frames = frames;
    ep.tokens_per_frame = tokens_per_frame;
    ep.video = Tensor({frames, dims.dim_video}, std::move(video));
    ep.speech = Tensor({n, dims.dim_audio}, std::move(speech));
    ep.sfx = Tensor({n, dims.dim_audio}, std::move(sfx));
    ep.cond_speech_sem = Tensor({dims.cond_dim}, std::move(c_speech));
    ep.cond_scene_sem = Tensor({dims.cond_dim}, std::move(c_scene));
    ep.onsets = std::move(onsets);
    ep.motion_audio = std::move(m_audio);
    return ep;
}

std::vector<int> onset_times(const Tensor& sfx, double threshold) {
    if (threshold <= 0.0) throw DomainError("onset_times: threshold must be positive");
    if (sfx.rank() != 2) throw ShapeError("onset_times: expected [N,dim], got " + shape_str(sfx.shape()));
    const int n = sfx.dim(0);
    const int d = sfx.dim(1);
    std::vector<double> energy(static_cast<std::size_t>(n), 0.0);
    const std::vector<double>& v = sfx.values();
    for (int i = 0; i < n; ++i) {
        double acc = 0.0;
        for (int j = 0; j < d; ++j) {
            const double x = v[static_cast<std::size_t>(i * d + j)];
            acc += x * x;
        }
        energy[static_cast<std::size_t>(i)] = acc / static_cast<double>(d);
    }

    std::vector<int> hits;
    auto at = [&](int i) { return (i < 0 || i >= n) ? -1.0 : energy[static_cast<std::size_t>(i)]; };
    for (int i = 0; i < n; ++i) {
        if (energy[static_cast<std::size_t>(i)] <= threshold) continue;
        if (!(energy[static_cast<std::size_t>(i)] > at(i - 1))) continue;
        int j = i;
        while (j + 1 < n && energy[static_cast<std::size_t>(j + 1)] == energy[static_cast<std::size_t>(i)]) ++j;
        if (at(j + 1) < energy[static_cast<std::size_t>(i)]) hits.push_back(i);
    }
    return hits;
}

std::vector<double> extract_motion(const Tensor& video) {
    if (video.rank() != 2) throw ShapeError("extract_motion: expected [F,dim], got " + shape_str(video.shape()));
    const int frames = video.dim(0);
    const int d = video.dim(1);
    std::vector<double> level, slope;
    motion_basis(d, level, slope);

    double uu = 0.0, uw = 0.0, ww = 0.0;
    for (int j = 0; j < d; ++j) {
        uu += level[static_cast<std::size_t>(j)] * level[static_cast<std::size_t>(j)];
        uw += level[static_cast<std::size_t>(j)] * slope[static_cast<std::size_t>(j)];
        ww += slope[static_cast<std::size_t>(j)] * slope[static_cast<std::size_t>(j)];
    }
    const double det = uu * ww - uw * uw;
    if (std::abs(det) < 1e-12) throw EvalError("extract_motion: degenerate basis");

    std::vector<double> m(static_cast<std::size_t>(frames));
    const std::vector<double>& v = video.values();
    for (int f = 0; f < frames; ++f) {
        double vu = 0.0, vw = 0.0;
        for (int j = 0; j < d; ++j) {
            const double x = v[static_cast<std::size_t>(f * d + j)];
            vu += x * level[static_cast<std::size_t>(j)];
            vw += x * slope[static_cast<std::size_t>(j)];
        }
        m[static_cast<std::size_t>(f)] = (ww * vu - uw * vw) / det;
    }
    return m;
}

std::vector<double> upsample_linear(const std::vector<double>& series, int n) {
    const int f = static_cast<int>(series.size());
    if (f < 2) throw DomainError("upsample_linear: need at least two points");
    std::vector<double> out(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        // Grid-aligned with the episode clock: token i sits at frame i*f/n,
        // so token f*r lands exactly on frame f. The tail extrapolates the
        // last segment.
        const double pos = static_cast<double>(i) * static_cast<double>(f) / static_cast<double>(n);
        const int lo = std::min(f - 2, static_cast<int>(pos));
        const double frac = pos - static_cast<double>(lo);
        out[static_cast<std::size_t>(i)] = (1.0 - frac) * series[static_cast<std::size_t>(lo)] + frac * series[static_cast<std::size_t>(lo + 1)];
    }
    return out;
}

ConditionPair stack_conditions(const std::vector<const Episode*>& episodes) {
    if (episodes.empty()) throw ContractError("stack_conditions: empty batch");
    const int dc = episodes[0]->cond_speech_sem.dim(0);
    std::vector<double> speech, scene;
    speech.reserve(episodes.size() * static_cast<std::size_t>(dc));
    scene.reserve(episodes.size() * static_cast<std::size_t>(dc));
    for (const Episode* ep : episodes) {
        const auto& s = ep->cond_speech_sem.values();
        const auto& a = ep->cond_scene_sem.values();
        speech.insert(speech.end(), s.begin(), s.end());
        scene.insert(scene.end(), a.begin(), a.end());
    }
    const int b = static_cast<int>(episodes.size());
    return {Tensor({b, dc}, std::move(speech)), Tensor({b, dc}, std::move(scene))};
}

namespace {

void put_u32(std::ofstream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff), static_cast<unsigned char>((v >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::ifstream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw IoError("dataset: truncated file");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f32(std::ofstream& out, const std::vector<double>& values) {
    for (double d : values) {
        float f = static_cast<float>(d);
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        put_u32(out, bits);
    }
}

std::vector<double> get_f32(std::ifstream& in, std::size_t count) {
    std::vector<double> out(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::uint32_t bits = get_u32(in);
        float f;
        std::memcpy(&f, &bits, 4);
        out[i] = static_cast<double>(f);
    }
    return out;
}

}  // namespace

void write_dataset(const std::string& path, const Dataset& dataset) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("dataset: cannot open '" + path + "' for writing");
    put_u32(out, static_cast<std::uint32_t>(dataset.frames));
    put_u32(out, static_cast<std::uint32_t>(dataset.tokens_per_frame));
    put_u32(out, static_cast<std::uint32_t>(dataset.dims.dim_video));
    put_u32(out, static_cast<std::uint32_t>(dataset.dims.dim_audio));
    put_u32(out, static_cast<std::uint32_t>(dataset.dims.cond_dim));
    put_u32(out, static_cast<std::uint32_t>(dataset.episodes.size()));
    for (const Episode& ep : dataset.episodes) {
        put_u32(out, static_cast<std::uint32_t>(ep.cls));
        put_u32(out, static_cast<std::uint32_t>(ep.onsets.size()));
        for (int idx : ep.onsets) put_u32(out, static_cast<std::uint32_t>(idx));
        put_f32(out, ep.video.values());
        put_f32(out, ep.speech.values());
        put_f32(out, ep.sfx.values());
        put_f32(out, ep.cond_speech_sem.values());
        put_f32(out, ep.cond_scene_sem.values());
    }
    if (!out) throw IoError("dataset: write to '" + path + "' failed");
}

Dataset read_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("dataset: cannot open '" + path + "'");
    Dataset ds;
    ds.frames = static_cast<int>(get_u32(in));
    ds.tokens_per_frame = static_cast<int>(get_u32(in));
    ds.dims.dim_video = static_cast<int>(get_u32(in));
    ds.dims.dim_audio = static_cast<int>(get_u32(in));
    ds.dims.cond_dim = static_cast<int>(get_u32(in));
    const std::uint32_t count = get_u32(in);
    const int n = ds.frames * ds.tokens_per_frame;
    for (std::uint32_t e = 0; e < count; ++e) {
        Episode ep;
        ep.frames = ds.frames;
        ep.tokens_per_frame = ds.tokens_per_frame;
        ep.cls = static_cast<EpisodeClass>(get_u32(in));
        const std::uint32_t onset_count = get_u32(in);
        ep.onsets.resize(onset_count);
        for (std::uint32_t i = 0; i < onset_count; ++i) ep.onsets[i] = static_cast<int>(get_u32(in));
        ep.video = Tensor({ds.frames, ds.dims.dim_video}, get_f32(in, static_cast<std::size_t>(ds.frames * ds.dims.dim_video)));
        ep.speech = Tensor({n, ds.dims.dim_audio}, get_f32(in, static_cast<std::size_t>(n * ds.dims.dim_audio)));
        ep.sfx = Tensor({n, ds.dims.dim_audio}, get_f32(in, static_cast<std::size_t>(n * ds.dims.dim_audio)));
        ep.cond_speech_sem = Tensor({ds.dims.cond_dim}, get_f32(in, static_cast<std::size_t>(ds.dims.cond_dim)));
        ep.cond_scene_sem = Tensor({ds.dims.cond_dim}, get_f32(in, static_cast<std::size_t>(ds.dims.cond_dim)));
        ds.episodes.push_back(std::move(ep));
    }
    return ds;
}

}  // namespace avflow

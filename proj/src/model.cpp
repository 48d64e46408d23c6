#include "avflow/model.hpp"

#include <algorithm>

namespace avflow {

void ModelConfig::validate() const {
    if (layers_video < 1 || layers_audio < 1) throw ConfigError("model: layer counts must be >= 1");
    if (dim < 2 || dim % heads != 0) throw ConfigError("model: dim must be a positive multiple of heads");
    if ((dim / heads) % 2 != 0) throw ConfigError("model: head dim must be even for rotary positions");
    if (tokens_per_frame < 1) throw ConfigError("model: tokens_per_frame must be >= 1");
    if (cond_dim < 1) throw ConfigError("model: cond_dim must be >= 1");
    if (disable_hghs && (disable_biaca || disable_scg))
        throw ConfigError("model: disable_hghs already removes the dual-stream machinery");
}

TransformerLayer::TransformerLayer(const std::string& name, int dim, int heads, int ffn_hidden, Rng& rng) {
    ln_attn = LayerNorm(name + ".ln_attn", dim);
    ln_ffn = LayerNorm(name + ".ln_ffn", dim);
    attn = Attention(name + ".attn", dim, heads, rng);
    ffn = FeedForward(name + ".ffn", dim, ffn_hidden, rng);
}

Tensor TransformerLayer::apply(Graph& g, const Tensor& x, const std::vector<int>& positions) {
    Tensor normed = ln_attn.apply(g, x);
    Tensor y = add(x, attn.apply(g, normed, normed, &positions, &positions));
    return add(y, ffn.apply(g, ln_ffn.apply(g, y)));
}

void TransformerLayer::collect(ParamRefs& refs) {
    ln_attn.collect(refs);
    ln_ffn.collect(refs);
    attn.collect(refs);
    ffn.collect(refs);
}

FusionSite::FusionSite(const std::string& name, int dim, int heads, Rng& rng) {
    video_from_audio = Attention(name + ".video_from_audio", dim, heads, rng);
    audio_from_video = Attention(name + ".audio_from_video", dim, heads, rng);
}

void FusionSite::collect(ParamRefs& refs) {
    video_from_audio.collect(refs);
    audio_from_video.collect(refs);
}

std::pair<Tensor, Tensor> bidirectional_fusion(Graph& g, const Tensor& video_tokens, const Tensor& audio_tokens,
                                               FusionSite& site) {
    if (video_tokens.rank() != 3 || audio_tokens.rank() != 3)
        throw ShapeError("fusion: expected [B,F,D] and [B,N,D], got " + shape_str(video_tokens.shape()) + " and " + shape_str(audio_tokens.shape()));
    const int b = video_tokens.dim(0);
    const int frames = video_tokens.dim(1);
    const int d = video_tokens.dim(2);
    const int n = audio_tokens.dim(1);
    if (audio_tokens.dim(0) != b || audio_tokens.dim(2) != d)
        throw ShapeError("fusion: batch/feature dims disagree, " + shape_str(video_tokens.shape()) + " vs " + shape_str(audio_tokens.shape()));
    if (n % frames != 0)
        throw ShapeError("fusion: audio length " + std::to_string(n) + " is not a multiple of frame count " + std::to_string(frames));
    const int per_frame = n / frames;

    Tensor vq = reshape(video_tokens, {b, frames, 1, d});
    Tensor ab = reshape(audio_tokens, {b, frames, per_frame, d});

    Tensor video_delta = reshape(site.video_from_audio.apply(g, vq, ab), {b, frames, d});
    Tensor audio_delta = reshape(site.audio_from_video.apply(g, ab, vq), {b, n, d});
    return {add(video_tokens, video_delta), add(audio_tokens, audio_delta)};
}

Tensor interleave_streams(Graph& g, const DualStreamLatent& lat, int frames) {
    (void)g;
    lat.validate();
    const int b = lat.batch();
    const int n = lat.tokens();
    const int d = lat.dim();
    if (n % frames != 0) throw ShapeError("interleave: tokens " + std::to_string(n) + " not a multiple of frames " + std::to_string(frames));
    const int r = n / frames;
    Tensor sp = reshape(lat.speech, {b, frames, r, d});
    Tensor fx = reshape(lat.sfx, {b, frames, r, d});
    return reshape(concat({sp, fx}, 2), {b, 2 * n, d});
}

DualStreamLatent deinterleave_streams(Graph& g, const Tensor& merged, int frames, int tokens_per_frame) {
    (void)g;
    const int b = merged.dim(0);
    const int d = merged.dim(2);
    const int n = merged.dim(1) / 2;
    Tensor grouped = reshape(merged, {b, frames, 2 * tokens_per_frame, d});
    auto parts = split(grouped, 2, {tokens_per_frame, tokens_per_frame});
    return {reshape(parts[0], {b, n, d}), reshape(parts[1], {b, n, d})};
}

TimestepMlp::TimestepMlp(const std::string& name, int dim, Rng& rng) {
    in = Linear(name + ".in", dim, dim, rng);
    out = Linear(name + ".out", dim, dim, rng);
}

Tensor TimestepMlp::apply(Graph& g, double t) {
    return out.apply(g, silu(in.apply(g, timestep_features(t, in.in_features()))));
}

void TimestepMlp::collect(ParamRefs& refs) {
    in.collect(refs);
    out.collect(refs);
}

FusionModel::FusionModel(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const int d = cfg_.dim;
    const int hidden = cfg_.ffn_mult * d;

    video_in_ = Linear("video.in", d, d, rng);
    t_video_ = TimestepMlp("video.t", d, rng);
    for (int l = 0; l < cfg_.layers_video; ++l)
        video_layers_.emplace_back("video.layer" + std::to_string(l), d, cfg_.heads, hidden, rng);
    ln_video_out_ = LayerNorm("video.ln_out", d);
    video_head_ = Linear("video.head", d, d, rng);

    t_audio_ = TimestepMlp("audio.t", d, rng);
    if (cfg_.disable_hghs) {
        in_speech_ = Linear("audio.in_mixed", d, d, rng);
        cond_speech_ = Linear("audio.cond_mixed", 2 * cfg_.cond_dim, d, rng);
        for (int l = 0; l < cfg_.layers_audio; ++l)
            mixed_layers_.emplace_back("audio.layer" + std::to_string(l), d, cfg_.heads, hidden, rng);
        ln_speech_out_ = LayerNorm("audio.ln_out_mixed", d);
        head_speech_ = Linear("audio.head_mixed", d, d, rng);
    } else {
        in_speech_ = Linear("audio.in_speech", d, d, rng);
        in_sfx_ = Linear("audio.in_sfx", d, d, rng);
        cond_speech_ = Linear("audio.cond_speech", 2 * cfg_.cond_dim, d, rng);
        cond_sfx_ = Linear("audio.cond_sfx", 2 * cfg_.cond_dim, d, rng);
        for (int l = 0; l < cfg_.layers_audio; ++l)
            audio_layers_.emplace_back("audio.layer" + std::to_string(l), d, cfg_.heads, hidden, cfg_.cond_dim, rng,
                                       !cfg_.disable_biaca, !cfg_.disable_scg);
        ln_speech_out_ = LayerNorm("audio.ln_out_speech", d);
        ln_sfx_out_ = LayerNorm("audio.ln_out_sfx", d);
        head_speech_ = Linear("audio.head_speech", d, d, rng);
        head_sfx_ = Linear("audio.head_sfx", d, d, rng);
    }

    const int rounds = std::max(cfg_.layers_video, cfg_.layers_audio);
    for (int s = 0; s < rounds; ++s) fusion_.emplace_back("fusion.site" + std::to_string(s), d, cfg_.heads, rng);
}

Tensor FusionModel::embed_video(Graph& g, const Tensor& video_latent, double t_video) {
    if (video_latent.rank() != 3 || video_latent.dim(2) != cfg_.dim)
        throw ShapeError("video latent must be [B,F," + std::to_string(cfg_.dim) + "], got " + shape_str(video_latent.shape()));
    return add_bias(video_in_.apply(g, video_latent), t_video_.apply(g, t_video));
}

DualStreamLatent FusionModel::embed_audio(Graph& g, const DualStreamLatent& audio, double t_audio,
                                          const ConditionPair& cond) {
    cond.validate();
    Tensor temb = t_audio_.apply(g, t_audio);
    Tensor cond_joint = concat({cond.speech_sem, cond.scene_sem}, 1);
    const int n = audio.speech.dim(1);
    DualStreamLatent out;
    out.speech = add(add_bias(in_speech_.apply(g, audio.speech), temb), tile_rows(cond_speech_.apply(g, cond_joint), n));
    if (!cfg_.disable_hghs) {
        out.sfx = add(add_bias(in_sfx_.apply(g, audio.sfx), temb), tile_rows(cond_sfx_.apply(g, cond_joint), n));
    }
    return out;
}

Tensor FusionModel::video_layer_pass(Graph& g, int layer, const Tensor& x) {
    std::vector<int> positions(static_cast<std::size_t>(x.dim(1)));
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i);
    return video_layers_[static_cast<std::size_t>(layer)].apply(g, x, positions);
}

Tensor FusionModel::head_video(Graph& g, const Tensor& x) { return video_head_.apply(g, ln_video_out_.apply(g, x)); }

FusionModel::Velocities FusionModel::forward(Graph& g, const Tensor& video_latent, const DualStreamLatent& audio,
                                             double t_video, double t_audio, const ConditionPair& cond,
                                             std::vector<Tensor>* gate_log) {
    const int frames = video_latent.dim(1);
    const int n = audio.speech.dim(1);
    if (n != cfg_.tokens_per_frame * frames)
        throw ShapeError("audio tokens " + std::to_string(n) + " != tokens_per_frame*frames = " + std::to_string(cfg_.tokens_per_frame * frames));

    Tensor video = embed_video(g, video_latent, t_video);
    DualStreamLatent lat = embed_audio(g, audio, t_audio, cond);

    std::vector<int> audio_positions(static_cast<std::size_t>(n));
    for (std::size_t i = 0; i < audio_positions.size(); ++i) audio_positions[i] = static_cast<int>(i);

    const int rounds = fusion_rounds();
    for (int k = 0; k < rounds; ++k) {
        if (k < cfg_.layers_video) video = video_layer_pass(g, k, video);
        if (k < cfg_.layers_audio) {
            if (cfg_.disable_hghs) {
                lat.speech = mixed_layers_[static_cast<std::size_t>(k)].apply(g, lat.speech, audio_positions);
            } else {
                lat = audio_layers_[static_cast<std::size_t>(k)].apply(g, lat, cond, gate_log);
            }
        }
        if (cfg_.disable_hghs) {
            auto [v2, a2] = bidirectional_fusion(g, video, lat.speech, fusion_[static_cast<std::size_t>(k)]);
            video = v2;
            lat.speech = a2;
        } else {
            Tensor merged = interleave_streams(g, lat, frames);
            auto [v2, a2] = bidirectional_fusion(g, video, merged, fusion_[static_cast<std::size_t>(k)]);
            video = v2;
            lat = deinterleave_streams(g, a2, frames, cfg_.tokens_per_frame);
        }
        check_finite(video, "video branch after round " + std::to_string(k));
        check_finite(lat.speech, "audio branch after round " + std::to_string(k));
        if (lat.sfx.defined()) check_finite(lat.sfx, "sfx stream after round " + std::to_string(k));
    }

    Velocities out;
    out.video = head_video(g, video);
    out.speech = head_speech_.apply(g, ln_speech_out_.apply(g, lat.speech));
    if (!cfg_.disable_hghs) out.sfx = head_sfx_.apply(g, ln_sfx_out_.apply(g, lat.sfx));
    return out;
}

std::pair<Tensor, Tensor> FusionModel::audio_branch_forward(Graph& g, const DualStreamLatent& audio, double t_audio,
                                                            const ConditionPair& cond, const Tensor& video_ctx,
                                                            std::vector<Tensor>* gate_log) {
    if (video_ctx.rank() != 3) throw ShapeError("audio branch: video context must be [B,F,D]");
    const int frames = video_ctx.dim(1);
    DualStreamLatent lat = embed_audio(g, audio, t_audio, cond);

    std::vector<int> audio_positions(static_cast<std::size_t>(audio.speech.dim(1)));
    for (std::size_t i = 0; i < audio_positions.size(); ++i) audio_positions[i] = static_cast<int>(i);

    const int rounds = fusion_rounds();
    for (int k = 0; k < rounds; ++k) {
        if (k < cfg_.layers_audio) {
            if (cfg_.disable_hghs) {
                lat.speech = mixed_layers_[static_cast<std::size_t>(k)].apply(g, lat.speech, audio_positions);
            } else {
                lat = audio_layers_[static_cast<std::size_t>(k)].apply(g, lat, cond, gate_log);
            }
        }
        if (cfg_.disable_hghs) {
            auto [v2, a2] = bidirectional_fusion(g, video_ctx, lat.speech, fusion_[static_cast<std::size_t>(k)]);
            (void)v2;
            lat.speech = a2;
        } else {
            Tensor merged = interleave_streams(g, lat, frames);
            auto [v2, a2] = bidirectional_fusion(g, video_ctx, merged, fusion_[static_cast<std::size_t>(k)]);
            (void)v2;
            lat = deinterleave_streams(g, a2, frames, cfg_.tokens_per_frame);
        }
        check_finite(lat.speech, "audio branch after round " + std::to_string(k));
        if (lat.sfx.defined()) check_finite(lat.sfx, "sfx stream after round " + std::to_string(k));
    }

    Tensor v_speech = head_speech_.apply(g, ln_speech_out_.apply(g, lat.speech));
    Tensor v_sfx;
    if (!cfg_.disable_hghs) v_sfx = head_sfx_.apply(g, ln_sfx_out_.apply(g, lat.sfx));
    return {v_speech, v_sfx};
}

Tensor FusionModel::video_branch_forward(Graph& g, const Tensor& video_latent, double t_video, const Tensor& audio_ctx) {
    if (audio_ctx.rank() != 3) throw ShapeError("video branch: audio context must be [B,Na,D]");
    Tensor video = embed_video(g, video_latent, t_video);
    const int rounds = fusion_rounds();
    for (int k = 0; k < rounds; ++k) {
        if (k < cfg_.layers_video) video = video_layer_pass(g, k, video);
        auto [v2, a2] = bidirectional_fusion(g, video, audio_ctx, fusion_[static_cast<std::size_t>(k)]);
        (void)a2;
        video = v2;
        check_finite(video, "video branch after round " + std::to_string(k));
    }
    return head_video(g, video);
}

ParamRefs FusionModel::parameters() {
    ParamRefs refs;
    video_in_.collect(refs);
    t_video_.collect(refs);
    for (auto& l : video_layers_) l.collect(refs);
    ln_video_out_.collect(refs);
    video_head_.collect(refs);

    t_audio_.collect(refs);
    in_speech_.collect(refs);
    cond_speech_.collect(refs);
    if (!cfg_.disable_hghs) {
        in_sfx_.collect(refs);
        cond_sfx_.collect(refs);
    }
    for (auto& l : audio_layers_) l.collect(refs);
    for (auto& l : mixed_layers_) l.collect(refs);
    ln_speech_out_.collect(refs);
    head_speech_.collect(refs);
    if (!cfg_.disable_hghs) {
        ln_sfx_out_.collect(refs);
        head_sfx_.collect(refs);
    }
    for (auto& f : fusion_) f.collect(refs);
    return refs;
}

ParamRefs FusionModel::video_parameters() {
    ParamRefs refs;
    video_in_.collect(refs);
    t_video_.collect(refs);
    for (auto& l : video_layers_) l.collect(refs);
    ln_video_out_.collect(refs);
    video_head_.collect(refs);
    return refs;
}

ParamRefs FusionModel::fusion_parameters() {
    ParamRefs refs;
    for (auto& f : fusion_) f.collect(refs);
    return refs;
}

void FusionModel::zero_fusion() {
    for (Parameter* p : fusion_parameters())
        std::fill(p->value.mutate_data().begin(), p->value.mutate_data().end(), 0.0);
}

}  // namespace avflow

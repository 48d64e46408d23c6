#pragma once

#include <utility>
#include <vector>

#include "avflow/dual_stream.hpp"
#include "avflow/nn.hpp"

namespace avflow {

struct ModelConfig {
    int layers_video = 4;
    int layers_audio = 3;
    int dim = 32;
    int heads = 4;
    int tokens_per_frame = 2;  // audio tokens per video frame
    int cond_dim = 8;
    int ffn_mult = 4;
    bool disable_hghs = false;   // collapse audio to a single mixed stream
    bool disable_biaca = false;  // drop the cross-stream exchange
    bool disable_scg = false;    // gates pinned fully open

    void validate() const;
};

/// Pre-norm self-attention + feed-forward block with rotary positions.
struct TransformerLayer {
    LayerNorm ln_attn;
    LayerNorm ln_ffn;
    Attention attn;
    FeedForward ffn;

    TransformerLayer() = default;
    TransformerLayer(const std::string& name, int dim, int heads, int ffn_hidden, Rng& rng);

    Tensor apply(Graph& g, const Tensor& x, const std::vector<int>& positions);
    void collect(ParamRefs& refs);
};

/// Frame-bucketed bidirectional cross-attention: each video frame attends to
/// its aligned audio tokens and those tokens attend back to their frame.
struct FusionSite {
    Attention video_from_audio;
    Attention audio_from_video;

    FusionSite() = default;
    FusionSite(const std::string& name, int dim, int heads, Rng& rng);
    void collect(ParamRefs& refs);
};

/// Residual exchange between video [B,F,D] and audio [B,N,D] with N a
/// multiple of F. Returns the updated (video, audio) pair.
std::pair<Tensor, Tensor> bidirectional_fusion(Graph& g, const Tensor& video_tokens, const Tensor& audio_tokens,
                                               FusionSite& site);

/// Frame-major interleave of the two streams: [B,N,D] x2 -> [B,2N,D] where
/// each frame contributes its speech tokens then its sfx tokens.
Tensor interleave_streams(Graph& g, const DualStreamLatent& lat, int frames);
DualStreamLatent deinterleave_streams(Graph& g, const Tensor& merged, int frames, int tokens_per_frame);

struct TimestepMlp {
    Linear in;
    Linear out;

    TimestepMlp() = default;
    TimestepMlp(const std::string& name, int dim, Rng& rng);

    Tensor apply(Graph& g, double t);  // [dim]
    void collect(ParamRefs& refs);
};

/// Two-branch velocity predictor: a video transformer and a dual-stream audio
/// transformer coupled by frame-level bidirectional cross-attention. With
/// disable_hghs the audio side degrades to one mixed stream; pass that stream
/// in DualStreamLatent::speech and leave sfx undefined (outputs mirror this).
class FusionModel {
  public:
    struct Velocities {
        Tensor video;
        Tensor speech;  // mixed-stream velocity when disable_hghs
        Tensor sfx;     // undefined when disable_hghs
    };

    FusionModel(const ModelConfig& cfg, Rng& init_rng);

    /// Co-evolving joint forward over both branches.
    Velocities forward(Graph& g, const Tensor& video_latent, const DualStreamLatent& audio,
                       double t_video, double t_audio, const ConditionPair& cond,
                       std::vector<Tensor>* gate_log = nullptr);

    /// Audio stack alone, cross-attending to a fixed video context [B,F,dim].
    std::pair<Tensor, Tensor> audio_branch_forward(Graph& g, const DualStreamLatent& audio, double t_audio,
                                                   const ConditionPair& cond, const Tensor& video_ctx,
                                                   std::vector<Tensor>* gate_log = nullptr);

    /// Video stack alone, cross-attending to a fixed audio context [B,Na,dim].
    Tensor video_branch_forward(Graph& g, const Tensor& video_latent, double t_video, const Tensor& audio_ctx);

    ParamRefs parameters();
    ParamRefs video_parameters();
    ParamRefs fusion_parameters();
    const ModelConfig& config() const { return cfg_; }
    int fusion_rounds() const { return static_cast<int>(fusion_.size()); }

    /// Zero all fusion projection weights (used to sever the branches).
    void zero_fusion();

  private:
    Tensor embed_video(Graph& g, const Tensor& video_latent, double t_video);
    DualStreamLatent embed_audio(Graph& g, const DualStreamLatent& audio, double t_audio, const ConditionPair& cond);
    Tensor video_layer_pass(Graph& g, int layer, const Tensor& x);
    Tensor head_video(Graph& g, const Tensor& x);

    ModelConfig cfg_;

    Linear video_in_;
    TimestepMlp t_video_;
    std::vector<TransformerLayer> video_layers_;
    LayerNorm ln_video_out_;
    Linear video_head_;

    Linear in_speech_;
    Linear in_sfx_;
    TimestepMlp t_audio_;
    Linear cond_speech_;
    Linear cond_sfx_;
    std::vector<DualStreamLayer> audio_layers_;
    std::vector<TransformerLayer> mixed_layers_;  // disable_hghs variant
    LayerNorm ln_speech_out_;
    LayerNorm ln_sfx_out_;
    Linear head_speech_;
    Linear head_sfx_;

    std::vector<FusionSite> fusion_;
};

}  // namespace avflow

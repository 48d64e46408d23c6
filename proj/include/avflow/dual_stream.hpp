#pragma once

#include <vector>

#include "avflow/nn.hpp"

namespace avflow {

/// Paired speech / sound-effect token sequences of identical [B, N, D] shape.
/// Token i of both streams refers to the same physical time.
struct DualStreamLatent {
    Tensor speech;
    Tensor sfx;

    void validate() const;
    int batch() const { return speech.dim(0); }
    int tokens() const { return speech.dim(1); }
    int dim() const { return speech.dim(2); }
};

/// Per-sample gate pair, both strictly inside (0,1).
struct GateVector {
    double g_speech = 0.5;
    double g_sfx = 0.5;
};

/// Pooled semantic vectors driving the gates: transcription side (speech) and
/// caption side (scene/sfx). Stored batched as [B, Dc].
struct ConditionPair {
    Tensor speech_sem;
    Tensor scene_sem;

    void validate() const;
    int batch() const { return speech_sem.dim(0); }
    int cond_dim() const { return speech_sem.dim(1); }
};

/// Two-layer perceptron over [c_speech; c_scene] emitting two sigmoid gates.
/// The output layer starts at zero so untrained gates sit at 0.5.
struct ScgGate {
    Linear hidden;
    Linear out;

    ScgGate() = default;
    ScgGate(const std::string& name, int cond_dim, Rng& rng);

    /// Returns [B, 2] gate values in (0,1).
    Tensor gates(Graph& g, const ConditionPair& cond);
    void collect(ParamRefs& refs);
};

/// Parameters of one bidirectional cross-attention exchange between streams.
struct BiAcaBlock {
    LayerNorm ln_speech;
    LayerNorm ln_sfx;
    Attention speech_from_sfx;  // speech queries, sfx keys/values
    Attention sfx_from_speech;

    BiAcaBlock() = default;
    BiAcaBlock(const std::string& name, int dim, int heads, Rng& rng);
    void collect(ParamRefs& refs);
};

/// Both directions of the residual cross-attention update (ungated form).
DualStreamLatent bi_aca(Graph& g, const DualStreamLatent& lat, BiAcaBlock& block);

/// Raw (pre-residual) cross-attention outputs for both directions.
std::pair<Tensor, Tensor> bi_aca_messages(Graph& g, const DualStreamLatent& lat, BiAcaBlock& block);

/// h + g * attn_out with a fixed per-call gate.
Tensor scg_gated_update(const Tensor& h, const Tensor& attn_out, double gate);

/// h + g * attn_out with a differentiable per-sample gate column [B,1].
Tensor scg_gated_update(const Tensor& h, const Tensor& attn_out, const Tensor& gate_column);

/// Merge-process-split stage: concat streams along the sequence axis, add the
/// per-stream modality bias, run shared self-attention with the streams
/// reusing identical rotary indices, feed-forward, then split back.
struct JointBlock {
    Parameter bias_speech;  // [D]
    Parameter bias_sfx;     // [D]
    LayerNorm ln_attn;
    LayerNorm ln_ffn;
    Attention self_attn;
    FeedForward ffn;

    JointBlock() = default;
    JointBlock(const std::string& name, int dim, int heads, int ffn_hidden, Rng& rng);
    void collect(ParamRefs& refs);
};

/// Rotary indices for the merged sequence: 0..N-1 repeated for both streams.
std::vector<int> joint_positions(int tokens);

DualStreamLatent joint_block(Graph& g, const DualStreamLatent& lat, JointBlock& block);

/// One full audio-layer pass: gated Bi-ACA exchange followed by the joint
/// merge/split stage. Gate values (one [B,2] tensor per call) are appended to
/// gate_log when provided.
struct DualStreamLayer {
    BiAcaBlock aca;
    ScgGate scg;
    JointBlock joint;
    bool use_biaca = true;
    bool use_scg = true;

    DualStreamLayer() = default;
    DualStreamLayer(const std::string& name, int dim, int heads, int ffn_hidden, int cond_dim, Rng& rng,
                    bool with_biaca, bool with_scg);

    DualStreamLatent apply(Graph& g, const DualStreamLatent& lat, const ConditionPair& cond,
                           std::vector<Tensor>* gate_log = nullptr);
    void collect(ParamRefs& refs);
};

}  // namespace avflow

#include "avflow/dual_stream.hpp"

namespace avflow {

void DualStreamLatent::validate() const {
    if (!speech.defined() || !sfx.defined()) throw ContractError("dual stream latent is undefined");
    if (speech.rank() != 3 || sfx.rank() != 3)
        throw ShapeError("dual stream latent must be [B,N,D], got " + shape_str(speech.shape()) + " and " + shape_str(sfx.shape()));
    if (speech.shape() != sfx.shape())
        throw ShapeError("stream shapes disagree, " + shape_str(speech.shape()) + " vs " + shape_str(sfx.shape()));
}

void ConditionPair::validate() const {
    if (!speech_sem.defined() || !scene_sem.defined()) throw ContractError("condition pair is undefined");
    if (speech_sem.rank() != 2 || scene_sem.rank() != 2 || speech_sem.shape() != scene_sem.shape())
        throw ShapeError("conditions must be matching [B,Dc], got " + shape_str(speech_sem.shape()) + " and " + shape_str(scene_sem.shape()));
}

ScgGate::ScgGate(const std::string& name, int cond_dim, Rng& rng) {
    hidden = Linear(name + ".hidden", 2 * cond_dim, cond_dim, rng);
    out = Linear(name + ".out", cond_dim, 2, rng, /*zero_init=*/true);
}

Tensor ScgGate::gates(Graph& g, const ConditionPair& cond) {
    cond.validate();
    Tensor joint = concat({cond.speech_sem, cond.scene_sem}, 1);  // [B, 2Dc]
    return sigmoid(out.apply(g, silu(hidden.apply(g, joint))));
}

void ScgGate::collect(ParamRefs& refs) {
    hidden.collect(refs);
    out.collect(refs);
}

BiAcaBlock::BiAcaBlock(const std::string& name, int dim, int heads, Rng& rng) {
    ln_speech = LayerNorm(name + ".ln_speech", dim);
    ln_sfx = LayerNorm(name + ".ln_sfx", dim);
    speech_from_sfx = Attention(name + ".speech_from_sfx", dim, heads, rng);
    sfx_from_speech = Attention(name + ".sfx_from_speech", dim, heads, rng);
}

void BiAcaBlock::collect(ParamRefs& refs) {
    ln_speech.collect(refs);
    ln_sfx.collect(refs);
    speech_from_sfx.collect(refs);
    sfx_from_speech.collect(refs);
}

std::pair<Tensor, Tensor> bi_aca_messages(Graph& g, const DualStreamLatent& lat, BiAcaBlock& block) {
    lat.validate();
    Tensor n_speech = block.ln_speech.apply(g, lat.speech);
    Tensor n_sfx = block.ln_sfx.apply(g, lat.sfx);
    Tensor to_speech = block.speech_from_sfx.apply(g, n_speech, n_sfx);
    Tensor to_sfx = block.sfx_from_speech.apply(g, n_sfx, n_speech);
    return {to_speech, to_sfx};
}

DualStreamLatent bi_aca(Graph& g, const DualStreamLatent& lat, BiAcaBlock& block) {
    auto [to_speech, to_sfx] = bi_aca_messages(g, lat, block);
    return {add(lat.speech, to_speech), add(lat.sfx, to_sfx)};
}

Tensor scg_gated_update(const Tensor& h, const Tensor& attn_out, double gate) {
    if (h.shape() != attn_out.shape())
        throw ShapeError("scg_gated_update: " + shape_str(h.shape()) + " vs " + shape_str(attn_out.shape()));
    return add(h, scale(attn_out, gate));
}

Tensor scg_gated_update(const Tensor& h, const Tensor& attn_out, const Tensor& gate_column) {
    if (h.shape() != attn_out.shape())
        throw ShapeError("scg_gated_update: " + shape_str(h.shape()) + " vs " + shape_str(attn_out.shape()));
    if (h.rank() != 3) throw ShapeError("scg_gated_update: per-sample gates need [B,N,D] input");
    Tensor gate_full = broadcast_sample_scalar(gate_column, h.dim(1), h.dim(2));
    return add(h, mul(attn_out, gate_full));
}

JointBlock::JointBlock(const std::string& name, int dim, int heads, int ffn_hidden, Rng& rng) {
    bias_speech = Parameter(name + ".bias_speech", Tensor::randn({dim}, rng, 0.02));
    bias_sfx = Parameter(name + ".bias_sfx", Tensor::randn({dim}, rng, 0.02));
    ln_attn = LayerNorm(name + ".ln_attn", dim);
    ln_ffn = LayerNorm(name + ".ln_ffn", dim);
    self_attn = Attention(name + ".self_attn", dim, heads, rng);
    ffn = FeedForward(name + ".ffn", dim, ffn_hidden, rng);
}

void JointBlock::collect(ParamRefs& refs) {
    refs.push_back(&bias_speech);
    refs.push_back(&bias_sfx);
    ln_attn.collect(refs);
    ln_ffn.collect(refs);
    self_attn.collect(refs);
    ffn.collect(refs);
}

std::vector<int> joint_positions(int tokens) {
    std::vector<int> pos(static_cast<std::size_t>(2 * tokens));
    for (int i = 0; i < tokens; ++i) {
        pos[static_cast<std::size_t>(i)] = i;
        pos[static_cast<std::size_t>(tokens + i)] = i;
    }
    return pos;
}

DualStreamLatent joint_block(Graph& g, const DualStreamLatent& lat, JointBlock& block) {
    lat.validate();
    const int n = lat.tokens();
    Tensor tagged_speech = add_bias(lat.speech, block.bias_speech.bind(g));
    Tensor tagged_sfx = add_bias(lat.sfx, block.bias_sfx.bind(g));
    Tensor joint = concat({tagged_speech, tagged_sfx}, 1);  // [B, 2N, D]

    const std::vector<int> positions = joint_positions(n);
    Tensor normed = block.ln_attn.apply(g, joint);
    joint = add(joint, block.self_attn.apply(g, normed, normed, &positions, &positions));
    joint = add(joint, block.ffn.apply(g, block.ln_ffn.apply(g, joint)));

    auto parts = split(joint, 1, {n, n});
    return {parts[0], parts[1]};
}

DualStreamLayer::DualStreamLayer(const std::string& name, int dim, int heads, int ffn_hidden, int cond_dim,
                                 Rng& rng, bool with_biaca, bool with_scg)
    : use_biaca(with_biaca), use_scg(with_scg) {
    if (use_biaca) {
        aca = BiAcaBlock(name + ".aca", dim, heads, rng);
        if (use_scg) scg = ScgGate(name + ".scg", cond_dim, rng);
    }
    joint = JointBlock(name + ".joint", dim, heads, ffn_hidden, rng);
}

DualStreamLatent DualStreamLayer::apply(Graph& g, const DualStreamLatent& lat, const ConditionPair& cond,
                                        std::vector<Tensor>* gate_log) {
    DualStreamLatent cur = lat;
    if (use_biaca) {
        auto [to_speech, to_sfx] = bi_aca_messages(g, cur, aca);
        if (use_scg) {
            Tensor gate_pair = scg.gates(g, cond);  // [B,2]
            auto cols = split(gate_pair, 1, {1, 1});
            if (gate_log != nullptr) gate_log->push_back(gate_pair);
            cur.speech = scg_gated_update(cur.speech, to_speech, cols[0]);
            cur.sfx = scg_gated_update(cur.sfx, to_sfx, cols[1]);
        } else {
            // Ablated gating: constant fully-open valves (ungated update).
            cur.speech = add(cur.speech, to_speech);
            cur.sfx = add(cur.sfx, to_sfx);
        }
    }
    return joint_block(g, cur, joint);
}

void DualStreamLayer::collect(ParamRefs& refs) {
    if (use_biaca) {
        aca.collect(refs);
        if (use_scg) scg.collect(refs);
    }
    joint.collect(refs);
}

}  // namespace avflow

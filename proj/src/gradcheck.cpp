#include "avflow/gradcheck.hpp"

#include <cmath>

#include "avflow/dual_stream.hpp"
#include "avflow/model.hpp"

namespace avflow {

double check_block(const std::function<Tensor(Graph&)>& loss, const ParamRefs& params, double step) {
    Graph g;
    Tensor l = loss(g);
    if (l.size() != 1) throw ContractError("check_block: loss must be scalar");
    Gradients grads = g.backward(l);

    // Snapshot all analytic gradients first: numeric re-evaluations below
    // rebind every parameter to throwaway graphs.
    std::vector<std::vector<double>> analytic_all;
    analytic_all.reserve(params.size());
    for (Parameter* p : params) {
        const int node = p->bound_node(g);
        if (node < 0) throw ContractError("check_block: parameter '" + p->name + "' was not bound by the loss");
        analytic_all.push_back(grads.at_node(node).values());
    }

    auto eval = [&loss]() {
        Graph local;
        const double v = loss(local).item();
        if (!std::isfinite(v)) throw EvalError("check_block: loss is not finite");
        return v;
    };

    double worst = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Parameter* p = params[pi];
        const std::vector<double>& analytic = analytic_all[pi];
        std::vector<double>& value = p->value.mutate_data();
        std::vector<double> fd(value.size());
        for (std::size_t i = 0; i < value.size(); ++i) {
            const double orig = value[i];
            value[i] = orig + step;
            const double up = eval();
            value[i] = orig - step;
            const double down = eval();
            value[i] = orig;
            fd[i] = (up - down) / (2.0 * step);
        }
        worst = std::max(worst, max_relative_error(analytic, fd));
    }
    return worst;
}

namespace {

// Inputs swept alongside module weights are wrapped as pseudo-parameters so
// one code path covers both.
Parameter input_param(const std::string& name, Tensor value) { return Parameter(name, std::move(value)); }

GradCheckResult check_bi_aca(double step) {
    Rng rng(11);
    const int b = 2, n = 3, d = 8, heads = 2;
    BiAcaBlock block("aca", d, heads, rng);
    // Zero-initialized output projections hide the cross path from the loss;
    // perturb them so every parameter carries signal.
    for (auto* p : {&block.speech_from_sfx.o.weight, &block.sfx_from_speech.o.weight})
        p->value = Tensor::randn({d, d}, rng, 0.3);

    Parameter in_speech = input_param("in.speech", Tensor::randn({b, n, d}, rng));
    Parameter in_sfx = input_param("in.sfx", Tensor::randn({b, n, d}, rng));

    ParamRefs params;
    block.collect(params);
    params.push_back(&in_speech);
    params.push_back(&in_sfx);

    auto loss = [&](Graph& g) {
        DualStreamLatent lat{in_speech.bind(g), in_sfx.bind(g)};
        DualStreamLatent out = bi_aca(g, lat, block);
        return add(mean_sq(out.speech), mean_sq(out.sfx));
    };
    return {"bi_aca", check_block(loss, params, step)};
}

GradCheckResult check_scg_path(double step) {
    Rng rng(12);
    const int b = 2, n = 3, d = 8, heads = 2, cond_dim = 6;
    BiAcaBlock block("aca", d, heads, rng);
    for (auto* p : {&block.speech_from_sfx.o.weight, &block.sfx_from_speech.o.weight})
        p->value = Tensor::randn({d, d}, rng, 0.3);
    ScgGate scg("scg", cond_dim, rng);
    scg.out.weight.value = Tensor::randn({cond_dim, 2}, rng, 0.3);
    scg.out.bias.value = Tensor::randn({2}, rng, 0.1);

    Parameter in_speech = input_param("in.speech", Tensor::randn({b, n, d}, rng));
    Parameter in_sfx = input_param("in.sfx", Tensor::randn({b, n, d}, rng));
    Parameter in_cs = input_param("in.c_speech", Tensor::randn({b, cond_dim}, rng));
    Parameter in_ca = input_param("in.c_scene", Tensor::randn({b, cond_dim}, rng));

    ParamRefs params;
    block.collect(params);
    scg.collect(params);
    params.push_back(&in_speech);
    params.push_back(&in_sfx);
    params.push_back(&in_cs);
    params.push_back(&in_ca);

    auto loss = [&](Graph& g) {
        DualStreamLatent lat{in_speech.bind(g), in_sfx.bind(g)};
        ConditionPair cond{in_cs.bind(g), in_ca.bind(g)};
        auto [to_speech, to_sfx] = bi_aca_messages(g, lat, block);
        Tensor gates = scg.gates(g, cond);
        auto cols = split(gates, 1, {1, 1});
        Tensor out_speech = scg_gated_update(lat.speech, to_speech, cols[0]);
        Tensor out_sfx = scg_gated_update(lat.sfx, to_sfx, cols[1]);
        return add(mean_sq(out_speech), mean_sq(out_sfx));
    };
    return {"scg_path", check_block(loss, params, step)};
}

GradCheckResult check_joint_block(double step) {
    Rng rng(13);
    const int b = 2, n = 3, d = 8, heads = 2;
    JointBlock block("joint", d, heads, 2 * d, rng);
    block.self_attn.o.weight.value = Tensor::randn({d, d}, rng, 0.3);
    block.ffn.out.weight.value = Tensor::randn({2 * d, d}, rng, 0.3);

    Parameter in_speech = input_param("in.speech", Tensor::randn({b, n, d}, rng));
    Parameter in_sfx = input_param("in.sfx", Tensor::randn({b, n, d}, rng));

    ParamRefs params;
    block.collect(params);
    params.push_back(&in_speech);
    params.push_back(&in_sfx);

    auto loss = [&](Graph& g) {
        DualStreamLatent lat{in_speech.bind(g), in_sfx.bind(g)};
        DualStreamLatent out = joint_block(g, lat, block);
        return add(mean_sq(out.speech), mean_sq(out.sfx));
    };
    return {"joint_block", check_block(loss, params, step)};
}

GradCheckResult check_fusion(double step) {
    Rng rng(14);
    const int b = 2, frames = 3, r = 2, d = 8, heads = 2;
    FusionSite site("fusion", d, heads, rng);
    site.video_from_audio.o.weight.value = Tensor::randn({d, d}, rng, 0.3);
    site.audio_from_video.o.weight.value = Tensor::randn({d, d}, rng, 0.3);

    Parameter in_video = input_param("in.video", Tensor::randn({b, frames, d}, rng));
    Parameter in_audio = input_param("in.audio", Tensor::randn({b, frames * r, d}, rng));

    ParamRefs params;
    site.collect(params);
    params.push_back(&in_video);
    params.push_back(&in_audio);

    auto loss = [&](Graph& g) {
        auto [video, audio] = bidirectional_fusion(g, in_video.bind(g), in_audio.bind(g), site);
        return add(mean_sq(video), mean_sq(audio));
    };
    return {"fusion", check_block(loss, params, step)};
}

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.layers_video = 2;
    cfg.layers_audio = 2;
    cfg.dim = 8;
    cfg.heads = 2;
    cfg.tokens_per_frame = 2;
    cfg.cond_dim = 6;
    cfg.ffn_mult = 2;
    return cfg;
}

void roughen(FusionModel& model, Rng& rng) {
    // Give the zero-initialized residual projections nonzero weight so the
    // checks exercise every path at full depth.
    for (Parameter* p : model.parameters()) {
        bool all_zero = true;
        for (double v : p->value.values())
            if (v != 0.0) { all_zero = false; break; }
        if (all_zero) p->value = Tensor::randn(p->value.shape(), rng, 0.2);
    }
}

GradCheckResult check_audio_branch(double step) {
    Rng rng(15);
    ModelConfig cfg = tiny_config();
    FusionModel model(cfg, rng);
    roughen(model, rng);

    const int b = 1, frames = 3;
    const int n = frames * cfg.tokens_per_frame;
    Parameter in_speech = input_param("in.speech", Tensor::randn({b, n, cfg.dim}, rng));
    Parameter in_sfx = input_param("in.sfx", Tensor::randn({b, n, cfg.dim}, rng));
    Parameter in_cs = input_param("in.c_speech", Tensor::randn({b, cfg.cond_dim}, rng));
    Parameter in_ca = input_param("in.c_scene", Tensor::randn({b, cfg.cond_dim}, rng));
    Parameter in_video = input_param("in.video_ctx", Tensor::randn({b, frames, cfg.dim}, rng));

    ParamRefs params = model.parameters();
    // Video-tower weights do not participate in this branch.
    ParamRefs video_only = model.video_parameters();
    ParamRefs swept;
    for (Parameter* p : params) {
        bool is_video = false;
        for (Parameter* q : video_only)
            if (q == p) { is_video = true; break; }
        if (!is_video) swept.push_back(p);
    }
    swept.push_back(&in_speech);
    swept.push_back(&in_sfx);
    swept.push_back(&in_cs);
    swept.push_back(&in_ca);
    swept.push_back(&in_video);

    auto loss = [&](Graph& g) {
        DualStreamLatent lat{in_speech.bind(g), in_sfx.bind(g)};
        ConditionPair cond{in_cs.bind(g), in_ca.bind(g)};
        auto [v_speech, v_sfx] = model.audio_branch_forward(g, lat, 0.37, cond, in_video.bind(g));
        return add(mean_sq(v_speech), mean_sq(v_sfx));
    };
    return {"audio_branch_forward", check_block(loss, swept, step)};
}

GradCheckResult check_video_branch(double step) {
    Rng rng(16);
    ModelConfig cfg = tiny_config();
    FusionModel model(cfg, rng);
    roughen(model, rng);

    const int b = 1, frames = 3;
    Parameter in_video = input_param("in.video", Tensor::randn({b, frames, cfg.dim}, rng));
    Parameter in_audio = input_param("in.audio_ctx", Tensor::randn({b, frames * cfg.tokens_per_frame, cfg.dim}, rng));

    ParamRefs swept = model.video_parameters();
    for (Parameter* p : model.fusion_parameters()) swept.push_back(p);
    swept.push_back(&in_video);
    swept.push_back(&in_audio);

    auto loss = [&](Graph& g) {
        Tensor v = model.video_branch_forward(g, in_video.bind(g), 0.61, in_audio.bind(g));
        return mean_sq(v);
    };
    return {"video_branch_forward", check_block(loss, swept, step)};
}

GradCheckResult check_joint_forward(double step) {
    Rng rng(17);
    ModelConfig cfg = tiny_config();
    FusionModel model(cfg, rng);
    roughen(model, rng);

    const int b = 1, frames = 3;
    const int n = frames * cfg.tokens_per_frame;
    Parameter in_video = input_param("in.video", Tensor::randn({b, frames, cfg.dim}, rng));
    Parameter in_speech = input_param("in.speech", Tensor::randn({b, n, cfg.dim}, rng));
    Parameter in_sfx = input_param("in.sfx", Tensor::randn({b, n, cfg.dim}, rng));
    Parameter in_cs = input_param("in.c_speech", Tensor::randn({b, cfg.cond_dim}, rng));
    Parameter in_ca = input_param("in.c_scene", Tensor::randn({b, cfg.cond_dim}, rng));

    ParamRefs swept = model.parameters();
    swept.push_back(&in_video);
    swept.push_back(&in_speech);
    swept.push_back(&in_sfx);
    swept.push_back(&in_cs);
    swept.push_back(&in_ca);

    auto loss = [&](Graph& g) {
        DualStreamLatent lat{in_speech.bind(g), in_sfx.bind(g)};
        ConditionPair cond{in_cs.bind(g), in_ca.bind(g)};
        FusionModel::Velocities v = model.forward(g, in_video.bind(g), lat, 0.25, 0.75, cond);
        return add(mean_sq(v.video), add(mean_sq(v.speech), mean_sq(v.sfx)));
    };
    return {"joint_forward", check_block(loss, swept, step)};
}

}  // namespace

std::vector<GradCheckResult> run_grad_checks(double step) {
    return {
        check_bi_aca(step),
        check_scg_path(step),
        check_joint_block(step),
        check_fusion(step),
        check_audio_branch(step),
        check_video_branch(step),
        check_joint_forward(step),
    };
}

}  // namespace avflow

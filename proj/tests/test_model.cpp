#include <doctest.h>

#include <cmath>

#include "avflow/model.hpp"

using namespace avflow;

namespace {

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.values().size(); ++i)
        worst = std::max(worst, std::abs(a.values()[i] - b.values()[i]));
    return worst;
}

std::int64_t total_params(FusionModel& m) {
    std::int64_t n = 0;
    for (Parameter* p : m.parameters()) n += p->value.size();
    return n;
}

ModelConfig small_config() {
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

ConditionPair random_cond(Rng& rng, int b, int dc) {
    return {Tensor::randn({b, dc}, rng), Tensor::randn({b, dc}, rng)};
}

}  // namespace

TEST_CASE("bidirectional fusion basics") {
    Rng rng(71);
    const int b = 2, frames = 4, r = 2, d = 8;

    SUBCASE("zero-initialized projections leave both sides unchanged") {
        FusionSite site("f", d, 2, rng);
        Tensor video = Tensor::randn({b, frames, d}, rng);
        Tensor audio = Tensor::randn({b, frames * r, d}, rng);
        Graph g;
        auto [v2, a2] = bidirectional_fusion(g, video, audio, site);
        CHECK(max_abs_diff(v2, video) == 0.0);
        CHECK(max_abs_diff(a2, audio) == 0.0);
    }
    SUBCASE("perturbing one frame's audio touches only that frame") {
        FusionSite site("f", d, 2, rng);
        site.video_from_audio.o.weight.value = Tensor::randn({d, d}, rng, 0.5);
        site.audio_from_video.o.weight.value = Tensor::randn({d, d}, rng, 0.5);

        Tensor video = Tensor::randn({b, frames, d}, rng);
        Tensor audio = Tensor::randn({b, frames * r, d}, rng);
        Tensor audio_mod = audio;
        audio_mod = Tensor(audio.shape(), audio.values());
        // Bump one audio token inside frame 3 of sample 0.
        audio_mod.mutate_data()[static_cast<std::size_t>((3 * r) * d + 1)] += 1.0;

        Graph g1, g2;
        auto [v1, a1] = bidirectional_fusion(g1, video, audio, site);
        auto [v2, a2] = bidirectional_fusion(g2, video, audio_mod, site);

        for (int f = 0; f < frames; ++f) {
            const Tensor row1 = reshape(slice(v1, 1, f, 1), {b, d});
            const Tensor row2 = reshape(slice(v2, 1, f, 1), {b, d});
            if (f == 3)
                CHECK(max_abs_diff(slice(row1, 0, 0, 1), slice(row2, 0, 0, 1)) > 0.0);
            else
                CHECK(max_abs_diff(row1, row2) == 0.0);
        }
        // Sample 1 saw no perturbation at all.
        CHECK(max_abs_diff(slice(v1, 0, 1, 1), slice(v2, 0, 1, 1)) == 0.0);
        (void)a1;
        (void)a2;
    }
    SUBCASE("audio length must be a multiple of the frame count") {
        FusionSite site("f", d, 2, rng);
        Graph g;
        Tensor video = Tensor::randn({b, frames, d}, rng);
        Tensor audio = Tensor::randn({b, frames * r + 1, d}, rng);
        CHECK_THROWS_AS(bidirectional_fusion(g, video, audio, site), ShapeError);
    }
}

TEST_CASE("bucketed fusion equals dense attention under a diagonal mask at r=1") {
    Rng rng(72);
    const int b = 1, frames = 4, d = 8, heads = 2;
    FusionSite site("f", d, heads, rng);
    site.video_from_audio.o.weight.value = Tensor::randn({d, d}, rng, 0.5);

    Tensor video = Tensor::randn({b, frames, d}, rng);
    Tensor audio = Tensor::randn({b, frames, d}, rng);

    Graph g;
    auto [bucketed_video, bucketed_audio] = bidirectional_fusion(g, video, audio, site);
    (void)bucketed_audio;

    // Dense oracle: full attention over all audio tokens with an additive
    // -inf mask off the diagonal, computed with the same projections.
    Graph og;
    Attention& attn = site.video_from_audio;
    const int dh = d / heads;
    auto to_heads = [&](Tensor t) {
        Tensor r4 = reshape(t, {b, frames, heads, dh});
        return transpose(r4, 1, 2);  // [b, heads, frames, dh]
    };
    Tensor q = to_heads(attn.q.apply(og, video));
    Tensor k = to_heads(attn.k.apply(og, audio));
    Tensor v = to_heads(attn.v.apply(og, audio));
    Tensor scores = scale(matmul(q, transpose(k, 2, 3)), 1.0 / std::sqrt(static_cast<double>(dh)));
    std::vector<double> mask_data(static_cast<std::size_t>(b * heads * frames * frames), -1e30);
    for (int h = 0; h < heads; ++h)
        for (int f = 0; f < frames; ++f)
            mask_data[static_cast<std::size_t>(((h * frames) + f) * frames + f)] = 0.0;
    scores = add(scores, Tensor({b, heads, frames, frames}, std::move(mask_data)));
    Tensor ctx = matmul(softmax_last(scores), v);
    Tensor merged = reshape(transpose(ctx, 1, 2), {b, frames, d});
    Tensor oracle = add(video, attn.o.apply(og, merged));

    CHECK(max_abs_diff(bucketed_video, oracle) <= 1e-10);
}

TEST_CASE("branch forwards are deterministic and shape preserving") {
    Rng rng(73);
    ModelConfig cfg = small_config();
    FusionModel model(cfg, rng);

    const int b = 2, frames = 4;
    const int n = frames * cfg.tokens_per_frame;
    DualStreamLatent audio{Tensor::randn({b, n, cfg.dim}, rng), Tensor::randn({b, n, cfg.dim}, rng)};
    ConditionPair cond = random_cond(rng, b, cfg.cond_dim);
    Tensor video_ctx = Tensor::randn({b, frames, cfg.dim}, rng);

    Graph g1, g2;
    auto [sp1, fx1] = model.audio_branch_forward(g1, audio, 0.4, cond, video_ctx);
    auto [sp2, fx2] = model.audio_branch_forward(g2, audio, 0.4, cond, video_ctx);
    CHECK(sp1.shape() == audio.speech.shape());
    CHECK(fx1.shape() == audio.sfx.shape());
    CHECK(max_abs_diff(sp1, sp2) == 0.0);
    CHECK(max_abs_diff(fx1, fx2) == 0.0);

    Tensor video = Tensor::randn({b, frames, cfg.dim}, rng);
    Tensor audio_ctx = Tensor::randn({b, n, cfg.dim}, rng);
    Graph g3, g4;
    Tensor v1 = model.video_branch_forward(g3, video, 0.8, audio_ctx);
    Tensor v2 = model.video_branch_forward(g4, video, 0.8, audio_ctx);
    CHECK(v1.shape() == video.shape());
    CHECK(max_abs_diff(v1, v2) == 0.0);
}

TEST_CASE("zero fusion severs the branches") {
    Rng rng(74);
    ModelConfig cfg = small_config();
    FusionModel model(cfg, rng);
    model.zero_fusion();

    const int b = 1, frames = 4;
    const int n = frames * cfg.tokens_per_frame;
    Tensor video = Tensor::randn({b, frames, cfg.dim}, rng);
    DualStreamLatent audio{Tensor::randn({b, n, cfg.dim}, rng), Tensor::randn({b, n, cfg.dim}, rng)};
    DualStreamLatent audio_mod{Tensor::randn({b, n, cfg.dim}, rng), Tensor::randn({b, n, cfg.dim}, rng)};
    ConditionPair cond = random_cond(rng, b, cfg.cond_dim);

    Graph g1, g2;
    auto out1 = model.forward(g1, video, audio, 0.3, 0.3, cond);
    auto out2 = model.forward(g2, video, audio_mod, 0.3, 0.3, cond);
    CHECK(max_abs_diff(out1.video, out2.video) == 0.0);
    CHECK(max_abs_diff(out1.speech, out2.speech) > 0.0);

    Tensor video_mod = Tensor::randn({b, frames, cfg.dim}, rng);
    Graph g3;
    auto out3 = model.forward(g3, video_mod, audio, 0.3, 0.3, cond);
    CHECK(max_abs_diff(out1.speech, out3.speech) == 0.0);
    CHECK(max_abs_diff(out1.sfx, out3.sfx) == 0.0);
    CHECK(max_abs_diff(out1.video, out3.video) > 0.0);
}

TEST_CASE("timestep embeddings stay inside their own branch") {
    Rng rng(75);
    ModelConfig cfg = small_config();
    FusionModel model(cfg, rng);
    model.zero_fusion();

    const int b = 1, frames = 4;
    const int n = frames * cfg.tokens_per_frame;
    Tensor video = Tensor::randn({b, frames, cfg.dim}, rng);
    DualStreamLatent audio{Tensor::randn({b, n, cfg.dim}, rng), Tensor::randn({b, n, cfg.dim}, rng)};
    ConditionPair cond = random_cond(rng, b, cfg.cond_dim);

    Graph g1, g2, g3;
    auto base = model.forward(g1, video, audio, 0.2, 0.7, cond);
    auto video_t_moved = model.forward(g2, video, audio, 0.9, 0.7, cond);
    auto audio_t_moved = model.forward(g3, video, audio, 0.2, 0.1, cond);

    CHECK(max_abs_diff(base.speech, video_t_moved.speech) == 0.0);
    CHECK(max_abs_diff(base.sfx, video_t_moved.sfx) == 0.0);
    CHECK(max_abs_diff(base.video, video_t_moved.video) > 0.0);

    CHECK(max_abs_diff(base.video, audio_t_moved.video) == 0.0);
    CHECK(max_abs_diff(base.speech, audio_t_moved.speech) > 0.0);
}

TEST_CASE("end-to-end forward at the toy defaults is finite") {
    Rng rng(76);
    ModelConfig cfg;  // defaults: 4/3 layers, dim 32, heads 4, r 2
    FusionModel model(cfg, rng);
    const int b = 2, frames = 8;
    const int n = frames * cfg.tokens_per_frame;
    Tensor video = Tensor::randn({b, frames, cfg.dim}, rng);
    DualStreamLatent audio{Tensor::randn({b, n, cfg.dim}, rng), Tensor::randn({b, n, cfg.dim}, rng)};
    ConditionPair cond = random_cond(rng, b, cfg.cond_dim);

    Graph g;
    auto out = model.forward(g, video, audio, 0.5, 0.25, cond);
    CHECK(out.video.all_finite());
    CHECK(out.speech.all_finite());
    CHECK(out.sfx.all_finite());
    CHECK(out.video.shape() == video.shape());
}

TEST_CASE("ablation toggles change only their own wiring") {
    const ModelConfig base_cfg = small_config();
    const int d = base_cfg.dim;
    const int dc = base_cfg.cond_dim;
    const int hidden = base_cfg.ffn_mult * d;
    const int la = base_cfg.layers_audio;

    auto count_for = [&](bool no_hghs, bool no_biaca, bool no_scg) {
        ModelConfig cfg = base_cfg;
        cfg.disable_hghs = no_hghs;
        cfg.disable_biaca = no_biaca;
        cfg.disable_scg = no_scg;
        Rng rng(1);
        FusionModel m(cfg, rng);
        return total_params(m);
    };

    const std::int64_t base = count_for(false, false, false);
    const std::int64_t no_scg = count_for(false, false, true);
    const std::int64_t no_biaca = count_for(false, true, false);
    const std::int64_t no_hghs = count_for(true, false, false);

    auto linear = [](int in, int out) { return static_cast<std::int64_t>(in) * out + out; };
    const std::int64_t attn = 4 * linear(d, d);
    const std::int64_t ln = 2 * d;
    const std::int64_t scg = linear(2 * dc, dc) + linear(dc, 2);
    const std::int64_t ffn = linear(d, hidden) + linear(hidden, d);

    // disable_SCG drops exactly the per-layer gate perceptrons.
    CHECK(base - no_scg == la * scg);
    // disable_BiACA drops the whole interact stage: two LNs, two cross
    // attentions and the gates that modulated them.
    CHECK(base - no_biaca == la * (2 * ln + 2 * attn + scg));
    // disable_HGHS swaps dual-stream layers for plain transformer layers and
    // removes the second stream's embedding/head plumbing.
    const std::int64_t dual_layer = (2 * ln + 2 * attn + scg) + (2 * d + 2 * ln + attn + ffn);
    const std::int64_t plain_layer = 2 * ln + attn + ffn;
    const std::int64_t sfx_plumbing = linear(d, d) + linear(2 * dc, d) + ln + linear(d, d);
    CHECK(base - no_hghs == la * (dual_layer - plain_layer) + sfx_plumbing);

    // The video tower is untouched by every audio-side toggle.
    auto video_count = [&](bool no_hghs_f, bool no_biaca_f, bool no_scg_f) {
        ModelConfig cfg = base_cfg;
        cfg.disable_hghs = no_hghs_f;
        cfg.disable_biaca = no_biaca_f;
        cfg.disable_scg = no_scg_f;
        Rng rng(1);
        FusionModel m(cfg, rng);
        std::int64_t n = 0;
        for (Parameter* p : m.video_parameters()) n += p->value.size();
        return n;
    };
    const std::int64_t video_base = video_count(false, false, false);
    CHECK(video_count(false, false, true) == video_base);
    CHECK(video_count(false, true, false) == video_base);
    CHECK(video_count(true, false, false) == video_base);
}

TEST_CASE("mixed-stream ablation runs end to end") {
    Rng rng(77);
    ModelConfig cfg = small_config();
    cfg.disable_hghs = true;
    FusionModel model(cfg, rng);

    const int b = 2, frames = 4;
    const int n = frames * cfg.tokens_per_frame;
    DualStreamLatent mixed;
    mixed.speech = Tensor::randn({b, n, cfg.dim}, rng);
    Tensor video = Tensor::randn({b, frames, cfg.dim}, rng);
    ConditionPair cond = random_cond(rng, b, cfg.cond_dim);

    Graph g;
    auto out = model.forward(g, video, mixed, 0.4, 0.6, cond);
    CHECK(out.video.all_finite());
    CHECK(out.speech.all_finite());
    CHECK_FALSE(out.sfx.defined());
}

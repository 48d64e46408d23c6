#include "avflow/nn.hpp"

#include <cmath>

namespace avflow {

Linear::Linear(const std::string& name, int in, int out, Rng& rng, bool zero_init) {
    Tensor w = zero_init ? Tensor::zeros({in, out})
                         : Tensor::randn({in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in)));
    weight = Parameter(name + ".weight", std::move(w));
    bias = Parameter(name + ".bias", Tensor::zeros({out}));
}

Tensor Linear::apply(Graph& g, const Tensor& x) {
    const int in = in_features();
    if (x.shape().back() != in)
        throw ShapeError("linear " + weight.name + ": input " + shape_str(x.shape()) + " does not end in " + std::to_string(in));
    Shape out_shape = x.shape();
    out_shape.back() = out_features();
    Tensor flat = reshape(x, {static_cast<int>(x.size() / in), in});
    Tensor y = add_bias(matmul(flat, weight.bind(g)), bias.bind(g));
    return reshape(y, std::move(out_shape));
}

void Linear::collect(ParamRefs& out) {
    out.push_back(&weight);
    out.push_back(&bias);
}

LayerNorm::LayerNorm(const std::string& name, int d) {
    gain = Parameter(name + ".gain", Tensor::full({d}, 1.0));
    shift = Parameter(name + ".shift", Tensor::zeros({d}));
}

Tensor LayerNorm::apply(Graph& g, const Tensor& x) {
    return add_bias(mul_bias(layer_norm(x, eps), gain.bind(g)), shift.bind(g));
}

void LayerNorm::collect(ParamRefs& out) {
    out.push_back(&gain);
    out.push_back(&shift);
}

Tensor rope_apply(const Tensor& x, const std::vector<int>& positions) {
    if (x.rank() < 2) throw ShapeError("rope: input must have rank >= 2, got " + shape_str(x.shape()));
    const int d = x.shape().back();
    if (d % 2 != 0) throw ShapeError("rope: feature dim must be even, got " + std::to_string(d));
    const int tokens = x.shape()[static_cast<std::size_t>(x.rank() - 2)];
    if (static_cast<int>(positions.size()) != tokens)
        throw ShapeError("rope: " + std::to_string(positions.size()) + " positions for " + std::to_string(tokens) + " tokens");

    const int half = d / 2;
    // Angle depends only on (token, pair); constant across leading dims.
    Shape half_shape = x.shape();
    half_shape.back() = half;
    const std::int64_t n = shape_size(half_shape);
    std::vector<double> cos_v(static_cast<std::size_t>(n));
    std::vector<double> sin_v(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        const int pair = static_cast<int>(i % half);
        const int tok = static_cast<int>((i / half) % tokens);
        const double freq = std::pow(10000.0, -2.0 * static_cast<double>(pair) / static_cast<double>(d));
        const double angle = static_cast<double>(positions[static_cast<std::size_t>(tok)]) * freq;
        cos_v[static_cast<std::size_t>(i)] = std::cos(angle);
        sin_v[static_cast<std::size_t>(i)] = std::sin(angle);
    }
    Tensor coss(half_shape, std::move(cos_v));
    Tensor sins(half_shape, std::move(sin_v));

    auto halves = split(x, x.rank() - 1, {half, half});
    Tensor rot_a = sub(mul(halves[0], coss), mul(halves[1], sins));
    Tensor rot_b = add(mul(halves[0], sins), mul(halves[1], coss));
    return concat({rot_a, rot_b}, x.rank() - 1);
}

Attention::Attention(const std::string& name, int dim, int n_heads, Rng& rng) : heads(n_heads) {
    if (n_heads < 1 || dim % n_heads != 0)
        throw ConfigError("attention " + name + ": heads " + std::to_string(n_heads) + " must divide dim " + std::to_string(dim));
    q = Linear(name + ".q", dim, dim, rng);
    k = Linear(name + ".k", dim, dim, rng);
    v = Linear(name + ".v", dim, dim, rng);
    o = Linear(name + ".o", dim, dim, rng, /*zero_init=*/true);
}

Tensor Attention::apply(Graph& g, const Tensor& q_in, const Tensor& kv_in,
                        const std::vector<int>* q_positions, const std::vector<int>* kv_positions) {
    const int dim = q.in_features();
    const int dh = dim / heads;
    const int rank = q_in.rank();
    if (rank < 2) throw ShapeError("attention: query input must have rank >= 2");

    auto to_heads = [&](Tensor t, int tokens) {
        Shape s = t.shape();
        s.pop_back();
        s.back() = tokens;
        s.push_back(heads);
        s.push_back(dh);
        Tensor r = reshape(t, std::move(s));
        return transpose(r, r.rank() - 3, r.rank() - 2);  // [..., heads, tokens, dh]
    };

    const int nq = q_in.shape()[static_cast<std::size_t>(rank - 2)];
    const int nk = kv_in.shape()[static_cast<std::size_t>(kv_in.rank() - 2)];

    Tensor qh = to_heads(q.apply(g, q_in), nq);
    Tensor kh = to_heads(k.apply(g, kv_in), nk);
    Tensor vh = to_heads(v.apply(g, kv_in), nk);

    if (q_positions != nullptr) qh = rope_apply(qh, *q_positions);
    if (kv_positions != nullptr) kh = rope_apply(kh, *kv_positions);

    Tensor scores = scale(matmul(qh, transpose(kh, kh.rank() - 1, kh.rank() - 2)), 1.0 / std::sqrt(static_cast<double>(dh)));
    Tensor attn = softmax_last(scores);
    Tensor ctx = matmul(attn, vh);                       // [..., heads, nq, dh]
    ctx = transpose(ctx, ctx.rank() - 3, ctx.rank() - 2);  // [..., nq, heads, dh]
    Shape merged = q_in.shape();
    Tensor merged_ctx = reshape(ctx, std::move(merged));
    return o.apply(g, merged_ctx);
}

void Attention::collect(ParamRefs& out) {
    q.collect(out);
    k.collect(out);
    v.collect(out);
    o.collect(out);
}

FeedForward::FeedForward(const std::string& name, int dim, int hidden, Rng& rng) {
    in = Linear(name + ".in", dim, hidden, rng);
    out = Linear(name + ".out", hidden, dim, rng, /*zero_init=*/true);
}

Tensor FeedForward::apply(Graph& g, const Tensor& x) { return out.apply(g, silu(in.apply(g, x))); }

void FeedForward::collect(ParamRefs& out_refs) {
    in.collect(out_refs);
    out.collect(out_refs);
}

Tensor timestep_features(double t, int d) {
    if (d < 2 || d % 2 != 0) throw ShapeError("timestep_features: dim must be even and >= 2");
    std::vector<double> v(static_cast<std::size_t>(d));
    const int half = d / 2;
    for (int j = 0; j < half; ++j) {
        const double freq = std::pow(10000.0, -static_cast<double>(j) / static_cast<double>(half));
        const double angle = t * 1000.0 * freq;
        v[static_cast<std::size_t>(j)] = std::sin(angle);
        v[static_cast<std::size_t>(half + j)] = std::cos(angle);
    }
    return Tensor({d}, std::move(v));
}

Tensor broadcast_sample_scalar(const Tensor& per_sample, int rows, int cols) {
    if (per_sample.rank() != 2 || per_sample.dim(1) != 1)
        throw ShapeError("broadcast_sample_scalar: expected [B,1], got " + shape_str(per_sample.shape()));
    const int b = per_sample.dim(0);
    Tensor col = reshape(per_sample, {b, 1, 1});
    Tensor ones = Tensor::full({1, rows * cols}, 1.0);
    return reshape(matmul(col, ones), {b, rows, cols});
}

Tensor tile_rows(const Tensor& per_sample, int n) {
    if (per_sample.rank() != 2) throw ShapeError("tile_rows: expected [B,D], got " + shape_str(per_sample.shape()));
    const int b = per_sample.dim(0);
    const int d = per_sample.dim(1);
    Tensor row = reshape(per_sample, {b, 1, d});
    Tensor ones = Tensor::full({n, 1}, 1.0);
    return matmul(ones, row);  // [B, n, D]
}

void check_finite(const Tensor& t, const std::string& where) {
    if (!t.all_finite()) throw EvalError("non-finite activations in " + where);
}

}  // namespace avflow

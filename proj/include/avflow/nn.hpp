#pragma once

#include <string>
#include <vector>

#include "avflow/tensor.hpp"

namespace avflow {

/// Named trainable array. Modules own Parameters; forward passes bind them as
/// graph leaves (storage is shared, never copied). Values may only be mutated
/// between recordings (single-writer training loop).
struct Parameter {
    std::string name;
    Tensor value;
    bool trainable = true;

    Parameter() = default;
    Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {}

    Tensor bind(Graph& g) {
        if (bound_uid_ != g.uid()) {
            bound_ = g.leaf(value, trainable);
            bound_uid_ = g.uid();
        }
        return bound_;
    }

    int bound_node(Graph& g) const { return bound_uid_ == g.uid() ? bound_.node_id() : -1; }

  private:
    std::uint64_t bound_uid_ = 0;
    Tensor bound_;
};

using ParamRefs = std::vector<Parameter*>;

struct Linear {
    Parameter weight;  // [in, out]
    Parameter bias;    // [out]

    Linear() = default;
    Linear(const std::string& name, int in, int out, Rng& rng, bool zero_init = false);

    Tensor apply(Graph& g, const Tensor& x);
    void collect(ParamRefs& out);
    int in_features() const { return weight.value.dim(0); }
    int out_features() const { return weight.value.dim(1); }
};

struct LayerNorm {
    Parameter gain;   // [d]
    Parameter shift;  // [d]
    double eps = 1e-5;

    LayerNorm() = default;
    LayerNorm(const std::string& name, int d);

    Tensor apply(Graph& g, const Tensor& x);
    void collect(ParamRefs& out);
};

/// Rotate trailing-axis feature pairs (j, j + D/2) by position-dependent
/// angles. positions must index the second-to-last axis; calling both streams
/// with the same positions is what ties their temporal frames together.
Tensor rope_apply(const Tensor& x, const std::vector<int>& positions);

/// Pre-norm multi-head attention: queries from q_in, keys/values from kv_in,
/// optional rotary positions on each side. Output projection is the caller's
/// residual delta (zero-initialized by default so blocks start as identity).
struct Attention {
    Linear q, k, v, o;
    int heads = 1;

    Attention() = default;
    Attention(const std::string& name, int dim, int heads, Rng& rng);

    Tensor apply(Graph& g, const Tensor& q_in, const Tensor& kv_in,
                 const std::vector<int>* q_positions = nullptr,
                 const std::vector<int>* kv_positions = nullptr);
    void collect(ParamRefs& out);
};

struct FeedForward {
    Linear in;
    Linear out;

    FeedForward() = default;
    FeedForward(const std::string& name, int dim, int hidden, Rng& rng);

    Tensor apply(Graph& g, const Tensor& x);
    void collect(ParamRefs& out);
};

/// Sinusoidal features of a scalar timestep, dimension d (even).
Tensor timestep_features(double t, int d);

/// Broadcast a per-sample column [B,1] across a [B, rows, cols] target.
Tensor broadcast_sample_scalar(const Tensor& per_sample, int rows, int cols);

/// Broadcast per-sample feature rows [B,D] across rows: result [B, n, D].
Tensor tile_rows(const Tensor& per_sample, int n);

void check_finite(const Tensor& t, const std::string& where);

}  // namespace avflow

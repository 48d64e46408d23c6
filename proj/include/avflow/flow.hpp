#pragma once

#include <functional>

#include "avflow/tensor.hpp"

namespace avflow {

/// One training point on the straight interpolation path between a prior draw
/// x0 and a data point x1. The regression target u is x1 - x0 regardless of t.
struct FlowSample {
    Tensor x0;
    Tensor x1;
    double t = 0.0;
    Tensor x_t;
    Tensor u_target;
};

FlowSample interpolate(const Tensor& x0, const Tensor& x1, double t);

/// Mean squared error between a predicted velocity and the sample's target.
/// Differentiable in v_pred when it is graph-attached.
Tensor cfm_loss(const Tensor& v_pred, const FlowSample& sample);

/// Explicit Euler integration of dx/dt = velocity(x, t) from t=0 to t=1 on a
/// uniform grid. Throws EvalError naming the step if the field goes non-finite.
Tensor euler_sample(const std::function<Tensor(const Tensor&, double)>& velocity, const Tensor& x_start, int steps);

/// Guided velocity v_uncond + scale * (v_cond - v_uncond).
Tensor cfg_velocity(const Tensor& v_cond, const Tensor& v_uncond, double scale);

}  // namespace avflow

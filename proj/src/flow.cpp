#include "avflow/flow.hpp"

#include <cmath>
#include <string>

namespace avflow {

FlowSample interpolate(const Tensor& x0, const Tensor& x1, double t) {
    if (x0.shape() != x1.shape())
        throw ShapeError("interpolate: endpoint shapes disagree, " + shape_str(x0.shape()) + " vs " + shape_str(x1.shape()));
    if (!(t >= 0.0 && t <= 1.0)) throw DomainError("interpolate: t=" + std::to_string(t) + " outside [0,1]");

    FlowSample s;
    s.x0 = x0;
    s.x1 = x1;
    s.t = t;
    std::vector<double> xt(static_cast<std::size_t>(x0.size()));
    std::vector<double> u(static_cast<std::size_t>(x0.size()));
    const std::vector<double>& a = x0.values();
    const std::vector<double>& b = x1.values();
    for (std::size_t i = 0; i < xt.size(); ++i) {
        xt[i] = (1.0 - t) * a[i] + t * b[i];
        u[i] = b[i] - a[i];
    }
    s.x_t = Tensor(x0.shape(), std::move(xt));
    s.u_target = Tensor(x0.shape(), std::move(u));
    return s;
}

Tensor cfm_loss(const Tensor& v_pred, const FlowSample& sample) {
    if (v_pred.shape() != sample.u_target.shape())
        throw ShapeError("cfm_loss: prediction " + shape_str(v_pred.shape()) + " vs target " + shape_str(sample.u_target.shape()));
    return mean_sq(sub(v_pred, sample.u_target));
}

Tensor euler_sample(const std::function<Tensor(const Tensor&, double)>& velocity, const Tensor& x_start, int steps) {
    if (steps < 1) throw DomainError("euler_sample: steps must be >= 1");
    const double dt = 1.0 / static_cast<double>(steps);
    Tensor x = x_start;
    for (int k = 0; k < steps; ++k) {
        const double t = static_cast<double>(k) * dt;
        Tensor v = velocity(x, t);
        if (v.shape() != x.shape())
            throw ShapeError("euler_sample: velocity returned " + shape_str(v.shape()) + " for state " + shape_str(x.shape()));
        if (!v.all_finite())
            throw EvalError("euler_sample: non-finite velocity at step " + std::to_string(k) + " (t=" + std::to_string(t) + ")");
        std::vector<double> next(x.values());
        const std::vector<double>& vv = v.values();
        for (std::size_t i = 0; i < next.size(); ++i) next[i] += dt * vv[i];
        x = Tensor(x.shape(), std::move(next));
    }
    return x;
}

Tensor cfg_velocity(const Tensor& v_cond, const Tensor& v_uncond, double scale) {
    if (v_cond.shape() != v_uncond.shape())
        throw ShapeError("cfg_velocity: " + shape_str(v_cond.shape()) + " vs " + shape_str(v_uncond.shape()));
    std::vector<double> out(static_cast<std::size_t>(v_cond.size()));
    const std::vector<double>& c = v_cond.values();
    const std::vector<double>& u = v_uncond.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = u[i] + scale * (c[i] - u[i]);
    return Tensor(v_cond.shape(), std::move(out));
}

}  // namespace avflow

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "avflow/nn.hpp"

namespace avflow {

struct GradCheckResult {
    std::string name;
    double max_rel_error = 0.0;
};

/// Sweep every coordinate of every listed parameter: analytic gradients from
/// one backward pass vs central differences of the re-evaluated loss.
double check_block(const std::function<Tensor(Graph&)>& loss, const ParamRefs& params, double step = 1e-5);

/// Finite-difference verification of every block at small dimensions:
/// Bi-ACA, the gated SCG path, the joint merge/split block, frame-bucketed
/// fusion, and the three model forwards. All errors should sit below 1e-4.
std::vector<GradCheckResult> run_grad_checks(double step = 1e-5);

}  // namespace avflow

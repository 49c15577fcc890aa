#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "fomox/tensor.hpp"

namespace fomox {

// Adam with bias correction. One state object per parameter group; `lr` is
// mutable so schedules can adjust it between steps.
struct AdamState {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::int64_t step_count = 0;
    std::vector<std::vector<double>> m; // first-moment estimate per parameter
    std::vector<std::vector<double>> v; // second-moment estimate per parameter

    AdamState(std::span<const Tensor> params, double lr);
};

// Applies one update in place using the gradients accumulated on `params`,
// then zeroes those gradients. Parameter order must match the AdamState
// constructor call.
void adam_step(std::span<Tensor> params, AdamState& state);

} // namespace fomox

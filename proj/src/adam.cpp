#include "fomox/adam.hpp"

#include <cmath>
#include <string>

#include "fomox/errors.hpp"

namespace fomox {

AdamState::AdamState(std::span<const Tensor> params, double lr) : lr(lr) {
    m.reserve(params.size());
    v.reserve(params.size());
    for (const Tensor& p : params) {
        m.emplace_back(p.size(), 0.0);
        v.emplace_back(p.size(), 0.0);
    }
}

void adam_step(std::span<Tensor> params, AdamState& state) {
    if (params.size() != state.m.size())
        throw ContractError("adam_step: " + std::to_string(params.size()) +
                            " parameters for state holding " + std::to_string(state.m.size()));
    state.step_count += 1;
    double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step_count));
    double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step_count));
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& p = params[pi];
        if (!p.has_grad())
            throw ContractError("adam_step: parameter " + std::to_string(pi) +
                                " has no gradient; run backward first");
        if (p.size() != state.m[pi].size())
            throw ContractError("adam_step: parameter " + std::to_string(pi) +
                                " changed size since state creation");
        std::span<const double> g = p.grad();
        std::span<double> w = p.data_mut();
        auto& mi = state.m[pi];
        auto& vi = state.v[pi];
        for (std::size_t k = 0; k < g.size(); ++k) {
            mi[k] = state.beta1 * mi[k] + (1.0 - state.beta1) * g[k];
            vi[k] = state.beta2 * vi[k] + (1.0 - state.beta2) * g[k] * g[k];
            double mhat = mi[k] / bc1;
            double vhat = vi[k] / bc2;
            w[k] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
        }
        p.zero_grad();
    }
}

} // namespace fomox

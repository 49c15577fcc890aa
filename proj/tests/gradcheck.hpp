#pragma once

// Compares reverse-mode gradients against central finite differences.
// Shared between the unit tests and the acceptance gate.

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fomox/random.hpp"
#include "fomox/tensor.hpp"

namespace gradcheck {

struct Result {
    bool ok = true;
    double max_abs_err = 0.0;
    std::string what; // first failing location, empty when ok
};

// Builds a tensor expression from the given operands. Must be deterministic:
// it is re-invoked many times with perturbed operand data.
using Builder = std::function<fomox::Tensor(const std::vector<fomox::Tensor>&)>;

namespace detail {

inline std::vector<std::vector<double>> draw_operands(
    const std::vector<std::vector<std::size_t>>& shapes, std::uint64_t seed) {
    std::vector<std::vector<double>> out;
    for (std::size_t i = 0; i < shapes.size(); ++i) {
        fomox::RandomSource rng(seed, 1000 + i);
        std::size_t n = 1;
        for (std::size_t e : shapes[i]) n *= e;
        std::vector<double> v(n);
        for (double& x : v) x = rng.normal();
        out.push_back(std::move(v));
    }
    return out;
}

// Contracts the builder output to a scalar with fixed non-uniform weights so
// index mix-ups in a gradient cannot cancel out.
inline double loss_value(const Builder& build,
                         const std::vector<std::vector<std::size_t>>& shapes,
                         const std::vector<std::vector<double>>& values, std::uint64_t seed,
                         bool track, std::vector<fomox::Tensor>* operands_out = nullptr) {
    std::vector<fomox::Tensor> operands;
    for (std::size_t i = 0; i < shapes.size(); ++i)
        operands.push_back(fomox::Tensor::from_data(shapes[i], values[i], track));
    fomox::Tensor y = build(operands);
    fomox::Tensor loss;
    if (y.size() == 1) {
        loss = y;
    } else {
        fomox::RandomSource wrng(seed ^ 0x5157F00DULL, 424242);
        std::vector<double> w(y.size());
        for (double& x : w) x = (wrng.uniform01() < 0.5 ? -1.0 : 1.0) * wrng.uniform(0.25, 1.75);
        fomox::Tensor wt = fomox::Tensor::from_data(y.shape(), std::move(w), false);
        loss = fomox::sum_all(fomox::mul(y, wt));
    }
    if (operands_out) *operands_out = std::move(operands);
    if (track) fomox::backward(loss);
    return loss.value();
}

} // namespace detail

inline Result check(const std::vector<std::vector<std::size_t>>& shapes, const Builder& build,
                    std::uint64_t seed, double h = 1e-5, double atol = 1e-8,
                    double rtol = 1e-6) {
    Result res;
    auto values = detail::draw_operands(shapes, seed);

    std::vector<fomox::Tensor> operands;
    detail::loss_value(build, shapes, values, seed, /*track=*/true, &operands);

    for (std::size_t oi = 0; oi < shapes.size(); ++oi) {
        auto analytic = operands[oi].grad();
        for (std::size_t k = 0; k < values[oi].size(); ++k) {
            double keep = values[oi][k];
            values[oi][k] = keep + h;
            double fp = detail::loss_value(build, shapes, values, seed, false);
            values[oi][k] = keep - h;
            double fm = detail::loss_value(build, shapes, values, seed, false);
            values[oi][k] = keep;
            double fd = (fp - fm) / (2.0 * h);
            double err = std::abs(analytic[k] - fd);
            double tol = atol + rtol * std::max(std::abs(analytic[k]), std::abs(fd));
            res.max_abs_err = std::max(res.max_abs_err, err);
            if (err > tol && res.ok) {
                res.ok = false;
                res.what = "operand " + std::to_string(oi) + " entry " + std::to_string(k) +
                           ": analytic " + std::to_string(analytic[k]) + " vs fd " +
                           std::to_string(fd);
            }
        }
    }
    return res;
}

} // namespace gradcheck

#pragma once

#include <cstddef>
#include <vector>

namespace fomox {

// Plain row-major f64 matrix for data plumbing (tasks, CSV tables). Model
// code converts to Tensor at the boundary.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data; // rows * cols

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

    double& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
    const double* row(std::size_t i) const { return &data[i * cols]; }
    double* row(std::size_t i) { return &data[i * cols]; }
};

} // namespace fomox

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "fomox/random.hpp"

namespace fomox {

namespace detail {

struct TensorNode {
    std::vector<std::size_t> shape;
    std::vector<double> data;
    std::vector<double> grad; // empty until populated
    bool requires_grad = false;
    bool consumed = false; // intermediate whose backprop already ran
    std::uint64_t id = 0;  // creation order; parents always have smaller ids
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backprop;

    std::size_t size() const { return data.size(); }
    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
    }
};

} // namespace detail

// Dense f64 tensor with optional reverse-mode gradient tracking.
//
// Values are immutable once produced by an operation; data_mut() exists for
// initialization and optimizer updates only. The gradient graph is built
// per forward pass and consumed by backward().
class Tensor {
public:
    Tensor() = default; // null handle

    static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false);
    static Tensor full(std::vector<std::size_t> shape, double value, bool requires_grad = false);
    static Tensor from_data(std::vector<std::size_t> shape, std::vector<double> data,
                            bool requires_grad = false);
    static Tensor scalar(double value);
    // Entries i.i.d. normal(0, stddev^2).
    static Tensor randn(std::vector<std::size_t> shape, double stddev, RandomSource& rng,
                        bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const std::vector<std::size_t>& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t size() const;
    std::size_t rows() const; // rank-2 only
    std::size_t cols() const;

    std::span<const double> data() const;
    std::span<double> data_mut();
    double value() const; // scalar only
    double at(std::size_t i, std::size_t j) const;

    bool requires_grad() const;
    void set_requires_grad(bool v);
    bool has_grad() const;
    std::span<const double> grad() const; // throws ContractError if not populated
    void zero_grad();

    // Value copy with no gradient tracking.
    Tensor detach() const;

    // Internal node handle; used by the op implementations.
    const std::shared_ptr<detail::TensorNode>& impl() const { return node_; }
    static Tensor wrap(std::shared_ptr<detail::TensorNode> node) { return Tensor(std::move(node)); }

private:
    explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}
    std::shared_ptr<detail::TensorNode> node_;
};

// --- operations -----------------------------------------------------------
// Gradients flow to every operand with requires_grad; outputs of untracked
// inputs build no graph.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
// [m x n] + [n], bias broadcast over rows.
Tensor add_rowvec(const Tensor& a, const Tensor& bias);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
// Exact Gaussian-CDF GELU, elementwise.
Tensor gelu(const Tensor& a);
// Max-subtracted softmax along `axis` (negative counts from the back).
Tensor softmax(const Tensor& a, int axis = -1);
// Row-wise layer normalization with learned scale/shift, x of rank 2.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count);
Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count);
Tensor concat_cols(const std::vector<Tensor>& parts);
// Inverted dropout: kept entries scaled by 1/(1-p). Mask drawn from rng.
Tensor dropout(const Tensor& a, double p, RandomSource& rng);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
// Mean over rows of -log softmax(logits)[target]. logits [n x C].
Tensor cross_entropy_mean(const Tensor& logits, std::span<const int> targets);
// Mean absolute error against constant targets. pred [n] or [n x 1].
Tensor mae_mean(const Tensor& pred, std::span<const double> targets);

// Reverse-mode sweep from a scalar loss. Accumulates additively into the
// grad of every reachable tracked tensor, then consumes the graph.
void backward(const Tensor& loss);

} // namespace fomox

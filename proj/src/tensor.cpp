#include "fomox/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <string>
#include <unordered_set>

#include "fomox/errors.hpp"
#include "fomox/kernels.hpp"
#include "fomox/special.hpp"

namespace fomox {

using detail::TensorNode;

namespace {

std::atomic<std::uint64_t> g_next_id{1};

std::size_t shape_size(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

std::string shape_str(const std::vector<std::size_t>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

std::shared_ptr<TensorNode> new_node(std::vector<std::size_t> shape, std::vector<double> data,
                                     bool requires_grad) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    n->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
    return n;
}

const std::shared_ptr<TensorNode>& node_of(const Tensor& t, const char* op) {
    if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor operand");
    return t.impl();
}

void require_rank2(const TensorNode& n, const char* op) {
    if (n.shape.size() != 2)
        throw DimensionError(std::string(op) + ": expected rank-2 tensor, got " +
                             shape_str(n.shape));
}

// Builds the output node for an op. The backprop closure must read the
// upstream gradient from the node it is handed and accumulate (+=) into the
// ensured grad buffers of the captured parents.
Tensor make_op(std::vector<std::size_t> shape, std::vector<double> data,
               std::vector<std::shared_ptr<TensorNode>> parents,
               std::function<void(TensorNode&)> backprop) {
    bool track = false;
    for (const auto& p : parents)
        if (p->requires_grad) track = true;
    auto out = new_node(std::move(shape), std::move(data), track);
    if (track) {
        out->parents = std::move(parents);
        out->backprop = std::move(backprop);
    }
    return Tensor::wrap(std::move(out));
}

} // namespace

// --- Tensor basics ---------------------------------------------------------

Tensor Tensor::zeros(std::vector<std::size_t> shape, bool requires_grad) {
    std::size_t n = shape_size(shape);
    auto node = new_node(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    if (requires_grad) node->ensure_grad();
    return Tensor(std::move(node));
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value, bool requires_grad) {
    std::size_t n = shape_size(shape);
    auto node = new_node(std::move(shape), std::vector<double>(n, value), requires_grad);
    if (requires_grad) node->ensure_grad();
    return Tensor(std::move(node));
}

Tensor Tensor::from_data(std::vector<std::size_t> shape, std::vector<double> data,
                         bool requires_grad) {
    if (shape_size(shape) != data.size())
        throw DimensionError("from_data: shape " + shape_str(shape) + " wants " +
                             std::to_string(shape_size(shape)) + " values, got " +
                             std::to_string(data.size()));
    auto node = new_node(std::move(shape), std::move(data), requires_grad);
    if (requires_grad) node->ensure_grad();
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value) {
    return from_data({1}, {value}, false);
}

Tensor Tensor::randn(std::vector<std::size_t> shape, double stddev, RandomSource& rng,
                     bool requires_grad) {
    std::size_t n = shape_size(shape);
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i) data[i] = stddev * rng.normal();
    return from_data(std::move(shape), std::move(data), requires_grad);
}

const std::vector<std::size_t>& Tensor::shape() const {
    return node_of(*this, "shape")->shape;
}

std::size_t Tensor::size() const {
    return node_of(*this, "size")->data.size();
}

std::size_t Tensor::rows() const {
    const auto& n = *node_of(*this, "rows");
    require_rank2(n, "rows");
    return n.shape[0];
}

std::size_t Tensor::cols() const {
    const auto& n = *node_of(*this, "cols");
    require_rank2(n, "cols");
    return n.shape[1];
}

std::span<const double> Tensor::data() const {
    const auto& n = node_of(*this, "data");
    return {n->data.data(), n->data.size()};
}

std::span<double> Tensor::data_mut() {
    auto& n = node_of(*this, "data_mut");
    return {n->data.data(), n->data.size()};
}

double Tensor::value() const {
    const auto& n = node_of(*this, "value");
    if (n->data.size() != 1)
        throw DimensionError("value: tensor " + shape_str(n->shape) + " is not a scalar");
    return n->data[0];
}

double Tensor::at(std::size_t i, std::size_t j) const {
    const auto& n = *node_of(*this, "at");
    require_rank2(n, "at");
    if (i >= n.shape[0] || j >= n.shape[1])
        throw DimensionError("at: index (" + std::to_string(i) + "," + std::to_string(j) +
                             ") out of range for " + shape_str(n.shape));
    return n.data[i * n.shape[1] + j];
}

bool Tensor::requires_grad() const {
    return node_of(*this, "requires_grad")->requires_grad;
}

void Tensor::set_requires_grad(bool v) {
    auto& n = node_of(*this, "set_requires_grad");
    n->requires_grad = v;
    if (v) n->ensure_grad();
}

bool Tensor::has_grad() const {
    return !node_of(*this, "has_grad")->grad.empty();
}

std::span<const double> Tensor::grad() const {
    const auto& n = node_of(*this, "grad");
    if (n->grad.empty())
        throw ContractError("grad: gradient buffer not populated; run backward first");
    return {n->grad.data(), n->grad.size()};
}

void Tensor::zero_grad() {
    auto& n = node_of(*this, "zero_grad");
    n->grad.assign(n->data.size(), 0.0);
}

Tensor Tensor::detach() const {
    const auto& n = node_of(*this, "detach");
    return from_data(n->shape, n->data, false);
}

// --- operations ------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    auto pa = node_of(a, "matmul");
    auto pb = node_of(b, "matmul");
    require_rank2(*pa, "matmul");
    require_rank2(*pb, "matmul");
    std::size_t m = pa->shape[0], k = pa->shape[1], k2 = pb->shape[0], n = pb->shape[1];
    if (k != k2)
        throw DimensionError("matmul: inner extents differ, " + shape_str(pa->shape) + " vs " +
                             shape_str(pb->shape));
    std::vector<double> out(m * n);
    kernels::matmul(pa->data.data(), pb->data.data(), out.data(), m, k, n);
    return make_op(
        {m, n}, std::move(out), {pa, pb}, [pa, pb, m, k, n](TensorNode& self) {
            if (pa->requires_grad) {
                // dA = G B^T
                std::vector<double> tmp(m * k);
                kernels::matmul_nt(self.grad.data(), pb->data.data(), tmp.data(), m, n, k);
                pa->ensure_grad();
                for (std::size_t i = 0; i < m * k; ++i) pa->grad[i] += tmp[i];
            }
            if (pb->requires_grad) {
                // dB = A^T G
                std::vector<double> tmp(k * n);
                kernels::matmul_tn(pa->data.data(), self.grad.data(), tmp.data(), m, k, n);
                pb->ensure_grad();
                for (std::size_t i = 0; i < k * n; ++i) pb->grad[i] += tmp[i];
            }
        });
}

Tensor transpose(const Tensor& a) {
    auto pa = node_of(a, "transpose");
    require_rank2(*pa, "transpose");
    std::size_t m = pa->shape[0], n = pa->shape[1];
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = pa->data[i * n + j];
    return make_op({n, m}, std::move(out), {pa}, [pa, m, n](TensorNode& self) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) pa->grad[i * n + j] += self.grad[j * m + i];
    });
}

Tensor add(const Tensor& a, const Tensor& b) {
    auto pa = node_of(a, "add");
    auto pb = node_of(b, "add");
    if (pa->shape != pb->shape)
        throw DimensionError("add: shape mismatch " + shape_str(pa->shape) + " vs " +
                             shape_str(pb->shape));
    std::vector<double> out(pa->data.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa->data[i] + pb->data[i];
    return make_op(pa->shape, std::move(out), {pa, pb}, [pa, pb](TensorNode& self) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] += self.grad[i];
        }
    });
}

Tensor add_rowvec(const Tensor& a, const Tensor& bias) {
    auto pa = node_of(a, "add_rowvec");
    auto pb = node_of(bias, "add_rowvec");
    require_rank2(*pa, "add_rowvec");
    std::size_t m = pa->shape[0], n = pa->shape[1];
    if (pb->data.size() != n)
        throw DimensionError("add_rowvec: bias size " + std::to_string(pb->data.size()) +
                             " does not match column count " + std::to_string(n));
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = pa->data[i * n + j] + pb->data[j];
    return make_op({m, n}, std::move(out), {pa, pb}, [pa, pb, m, n](TensorNode& self) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < m * n; ++i) pa->grad[i] += self.grad[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) pb->grad[j] += self.grad[i * n + j];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    auto pa = node_of(a, "sub");
    auto pb = node_of(b, "sub");
    if (pa->shape != pb->shape)
        throw DimensionError("sub: shape mismatch " + shape_str(pa->shape) + " vs " +
                             shape_str(pb->shape));
    std::vector<double> out(pa->data.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa->data[i] - pb->data[i];
    return make_op(pa->shape, std::move(out), {pa, pb}, [pa, pb](TensorNode& self) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] -= self.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    auto pa = node_of(a, "mul");
    auto pb = node_of(b, "mul");
    if (pa->shape != pb->shape)
        throw DimensionError("mul: shape mismatch " + shape_str(pa->shape) + " vs " +
                             shape_str(pb->shape));
    std::vector<double> out(pa->data.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa->data[i] * pb->data[i];
    return make_op(pa->shape, std::move(out), {pa, pb}, [pa, pb](TensorNode& self) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                pa->grad[i] += self.grad[i] * pb->data[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                pb->grad[i] += self.grad[i] * pa->data[i];
        }
    });
}

Tensor scale(const Tensor& a, double c) {
    auto pa = node_of(a, "scale");
    std::vector<double> out(pa->data.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * pa->data[i];
    return make_op(pa->shape, std::move(out), {pa}, [pa, c](TensorNode& self) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += c * self.grad[i];
    });
}

Tensor gelu(const Tensor& a) {
    auto pa = node_of(a, "gelu");
    std::vector<double> out(pa->data.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = gelu_scalar(pa->data[i]);
    return make_op(pa->shape, std::move(out), {pa}, [pa](TensorNode& self) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            pa->grad[i] += self.grad[i] * gelu_grad_scalar(pa->data[i]);
    });
}

Tensor softmax(const Tensor& a, int axis) {
    auto pa = node_of(a, "softmax");
    int rank = static_cast<int>(pa->shape.size());
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank)
        throw DimensionError("softmax: axis out of range for " + shape_str(pa->shape));
    // View the tensor as `groups` independent lines of `len` entries spaced
    // `stride` apart; softmax runs along each line.
    std::size_t len = pa->shape[static_cast<std::size_t>(axis)];
    std::size_t inner = 1;
    for (int d = axis + 1; d < rank; ++d) inner *= pa->shape[static_cast<std::size_t>(d)];
    std::size_t groups = pa->data.size() / len;
    std::size_t stride = inner;

    auto line_base = [len, inner](std::size_t g) {
        std::size_t outer_idx = g / inner, inner_idx = g % inner;
        return outer_idx * len * inner + inner_idx;
    };
    std::vector<double> out(pa->data.size());
    for (std::size_t g = 0; g < groups; ++g) {
        std::size_t base = line_base(g);
        double mx = pa->data[base];
        for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, pa->data[base + i * stride]);
        double sum = 0.0;
        for (std::size_t i = 0; i < len; ++i) {
            double e = std::exp(pa->data[base + i * stride] - mx);
            out[base + i * stride] = e;
            sum += e;
        }
        for (std::size_t i = 0; i < len; ++i) out[base + i * stride] /= sum;
    }
    return make_op(pa->shape, std::move(out), {pa},
                   [pa, len, stride, groups, line_base](TensorNode& self) {
                       pa->ensure_grad();
                       for (std::size_t g = 0; g < groups; ++g) {
                           std::size_t base = line_base(g);
                           double dot = 0.0;
                           for (std::size_t i = 0; i < len; ++i) {
                               std::size_t idx = base + i * stride;
                               dot += self.grad[idx] * self.data[idx];
                           }
                           for (std::size_t i = 0; i < len; ++i) {
                               std::size_t idx = base + i * stride;
                               pa->grad[idx] += self.data[idx] * (self.grad[idx] - dot);
                           }
                       }
                   });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    auto px = node_of(x, "layer_norm");
    auto pg = node_of(gamma, "layer_norm");
    auto pb = node_of(beta, "layer_norm");
    require_rank2(*px, "layer_norm");
    std::size_t m = px->shape[0], n = px->shape[1];
    if (pg->data.size() != n || pb->data.size() != n)
        throw DimensionError("layer_norm: scale/shift size must match column count " +
                             std::to_string(n));
    if (n == 0) throw DimensionError("layer_norm: empty rows");

    std::vector<double> out(m * n);
    auto xhat = std::make_shared<std::vector<double>>(m * n);
    auto inv_std = std::make_shared<std::vector<double>>(m);
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = &px->data[i * n];
        double mean = 0.0;
        for (std::size_t j = 0; j < n; ++j) mean += row[j];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            double d = row[j] - mean;
            var += d * d;
        }
        var /= static_cast<double>(n);
        double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[i] = is;
        for (std::size_t j = 0; j < n; ++j) {
            double h = (row[j] - mean) * is;
            (*xhat)[i * n + j] = h;
            out[i * n + j] = pg->data[j] * h + pb->data[j];
        }
    }
    return make_op({m, n}, std::move(out), {px, pg, pb},
                   [px, pg, pb, xhat, inv_std, m, n](TensorNode& self) {
                       if (pg->requires_grad) pg->ensure_grad();
                       if (pb->requires_grad) pb->ensure_grad();
                       if (px->requires_grad) px->ensure_grad();
                       for (std::size_t i = 0; i < m; ++i) {
                           const double* g = &self.grad[i * n];
                           const double* h = &(*xhat)[i * n];
                           if (pg->requires_grad || pb->requires_grad) {
                               for (std::size_t j = 0; j < n; ++j) {
                                   if (pg->requires_grad) pg->grad[j] += g[j] * h[j];
                                   if (pb->requires_grad) pb->grad[j] += g[j];
                               }
                           }
                           if (px->requires_grad) {
                               // dxhat = g * gamma; dx = (dxhat - mean(dxhat)
                               //        - xhat * mean(dxhat * xhat)) * inv_std
                               double sum_dh = 0.0, sum_dh_h = 0.0;
                               for (std::size_t j = 0; j < n; ++j) {
                                   double dh = g[j] * pg->data[j];
                                   sum_dh += dh;
                                   sum_dh_h += dh * h[j];
                               }
                               double inv_n = 1.0 / static_cast<double>(n);
                               double is = (*inv_std)[i];
                               for (std::size_t j = 0; j < n; ++j) {
                                   double dh = g[j] * pg->data[j];
                                   px->grad[i * n + j] +=
                                       is * (dh - inv_n * sum_dh - h[j] * inv_n * sum_dh_h);
                               }
                           }
                       }
                   });
}

Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count) {
    auto pa = node_of(a, "slice_rows");
    require_rank2(*pa, "slice_rows");
    std::size_t m = pa->shape[0], n = pa->shape[1];
    if (start + count > m)
        throw DimensionError("slice_rows: range [" + std::to_string(start) + "," +
                             std::to_string(start + count) + ") exceeds " + std::to_string(m) +
                             " rows");
    std::vector<double> out(pa->data.begin() + static_cast<std::ptrdiff_t>(start * n),
                            pa->data.begin() + static_cast<std::ptrdiff_t>((start + count) * n));
    return make_op({count, n}, std::move(out), {pa}, [pa, start, count, n](TensorNode& self) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < count * n; ++i) pa->grad[start * n + i] += self.grad[i];
    });
}

Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count) {
    auto pa = node_of(a, "slice_cols");
    require_rank2(*pa, "slice_cols");
    std::size_t m = pa->shape[0], n = pa->shape[1];
    if (start + count > n)
        throw DimensionError("slice_cols: range [" + std::to_string(start) + "," +
                             std::to_string(start + count) + ") exceeds " + std::to_string(n) +
                             " columns");
    std::vector<double> out(m * count);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < count; ++j) out[i * count + j] = pa->data[i * n + start + j];
    return make_op({m, count}, std::move(out), {pa}, [pa, start, count, m, n](TensorNode& self) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < count; ++j)
                pa->grad[i * n + start + j] += self.grad[i * count + j];
    });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols: no operands");
    std::vector<std::shared_ptr<TensorNode>> nodes;
    nodes.reserve(parts.size());
    std::size_t m = 0, total = 0;
    for (const auto& p : parts) {
        auto pn = node_of(p, "concat_cols");
        require_rank2(*pn, "concat_cols");
        if (nodes.empty())
            m = pn->shape[0];
        else if (pn->shape[0] != m)
            throw DimensionError("concat_cols: row counts differ");
        total += pn->shape[1];
        nodes.push_back(pn);
    }
    std::vector<double> out(m * total);
    std::size_t off = 0;
    for (const auto& pn : nodes) {
        std::size_t w = pn->shape[1];
        for (std::size_t i = 0; i < m; ++i)
            std::memcpy(&out[i * total + off], &pn->data[i * w], w * sizeof(double));
        off += w;
    }
    return make_op({m, total}, std::move(out), nodes, [nodes, m, total](TensorNode& self) {
        std::size_t off = 0;
        for (const auto& pn : nodes) {
            std::size_t w = pn->shape[1];
            if (pn->requires_grad) {
                pn->ensure_grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < w; ++j)
                        pn->grad[i * w + j] += self.grad[i * total + off + j];
            }
            off += w;
        }
    });
}

Tensor dropout(const Tensor& a, double p, RandomSource& rng) {
    auto pa = node_of(a, "dropout");
    if (!(p >= 0.0 && p < 1.0))
        throw DomainError("dropout: rate must lie in [0, 1), got " + std::to_string(p));
    std::size_t n = pa->data.size();
    auto mask = std::make_shared<std::vector<double>>(n);
    double keep_scale = 1.0 / (1.0 - p);
    for (std::size_t i = 0; i < n; ++i)
        (*mask)[i] = (rng.uniform01() >= p) ? keep_scale : 0.0;
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = pa->data[i] * (*mask)[i];
    return make_op(pa->shape, std::move(out), {pa}, [pa, mask](TensorNode& self) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            pa->grad[i] += self.grad[i] * (*mask)[i];
    });
}

Tensor sum_all(const Tensor& a) {
    auto pa = node_of(a, "sum_all");
    double s = 0.0;
    for (double v : pa->data) s += v;
    return make_op({1}, {s}, {pa}, [pa](TensorNode& self) {
        pa->ensure_grad();
        for (double& g : pa->grad) g += self.grad[0];
    });
}

Tensor mean_all(const Tensor& a) {
    auto pa = node_of(a, "mean_all");
    if (pa->data.empty()) throw DimensionError("mean_all: empty tensor");
    double s = 0.0;
    for (double v : pa->data) s += v;
    double inv_n = 1.0 / static_cast<double>(pa->data.size());
    return make_op({1}, {s * inv_n}, {pa}, [pa, inv_n](TensorNode& self) {
        pa->ensure_grad();
        for (double& g : pa->grad) g += self.grad[0] * inv_n;
    });
}

Tensor cross_entropy_mean(const Tensor& logits, std::span<const int> targets) {
    auto pa = node_of(logits, "cross_entropy_mean");
    require_rank2(*pa, "cross_entropy_mean");
    std::size_t n = pa->shape[0], c = pa->shape[1];
    if (targets.size() != n)
        throw DimensionError("cross_entropy_mean: " + std::to_string(targets.size()) +
                             " targets for " + std::to_string(n) + " rows");
    if (n == 0) throw DimensionError("cross_entropy_mean: no rows");
    auto probs = std::make_shared<std::vector<double>>(n * c);
    auto tg = std::make_shared<std::vector<int>>(targets.begin(), targets.end());
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        int t = (*tg)[i];
        if (t < 0 || static_cast<std::size_t>(t) >= c)
            throw DomainError("cross_entropy_mean: target " + std::to_string(t) +
                              " outside [0," + std::to_string(c) + ")");
        const double* row = &pa->data[i * c];
        double mx = row[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < c; ++j) sum += std::exp(row[j] - mx);
        double lse = mx + std::log(sum);
        for (std::size_t j = 0; j < c; ++j) (*probs)[i * c + j] = std::exp(row[j] - lse);
        loss += lse - row[static_cast<std::size_t>(t)];
    }
    loss /= static_cast<double>(n);
    return make_op({1}, {loss}, {pa}, [pa, probs, tg, n, c](TensorNode& self) {
        pa->ensure_grad();
        double g0 = self.grad[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) {
                double ind = (static_cast<std::size_t>((*tg)[i]) == j) ? 1.0 : 0.0;
                pa->grad[i * c + j] += g0 * ((*probs)[i * c + j] - ind);
            }
    });
}

Tensor mae_mean(const Tensor& pred, std::span<const double> targets) {
    auto pa = node_of(pred, "mae_mean");
    std::size_t n = pa->data.size();
    if (pa->shape.size() == 2 && pa->shape[1] != 1)
        throw DimensionError("mae_mean: prediction must be a vector or single column, got " +
                             shape_str(pa->shape));
    if (targets.size() != n)
        throw DimensionError("mae_mean: " + std::to_string(targets.size()) + " targets for " +
                             std::to_string(n) + " predictions");
    if (n == 0) throw DimensionError("mae_mean: no predictions");
    auto tg = std::make_shared<std::vector<double>>(targets.begin(), targets.end());
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) loss += std::abs(pa->data[i] - (*tg)[i]);
    loss /= static_cast<double>(n);
    return make_op({1}, {loss}, {pa}, [pa, tg, n](TensorNode& self) {
        pa->ensure_grad();
        double g0 = self.grad[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
            double d = pa->data[i] - (*tg)[i];
            double s = (d > 0.0) ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
            pa->grad[i] += g0 * s;
        }
    });
}

// --- backward --------------------------------------------------------------

void backward(const Tensor& loss) {
    auto root = node_of(loss, "backward");
    if (root->data.size() != 1)
        throw ContractError("backward: loss must be scalar, got " + shape_str(root->shape));
    if (!root->requires_grad)
        throw ContractError("backward: loss is not connected to any tracked tensor");
    if (root->consumed) throw ContractError("backward: graph already consumed");

    // Gather the reachable tracked subgraph.
    std::vector<std::shared_ptr<TensorNode>> order;
    std::unordered_set<TensorNode*> seen;
    std::vector<std::shared_ptr<TensorNode>> stack{root};
    seen.insert(root.get());
    while (!stack.empty()) {
        auto n = stack.back();
        stack.pop_back();
        if (n->consumed) throw ContractError("backward: graph already consumed");
        order.push_back(n);
        for (const auto& p : n->parents)
            if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p);
    }
    // Creation ids give a topological order: every consumer of a node was
    // created after it, so descending ids run consumers before producers.
    std::sort(order.begin(), order.end(),
              [](const auto& a, const auto& b) { return a->id > b->id; });

    root->ensure_grad();
    root->grad[0] += 1.0;
    for (const auto& n : order) {
        if (n->backprop) {
            if (!n->grad.empty()) n->backprop(*n);
            n->consumed = true;
            n->backprop = nullptr;
            n->parents.clear();
        }
    }
    root->consumed = true;
}

} // namespace fomox

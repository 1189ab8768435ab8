// Copyright 2026 The Duet Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense f64 tensor with reverse-mode automatic differentiation.
//
// Tensors are cheap handles onto shared graph nodes. Every operation that
// consumes a tensor requiring gradients records a backward closure; calling
// backward() on a scalar result accumulates gradients into the leaves.
// Gradients sum across uses; the caller zeroes them between optimizer steps.
//
// All forward results are validated to be finite: a NaN or Inf anywhere is
// reported as an error at the op that produced it.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "duet/rng.hpp"

namespace duet {

namespace detail {

struct Node {
    std::vector<std::size_t> shape;
    std::vector<double> data;
    std::vector<double> grad;  // allocated lazily on first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void()> backward_fn;

    std::size_t size() const { return data.size(); }

    double* grad_data() {
        if (grad.empty()) {
            grad.assign(data.size(), 0.0);
        }
        return grad.data();
    }
};

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

inline std::size_t shape_product(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) {
        n *= d;
    }
    return n;
}

// C[m x n] += A[m x k] * B[k x n]
inline void gemm_nn(const double* a, const double* b, double* c,
                    std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        double* ci = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                ci[j] += av * bp[j];
            }
        }
    }
}

// C[m x n] += A[m x k] * B[n x k]^T
inline void gemm_nt(const double* a, const double* b, double* c,
                    std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        double* ci = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* bj = b + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) {
                acc += ai[p] * bj[p];
            }
            ci[j] += acc;
        }
    }
}

// C[m x n] += A[k x m]^T * B[k x n]
inline void gemm_tn(const double* a, const double* b, double* c,
                    std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t p = 0; p < k; ++p) {
        const double* ap = a + p * m;
        const double* bp = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double av = ap[i];
            double* ci = c + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                ci[j] += av * bp[j];
            }
        }
    }
}

}  // namespace detail

// Disables graph recording in its scope (evaluation, finite differencing).
class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

class Tensor {
public:
    Tensor() : node_(std::make_shared<detail::Node>()) {}

    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

    static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false) {
        return filled(std::move(shape), 0.0, requires_grad);
    }

    static Tensor filled(std::vector<std::size_t> shape, double value, bool requires_grad = false) {
        check_shape(shape);
        auto node = std::make_shared<detail::Node>();
        node->data.assign(detail::shape_product(shape), value);
        node->shape = std::move(shape);
        node->requires_grad = requires_grad;
        return Tensor(std::move(node));
    }

    static Tensor from_data(std::vector<std::size_t> shape, std::vector<double> data,
                            bool requires_grad = false) {
        check_shape(shape);
        if (detail::shape_product(shape) != data.size()) {
            throw std::invalid_argument("tensor data length does not match shape");
        }
        auto node = std::make_shared<detail::Node>();
        node->shape = std::move(shape);
        node->data = std::move(data);
        node->requires_grad = requires_grad;
        return Tensor(std::move(node));
    }

    static Tensor scalar(double value, bool requires_grad = false) {
        return from_data({1}, {value}, requires_grad);
    }

    const std::vector<std::size_t>& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t size() const { return node_->data.size(); }

    std::size_t rows() const {
        require_rank(2);
        return node_->shape[0];
    }
    std::size_t cols() const {
        require_rank(2);
        return node_->shape[1];
    }

    const std::vector<double>& data() const { return node_->data; }
    std::vector<double>& mutable_data() { return node_->data; }

    double value() const {
        if (size() != 1) {
            throw std::invalid_argument("value() requires a single-element tensor");
        }
        return node_->data[0];
    }

    double at(std::size_t i, std::size_t j) const {
        require_rank(2);
        return node_->data[i * cols() + j];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool v) { node_->requires_grad = v; }

    bool has_grad() const { return !node_->grad.empty(); }

    const std::vector<double>& grad() const {
        if (node_->grad.empty()) {
            throw std::runtime_error("tensor has no accumulated gradient");
        }
        return node_->grad;
    }

    void zero_grad() {
        std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }

    // Deep copy of values only; detached from any graph.
    Tensor clone(bool requires_grad = false) const {
        return from_data(node_->shape, node_->data, requires_grad);
    }

    // Reverse-mode sweep from a scalar result.
    void backward() const {
        if (size() != 1) {
            throw std::invalid_argument("backward() requires a scalar tensor");
        }
        if (!node_->requires_grad) {
            throw std::runtime_error("backward() on a graph with no gradient-requiring leaves");
        }
        std::vector<detail::Node*> order = topo_order();
        node_->grad_data()[0] += 1.0;
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            detail::Node* n = *it;
            if (n->backward_fn && !n->grad.empty()) {
                n->backward_fn();
            }
        }
    }

    std::shared_ptr<detail::Node>& node() { return node_; }
    const std::shared_ptr<detail::Node>& node() const { return node_; }

private:
    static void check_shape(const std::vector<std::size_t>& shape) {
        if (shape.empty()) {
            throw std::invalid_argument("tensor shape must be non-empty");
        }
        for (std::size_t d : shape) {
            if (d == 0) {
                throw std::invalid_argument("tensor dimensions must be positive");
            }
        }
    }

    void require_rank(std::size_t r) const {
        if (node_->shape.size() != r) {
            throw std::invalid_argument("tensor rank mismatch: expected rank " +
                                        std::to_string(r));
        }
    }

    // Iterative post-order DFS; recursion would overflow on long training graphs.
    std::vector<detail::Node*> topo_order() const {
        std::vector<detail::Node*> order;
        std::unordered_set<detail::Node*> visited;
        std::vector<std::pair<detail::Node*, std::size_t>> stack;
        stack.emplace_back(node_.get(), 0);
        visited.insert(node_.get());
        while (!stack.empty()) {
            auto& [n, next] = stack.back();
            if (next < n->parents.size()) {
                detail::Node* p = n->parents[next].get();
                ++next;
                if (p->requires_grad && !visited.count(p)) {
                    visited.insert(p);
                    stack.emplace_back(p, 0);
                }
            } else {
                order.push_back(n);
                stack.pop_back();
            }
        }
        return order;
    }

    std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline void ensure_finite(const Node& node, const char* op) {
    for (double v : node.data) {
        if (!std::isfinite(v)) {
            throw std::runtime_error(std::string("non-finite value produced by ") + op);
        }
    }
}

// Builds the result node; wires parents and the backward closure only when
// gradients are enabled and some input needs them.
inline Tensor make_result(std::vector<std::size_t> shape, std::vector<double> data,
                          const char* op,
                          std::vector<std::shared_ptr<Node>> parents,
                          std::function<void(Node&)> backward) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    ensure_finite(*node, op);

    bool need_grad = false;
    if (grad_mode_flag()) {
        for (const auto& p : parents) {
            if (p->requires_grad) {
                need_grad = true;
                break;
            }
        }
    }
    if (need_grad) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        Node* raw = node.get();
        node->backward_fn = [raw, fn = std::move(backward)]() { fn(*raw); };
    }
    return Tensor(std::move(node));
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch");
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

// Gaussian init with the given stddev, drawn deterministically from rng.
inline Tensor randn_init(Rng& rng, std::vector<std::size_t> shape, double stddev,
                         bool requires_grad = false) {
    if (shape.empty()) {
        throw std::invalid_argument("randn_init: shape must be non-empty");
    }
    if (!(stddev > 0.0)) {
        throw std::invalid_argument("randn_init: stddev must be positive");
    }
    std::size_t n = detail::shape_product(shape);
    if (n == 0) {
        throw std::invalid_argument("randn_init: zero-size shape");
    }
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i) {
        data[i] = rng.next_gauss() * stddev;
    }
    return Tensor::from_data(std::move(shape), std::move(data), requires_grad);
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a.data()[i] + b.data()[i];
    }
    auto an = a.node();
    auto bn = b.node();
    return detail::make_result(a.shape(), std::move(out), "add", {an, bn},
                               [an, bn](detail::Node& r) {
                                   if (an->requires_grad) {
                                       double* g = an->grad_data();
                                       for (std::size_t i = 0; i < r.grad.size(); ++i) g[i] += r.grad[i];
                                   }
                                   if (bn->requires_grad) {
                                       double* g = bn->grad_data();
                                       for (std::size_t i = 0; i < r.grad.size(); ++i) g[i] += r.grad[i];
                                   }
                               });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a.data()[i] - b.data()[i];
    }
    auto an = a.node();
    auto bn = b.node();
    return detail::make_result(a.shape(), std::move(out), "sub", {an, bn},
                               [an, bn](detail::Node& r) {
                                   if (an->requires_grad) {
                                       double* g = an->grad_data();
                                       for (std::size_t i = 0; i < r.grad.size(); ++i) g[i] += r.grad[i];
                                   }
                                   if (bn->requires_grad) {
                                       double* g = bn->grad_data();
                                       for (std::size_t i = 0; i < r.grad.size(); ++i) g[i] -= r.grad[i];
                                   }
                               });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a.data()[i] * b.data()[i];
    }
    auto an = a.node();
    auto bn = b.node();
    return detail::make_result(a.shape(), std::move(out), "mul", {an, bn},
                               [an, bn](detail::Node& r) {
                                   if (an->requires_grad) {
                                       double* g = an->grad_data();
                                       for (std::size_t i = 0; i < r.grad.size(); ++i) {
                                           g[i] += r.grad[i] * bn->data[i];
                                       }
                                   }
                                   if (bn->requires_grad) {
                                       double* g = bn->grad_data();
                                       for (std::size_t i = 0; i < r.grad.size(); ++i) {
                                           g[i] += r.grad[i] * an->data[i];
                                       }
                                   }
                               });
}

inline Tensor neg(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = -a.data()[i];
    auto an = a.node();
    return detail::make_result(a.shape(), std::move(out), "neg", {an},
                               [an](detail::Node& r) {
                                   double* g = an->grad_data();
                                   for (std::size_t i = 0; i < r.grad.size(); ++i) g[i] -= r.grad[i];
                               });
}

inline Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
    auto an = a.node();
    return detail::make_result(a.shape(), std::move(out), "scale", {an},
                               [an, c](detail::Node& r) {
                                   double* g = an->grad_data();
                                   for (std::size_t i = 0; i < r.grad.size(); ++i) g[i] += c * r.grad[i];
                               });
}

inline Tensor exp(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.data()[i]);
    auto an = a.node();
    return detail::make_result(a.shape(), std::move(out), "exp", {an},
                               [an](detail::Node& r) {
                                   double* g = an->grad_data();
                                   for (std::size_t i = 0; i < r.grad.size(); ++i) {
                                       g[i] += r.grad[i] * r.data[i];
                                   }
                               });
}

// Multiplies every element of a by the single-element tensor s (used for the
// trainable inverse-temperature scaling).
inline Tensor mul_scalar_tensor(const Tensor& a, const Tensor& s) {
    if (s.size() != 1) {
        throw std::invalid_argument("mul_scalar_tensor: scalar operand must have one element");
    }
    double sv = s.data()[0];
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * sv;
    auto an = a.node();
    auto sn = s.node();
    return detail::make_result(a.shape(), std::move(out), "mul_scalar_tensor", {an, sn},
                               [an, sn](detail::Node& r) {
                                   if (an->requires_grad) {
                                       double* g = an->grad_data();
                                       double sv2 = sn->data[0];
                                       for (std::size_t i = 0; i < r.grad.size(); ++i) {
                                           g[i] += r.grad[i] * sv2;
                                       }
                                   }
                                   if (sn->requires_grad) {
                                       double acc = 0.0;
                                       for (std::size_t i = 0; i < r.grad.size(); ++i) {
                                           acc += r.grad[i] * an->data[i];
                                       }
                                       sn->grad_data()[0] += acc;
                                   }
                               });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    auto an = a.node();
    return detail::make_result({1}, {acc}, "sum_all", {an},
                               [an](detail::Node& r) {
                                   double* g = an->grad_data();
                                   for (std::size_t i = 0; i < an->data.size(); ++i) g[i] += r.grad[0];
                               });
}

inline Tensor mean_all(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    double inv = 1.0 / static_cast<double>(a.size());
    auto an = a.node();
    return detail::make_result({1}, {acc * inv}, "mean_all", {an},
                               [an, inv](detail::Node& r) {
                                   double* g = an->grad_data();
                                   for (std::size_t i = 0; i < an->data.size(); ++i) {
                                       g[i] += r.grad[0] * inv;
                                   }
                               });
}

// Per-row max-shifted log-sum-exp of a [k x n] matrix; result has shape [k].
// Stable for inputs up to +-1e4.
inline Tensor log_sum_exp_rows(const Tensor& a) {
    std::size_t k = a.rows();
    std::size_t n = a.cols();
    std::vector<double> out(k);
    for (std::size_t i = 0; i < k; ++i) {
        const double* row = a.data().data() + i * n;
        double m = row[0];
        for (std::size_t j = 1; j < n; ++j) m = std::max(m, row[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += std::exp(row[j] - m);
        out[i] = m + std::log(s);
    }
    auto an = a.node();
    return detail::make_result({k}, std::move(out), "log_sum_exp_rows", {an},
                               [an, k, n](detail::Node& r) {
                                   double* g = an->grad_data();
                                   for (std::size_t i = 0; i < k; ++i) {
                                       const double* row = an->data.data() + i * n;
                                       double lse = r.data[i];
                                       double gi = r.grad[i];
                                       for (std::size_t j = 0; j < n; ++j) {
                                           g[i * n + j] += gi * std::exp(row[j] - lse);
                                       }
                                   }
                               });
}

// Diagonal of a [k x n] matrix with n >= k; result has shape [k].
inline Tensor take_diag(const Tensor& a) {
    std::size_t k = a.rows();
    std::size_t n = a.cols();
    if (n < k) {
        throw std::invalid_argument("take_diag: need at least as many columns as rows");
    }
    std::vector<double> out(k);
    for (std::size_t i = 0; i < k; ++i) out[i] = a.data()[i * n + i];
    auto an = a.node();
    return detail::make_result({k}, std::move(out), "take_diag", {an},
                               [an, k, n](detail::Node& r) {
                                   double* g = an->grad_data();
                                   for (std::size_t i = 0; i < k; ++i) g[i * n + i] += r.grad[i];
                               });
}

// out[i][j] = a[i][j] - v[i], with a [k x n] and v [k].
inline Tensor broadcast_sub_colvec(const Tensor& a, const Tensor& v) {
    std::size_t k = a.rows();
    std::size_t n = a.cols();
    if (v.rank() != 1 || v.shape()[0] != k) {
        throw std::invalid_argument("broadcast_sub_colvec: vector length must equal row count");
    }
    std::vector<double> out(k * n);
    for (std::size_t i = 0; i < k; ++i) {
        double vi = v.data()[i];
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.data()[i * n + j] - vi;
    }
    auto an = a.node();
    auto vn = v.node();
    return detail::make_result(a.shape(), std::move(out), "broadcast_sub_colvec", {an, vn},
                               [an, vn, k, n](detail::Node& r) {
                                   if (an->requires_grad) {
                                       double* g = an->grad_data();
                                       for (std::size_t i = 0; i < k * n; ++i) g[i] += r.grad[i];
                                   }
                                   if (vn->requires_grad) {
                                       double* g = vn->grad_data();
                                       for (std::size_t i = 0; i < k; ++i) {
                                           double acc = 0.0;
                                           for (std::size_t j = 0; j < n; ++j) acc += r.grad[i * n + j];
                                           g[i] -= acc;
                                       }
                                   }
                               });
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    std::size_t m = a.rows();
    std::size_t k = a.cols();
    if (b.rows() != k) {
        throw std::invalid_argument("matmul: inner dimensions disagree");
    }
    std::size_t n = b.cols();
    std::vector<double> out(m * n, 0.0);
    detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
    auto an = a.node();
    auto bn = b.node();
    return detail::make_result({m, n}, std::move(out), "matmul", {an, bn},
                               [an, bn, m, k, n](detail::Node& r) {
                                   if (an->requires_grad) {
                                       // dA += dC * B^T
                                       detail::gemm_nt(r.grad.data(), bn->data.data(),
                                                       an->grad_data(), m, n, k);
                                   }
                                   if (bn->requires_grad) {
                                       // dB += A^T * dC
                                       detail::gemm_tn(an->data.data(), r.grad.data(),
                                                       bn->grad_data(), k, m, n);
                                   }
                               });
}

inline Tensor transpose(const Tensor& a) {
    std::size_t m = a.rows();
    std::size_t n = a.cols();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.data()[i * n + j];
    }
    auto an = a.node();
    return detail::make_result({n, m}, std::move(out), "transpose", {an},
                               [an, m, n](detail::Node& r) {
                                   double* g = an->grad_data();
                                   for (std::size_t i = 0; i < m; ++i) {
                                       for (std::size_t j = 0; j < n; ++j) {
                                           g[i * n + j] += r.grad[j * m + i];
                                       }
                                   }
                               });
}

// Row slice [r0, r1) of a rank-2 tensor.
inline Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t r1) {
    std::size_t m = a.rows();
    std::size_t n = a.cols();
    if (r0 >= r1 || r1 > m) {
        throw std::invalid_argument("slice_rows: invalid range");
    }
    std::vector<double> out(a.data().begin() + r0 * n, a.data().begin() + r1 * n);
    auto an = a.node();
    return detail::make_result({r1 - r0, n}, std::move(out), "slice_rows", {an},
                               [an, r0, n](detail::Node& r) {
                                   double* g = an->grad_data();
                                   for (std::size_t i = 0; i < r.grad.size(); ++i) {
                                       g[r0 * n + i] += r.grad[i];
                                   }
                               });
}

// Column slice [c0, c1) of a rank-2 tensor.
inline Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1) {
    std::size_t m = a.rows();
    std::size_t n = a.cols();
    if (c0 >= c1 || c1 > n) {
        throw std::invalid_argument("slice_cols: invalid range");
    }
    std::size_t w = c1 - c0;
    std::vector<double> out(m * w);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < w; ++j) out[i * w + j] = a.data()[i * n + c0 + j];
    }
    auto an = a.node();
    return detail::make_result({m, w}, std::move(out), "slice_cols", {an},
                               [an, m, n, c0, w](detail::Node& r) {
                                   double* g = an->grad_data();
                                   for (std::size_t i = 0; i < m; ++i) {
                                       for (std::size_t j = 0; j < w; ++j) {
                                           g[i * n + c0 + j] += r.grad[i * w + j];
                                       }
                                   }
                               });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) {
        throw std::invalid_argument("concat_cols: no inputs");
    }
    std::size_t m = parts[0].rows();
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.rows() != m) {
            throw std::invalid_argument("concat_cols: row counts differ");
        }
        total += p.cols();
    }
    std::vector<double> out(m * total);
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::size_t w = p.cols();
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < w; ++j) out[i * total + off + j] = p.data()[i * w + j];
        }
        off += w;
    }
    std::vector<std::shared_ptr<detail::Node>> parents;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
        parents.push_back(p.node());
        widths.push_back(p.cols());
    }
    return detail::make_result({m, total}, std::move(out), "concat_cols", parents,
                               [parents, widths, m, total](detail::Node& r) {
                                   std::size_t off2 = 0;
                                   for (std::size_t pi = 0; pi < parents.size(); ++pi) {
                                       std::size_t w = widths[pi];
                                       if (parents[pi]->requires_grad) {
                                           double* g = parents[pi]->grad_data();
                                           for (std::size_t i = 0; i < m; ++i) {
                                               for (std::size_t j = 0; j < w; ++j) {
                                                   g[i * w + j] += r.grad[i * total + off2 + j];
                                               }
                                           }
                                       }
                                       off2 += w;
                                   }
                               });
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) {
        throw std::invalid_argument("concat_rows: no inputs");
    }
    std::size_t n = parts[0].cols();
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.cols() != n) {
            throw std::invalid_argument("concat_rows: column counts differ");
        }
        total += p.rows();
    }
    std::vector<double> out;
    out.reserve(total * n);
    for (const auto& p : parts) {
        out.insert(out.end(), p.data().begin(), p.data().end());
    }
    std::vector<std::shared_ptr<detail::Node>> parents;
    std::vector<std::size_t> sizes;
    for (const auto& p : parts) {
        parents.push_back(p.node());
        sizes.push_back(p.size());
    }
    return detail::make_result({total, n}, std::move(out), "concat_rows", parents,
                               [parents, sizes](detail::Node& r) {
                                   std::size_t off = 0;
                                   for (std::size_t pi = 0; pi < parents.size(); ++pi) {
                                       if (parents[pi]->requires_grad) {
                                           double* g = parents[pi]->grad_data();
                                           for (std::size_t i = 0; i < sizes[pi]; ++i) {
                                               g[i] += r.grad[off + i];
                                           }
                                       }
                                       off += sizes[pi];
                                   }
                               });
}

// Embedding-style lookup: out[i] = table[ids[i]], table rank-2.
inline Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& ids) {
    std::size_t v = table.rows();
    std::size_t d = table.cols();
    if (ids.empty()) {
        throw std::invalid_argument("gather_rows: empty index list");
    }
    std::vector<double> out(ids.size() * d);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= v) {
            throw std::invalid_argument("gather_rows: index out of range");
        }
        std::copy_n(table.data().data() + ids[i] * d, d, out.data() + i * d);
    }
    auto tn = table.node();
    return detail::make_result({ids.size(), d}, std::move(out), "gather_rows", {tn},
                               [tn, ids, d](detail::Node& r) {
                                   double* g = tn->grad_data();
                                   for (std::size_t i = 0; i < ids.size(); ++i) {
                                       for (std::size_t j = 0; j < d; ++j) {
                                           g[ids[i] * d + j] += r.grad[i * d + j];
                                       }
                                   }
                               });
}

// Flat gather: out.flat[j] = x.flat[idx[j]]; used for image patch extraction.
inline Tensor gather_flat(const Tensor& x, const std::vector<std::size_t>& idx,
                          std::vector<std::size_t> out_shape) {
    std::size_t n = detail::shape_product(out_shape);
    if (n != idx.size()) {
        throw std::invalid_argument("gather_flat: output shape does not match index count");
    }
    std::vector<double> out(n);
    for (std::size_t j = 0; j < n; ++j) {
        if (idx[j] >= x.size()) {
            throw std::invalid_argument("gather_flat: index out of range");
        }
        out[j] = x.data()[idx[j]];
    }
    auto xn = x.node();
    return detail::make_result(std::move(out_shape), std::move(out), "gather_flat", {xn},
                               [xn, idx](detail::Node& r) {
                                   double* g = xn->grad_data();
                                   for (std::size_t j = 0; j < idx.size(); ++j) {
                                       g[idx[j]] += r.grad[j];
                                   }
                               });
}

// Size-preserving shape change.
inline Tensor reshape(const Tensor& a, std::vector<std::size_t> shape) {
    if (detail::shape_product(shape) != a.size()) {
        throw std::invalid_argument("reshape: element count mismatch");
    }
    auto an = a.node();
    return detail::make_result(std::move(shape), a.data(), "reshape", {an},
                               [an](detail::Node& r) {
                                   double* g = an->grad_data();
                                   for (std::size_t i = 0; i < r.grad.size(); ++i) g[i] += r.grad[i];
                               });
}

// ---------------------------------------------------------------------------
// Normalization and softmax
// ---------------------------------------------------------------------------

// Scales each row of a [k x d] matrix to unit Euclidean norm. Rows with norm
// below 1e-12 are degenerate embeddings and rejected.
inline Tensor l2_normalize_rows(const Tensor& a) {
    std::size_t k = a.rows();
    std::size_t d = a.cols();
    std::vector<double> out(k * d);
    std::vector<double> norms(k);
    for (std::size_t i = 0; i < k; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            double v = a.data()[i * d + j];
            s += v * v;
        }
        double norm = std::sqrt(s);
        if (norm < 1e-12) {
            throw std::invalid_argument("l2_normalize_rows: row norm below 1e-12");
        }
        norms[i] = norm;
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] = a.data()[i * d + j] / norm;
    }
    auto an = a.node();
    return detail::make_result(a.shape(), std::move(out), "l2_normalize_rows", {an},
                               [an, norms, k, d](detail::Node& r) {
                                   // dx = (dy - y * <y, dy>) / ||x|| per row
                                   double* g = an->grad_data();
                                   for (std::size_t i = 0; i < k; ++i) {
                                       const double* y = r.data.data() + i * d;
                                       const double* dy = r.grad.data() + i * d;
                                       double dot = 0.0;
                                       for (std::size_t j = 0; j < d; ++j) dot += y[j] * dy[j];
                                       double inv = 1.0 / norms[i];
                                       for (std::size_t j = 0; j < d; ++j) {
                                           g[i * d + j] += (dy[j] - y[j] * dot) * inv;
                                       }
                                   }
                               });
}

// Additive logit value that excludes a key position from attention. Finite so
// tensors stay NaN/Inf-free, small enough that exp underflows to exactly 0.
inline constexpr double kMaskedLogit = -1e30;

// Row softmax of (scale * x + bias), with bias a non-differentiable constant
// (additive attention bias: position penalties and key masking). Fused so the
// attention path materializes one matrix instead of four.
inline Tensor masked_scaled_softmax_rows(const Tensor& x, double sc, const Tensor& bias) {
    std::size_t k = x.rows();
    std::size_t n = x.cols();
    detail::check_same_shape(x, bias, "masked_scaled_softmax_rows");
    if (bias.requires_grad()) {
        throw std::invalid_argument("masked_scaled_softmax_rows: bias must be constant");
    }
    std::vector<double> out(k * n);
    for (std::size_t i = 0; i < k; ++i) {
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
            double z = sc * x.data()[i * n + j] + bias.data()[i * n + j];
            out[i * n + j] = z;
            m = std::max(m, z);
        }
        if (!std::isfinite(m) || m <= kMaskedLogit * 0.1) {
            throw std::runtime_error("masked_scaled_softmax_rows: fully masked row");
        }
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            double e = std::exp(out[i * n + j] - m);
            out[i * n + j] = e;
            s += e;
        }
        double inv = 1.0 / s;
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] *= inv;
    }
    auto xn = x.node();
    return detail::make_result(x.shape(), std::move(out), "masked_scaled_softmax_rows", {xn},
                               [xn, sc, k, n](detail::Node& r) {
                                   // dx = scale * a * (da - sum(a * da)) per row
                                   double* g = xn->grad_data();
                                   for (std::size_t i = 0; i < k; ++i) {
                                       const double* a = r.data.data() + i * n;
                                       const double* da = r.grad.data() + i * n;
                                       double dot = 0.0;
                                       for (std::size_t j = 0; j < n; ++j) dot += a[j] * da[j];
                                       for (std::size_t j = 0; j < n; ++j) {
                                           g[i * n + j] += sc * a[j] * (da[j] - dot);
                                       }
                                   }
                               });
}

}  // namespace duet

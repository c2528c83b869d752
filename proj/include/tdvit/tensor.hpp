#pragma once

// Dense row-major tensors with tape-style reverse-mode differentiation.
//
// A Tensor is a shared handle to a node. Operations on tensors that require
// gradients record their parents and a backward rule; Graph::record() orders
// the recorded nodes topologically and backward() walks them in reverse.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace tdvit {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

class ShapeError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

namespace detail {

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
   public:
    NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

   private:
    bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

template <typename T>
struct TensorNode {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty until something accumulates into it
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;

    std::vector<T>& grad_buffer() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
        return grad;
    }
    bool is_leaf() const { return !backward_fn; }
};

template <typename T>
class Tensor {
   public:
    using value_type = T;
    using Node = TensorNode<T>;

    Tensor() = default;

    Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
        : node_(std::make_shared<Node>()) {
        if (shape_numel(shape) != data.size()) {
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        }
        node_->shape = std::move(shape);
        node_->value = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
    }
    static Tensor full(Shape shape, T fill, bool requires_grad = false) {
        const auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, fill), requires_grad);
    }
    static Tensor scalar(T v, bool requires_grad = false) { return Tensor({1}, {v}, requires_grad); }
    static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows, bool requires_grad = false) {
        std::vector<T> data;
        std::size_t cols = rows.size() ? rows.begin()->size() : 0;
        for (const auto& r : rows) {
            if (r.size() != cols) throw ShapeError("ragged matrix literal");
            data.insert(data.end(), r.begin(), r.end());
        }
        return Tensor({rows.size(), cols}, std::move(data), requires_grad);
    }
    static Tensor from_node(std::shared_ptr<Node> node) {
        Tensor t;
        t.node_ = std::move(node);
        return t;
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t size() const { return node_->value.size(); }
    std::size_t rows() const { return rank() == 2 ? node_->shape[0] : 1; }
    std::size_t cols() const { return rank() == 2 ? node_->shape[1] : (rank() == 1 ? node_->shape[0] : 1); }

    std::span<const T> data() const { return node_->value; }
    std::span<T> mutable_data() { return node_->value; }
    std::vector<T>& values() { return node_->value; }
    const std::vector<T>& values() const { return node_->value; }
    T item() const {
        if (size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
        return node_->value[0];
    }
    T at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
    T operator[](std::size_t i) const { return node_->value[i]; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool v) { node_->requires_grad = v; }

    bool has_grad() const { return node_->grad.size() == node_->value.size() && !node_->value.empty(); }
    /// Gradient slot; zeros when nothing has accumulated yet.
    std::span<const T> grad() const { return node_->grad_buffer(); }
    std::span<T> mutable_grad() { return node_->grad_buffer(); }
    void zero_grad() { node_->grad.clear(); }

    /// Leaf copy of the values, detached from any graph.
    Tensor detach(bool requires_grad = false) const { return Tensor(shape(), node_->value, requires_grad); }

    Node* node() const { return node_.get(); }
    const std::shared_ptr<Node>& node_ptr() const { return node_; }

   private:
    std::shared_ptr<Node> node_;
};

// ---------------------------------------------------------------------------
// Graph

/// Topologically ordered record of the nodes reachable from a root.
template <typename T>
class Graph {
   public:
    static Graph record(const Tensor<T>& root) {
        Graph g;
        std::unordered_set<const TensorNode<T>*> seen;
        // iterative post-order DFS: parents precede children
        std::vector<std::pair<TensorNode<T>*, std::size_t>> stack;
        stack.emplace_back(root.node(), 0);
        seen.insert(root.node());
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->parents.size()) {
                TensorNode<T>* parent = node->parents[next++].get();
                if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
            } else {
                g.order_.push_back(node);
                stack.pop_back();
            }
        }
        return g;
    }

    std::span<TensorNode<T>* const> nodes() const { return order_; }

    /// Runs every backward rule once, in reverse topological order.
    void run_backward() const {
        for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
            TensorNode<T>* node = *it;
            if (node->backward_fn && node->grad.size() == node->value.size()) node->backward_fn(*node);
        }
    }

   private:
    std::vector<TensorNode<T>*> order_;
};

template <typename T>
void backward(const Tensor<T>& loss) {
    if (loss.size() != 1) throw ShapeError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
    if (!loss.requires_grad()) return;
    loss.node()->grad_buffer()[0] += T(1);
    Graph<T>::record(loss).run_backward();
}

// ---------------------------------------------------------------------------
// Op plumbing

namespace detail {

template <typename T>
void check_finite(const std::vector<T>& v, const char* op) {
#ifndef NDEBUG
    for (T x : v) {
        if (!std::isfinite(x)) throw std::runtime_error(std::string("non-finite value produced by ") + op);
    }
#else
    (void)v;
    (void)op;
#endif
}

template <typename T, typename Backward>
Tensor<T> make_result(Shape shape, std::vector<T> value, std::initializer_list<Tensor<T>> parents,
                      const char* op, Backward&& backward_fn) {
    check_finite(value, op);
    auto node = std::make_shared<TensorNode<T>>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->op = op;
    bool needs = false;
    if (grad_enabled()) {
        for (const auto& p : parents) needs = needs || p.requires_grad();
    }
    if (needs) {
        node->requires_grad = true;
        for (const auto& p : parents) node->parents.push_back(p.node_ptr());
        node->backward_fn = std::forward<Backward>(backward_fn);
    }
    return Tensor<T>::from_node(std::move(node));
}

template <typename T>
Tensor<T> make_result_list(Shape shape, std::vector<T> value, const std::vector<Tensor<T>>& parents,
                           const char* op, std::function<void(TensorNode<T>&)> backward_fn) {
    check_finite(value, op);
    auto node = std::make_shared<TensorNode<T>>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->op = op;
    bool needs = false;
    if (grad_enabled()) {
        for (const auto& p : parents) needs = needs || p.requires_grad();
    }
    if (needs) {
        node->requires_grad = true;
        for (const auto& p : parents) node->parents.push_back(p.node_ptr());
        node->backward_fn = std::move(backward_fn);
    }
    return Tensor<T>::from_node(std::move(node));
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
ConstMapMat<T> as_matrix(const std::vector<T>& v, std::size_t r, std::size_t c) {
    return ConstMapMat<T>(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
template <typename T>
MapMat<T> as_matrix(std::vector<T>& v, std::size_t r, std::size_t c) {
    return MapMat<T>(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

template <typename T>
void require_matrix(const Tensor<T>& t, const char* op) {
    if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

template <typename T, typename F, typename G>
Tensor<T> unary_elementwise(const Tensor<T>& x, const char* op, F forward, G derivative) {
    std::vector<T> out(x.size());
    const auto& in = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = forward(in[i]);
    auto* xn = x.node();
    return make_result<T>(x.shape(), std::move(out), {x}, op, [xn, derivative](TensorNode<T>& self) {
        if (!xn->requires_grad) return;
        auto& gx = xn->grad_buffer();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * derivative(xn->value[i], self.value[i]);
    });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// Matrix product A[m×k]·B[k×n].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_matrix(a, "matmul");
    detail::require_matrix(b, "matmul");
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k) {
        throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    std::vector<T> out(m * n);
    detail::as_matrix(out, m, n).noalias() = detail::as_matrix(a.values(), m, k) * detail::as_matrix(b.values(), k, n);
    auto* an = a.node();
    auto* bn = b.node();
    return detail::make_result<T>({m, n}, std::move(out), {a, b}, "matmul", [an, bn, m, k, n](TensorNode<T>& self) {
        auto dc = detail::as_matrix(std::as_const(self.grad), m, n);
        if (an->requires_grad) {
            detail::as_matrix(an->grad_buffer(), m, k).noalias() +=
                dc * detail::as_matrix(std::as_const(bn->value), k, n).transpose();
        }
        if (bn->requires_grad) {
            detail::as_matrix(bn->grad_buffer(), k, n).noalias() +=
                detail::as_matrix(std::as_const(an->value), m, k).transpose() * dc;
        }
    });
}

/// A[m×k]·B[n×k]ᵀ without materializing the transpose.
template <typename T>
Tensor<T> matmul_transposed(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_matrix(a, "matmul_transposed");
    detail::require_matrix(b, "matmul_transposed");
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    if (b.cols() != k) {
        throw ShapeError("matmul_transposed: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + "^T");
    }
    std::vector<T> out(m * n);
    detail::as_matrix(out, m, n).noalias() =
        detail::as_matrix(a.values(), m, k) * detail::as_matrix(b.values(), n, k).transpose();
    auto* an = a.node();
    auto* bn = b.node();
    return detail::make_result<T>({m, n}, std::move(out), {a, b}, "matmul_transposed",
                                  [an, bn, m, k, n](TensorNode<T>& self) {
                                      auto dc = detail::as_matrix(std::as_const(self.grad), m, n);
                                      if (an->requires_grad) {
                                          detail::as_matrix(an->grad_buffer(), m, k).noalias() +=
                                              dc * detail::as_matrix(std::as_const(bn->value), n, k);
                                      }
                                      if (bn->requires_grad) {
                                          detail::as_matrix(bn->grad_buffer(), n, k).noalias() +=
                                              dc.transpose() * detail::as_matrix(std::as_const(an->value), m, k);
                                      }
                                  });
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<T> out(a.values());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.values()[i];
    auto* an = a.node();
    auto* bn = b.node();
    return detail::make_result<T>(a.shape(), std::move(out), {a, b}, "add", [an, bn](TensorNode<T>& self) {
        for (auto* p : {an, bn}) {
            if (!p->requires_grad) continue;
            auto& g = p->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<T> out(a.values());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.values()[i];
    auto* an = a.node();
    auto* bn = b.node();
    return detail::make_result<T>(a.shape(), std::move(out), {a, b}, "sub", [an, bn](TensorNode<T>& self) {
        if (an->requires_grad) {
            auto& g = an->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            auto& g = bn->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

/// Hadamard product.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
    auto* an = a.node();
    auto* bn = b.node();
    return detail::make_result<T>(a.shape(), std::move(out), {a, b}, "mul", [an, bn](TensorNode<T>& self) {
        if (an->requires_grad) {
            auto& g = an->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn->value[i];
        }
        if (bn->requires_grad) {
            auto& g = bn->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an->value[i];
        }
    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
    return detail::unary_elementwise<T>(
        x, "scale", [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

/// Adds a length-n bias (rank 1, or 1×n) to every row of an m×n matrix.
template <typename T>
Tensor<T> add_row_broadcast(const Tensor<T>& x, const Tensor<T>& bias) {
    detail::require_matrix(x, "add_row_broadcast");
    const std::size_t m = x.rows(), n = x.cols();
    if (bias.size() != n) {
        throw ShapeError("add_row_broadcast: bias " + shape_str(bias.shape()) + " vs matrix " + shape_str(x.shape()));
    }
    std::vector<T> out(x.values());
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) out[r * n + c] += bias.values()[c];
    auto* xn = x.node();
    auto* bn = bias.node();
    return detail::make_result<T>(x.shape(), std::move(out), {x, bias}, "add_row_broadcast",
                                  [xn, bn, m, n](TensorNode<T>& self) {
                                      if (xn->requires_grad) {
                                          auto& g = xn->grad_buffer();
                                          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                                      }
                                      if (bn->requires_grad) {
                                          auto& g = bn->grad_buffer();
                                          for (std::size_t r = 0; r < m; ++r)
                                              for (std::size_t c = 0; c < n; ++c) g[c] += self.grad[r * n + c];
                                      }
                                  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    // subgradient at exactly 0 is 0
    return detail::unary_elementwise<T>(
        x, "relu", [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
T stable_sigmoid(T v) {
    if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
    const T e = std::exp(v);
    return e / (T(1) + e);
}

template <typename T>
T stable_softplus(T v) {
    return v > T(0) ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    return detail::unary_elementwise<T>(
        x, "sigmoid", [](T v) { return stable_sigmoid(v); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
    return detail::unary_elementwise<T>(
        x, "softplus", [](T v) { return stable_softplus(v); }, [](T v, T) { return stable_sigmoid(v); });
}

/// Exact (erf) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    constexpr T inv_sqrt2 = T(0.70710678118654752440);
    constexpr T inv_sqrt_2pi = T(0.39894228040143267794);
    return detail::unary_elementwise<T>(
        x, "gelu", [](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
        [](T v, T) { return T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(T(-0.5) * v * v); });
}

// ---------------------------------------------------------------------------
// Row-wise ops

/// Softmax along each row, with per-row max subtraction.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
    detail::require_matrix(x, "softmax_rows");
    const std::size_t m = x.rows(), n = x.cols();
    std::vector<T> out(m * n);
    const auto& in = x.values();
    for (std::size_t r = 0; r < m; ++r) {
        const T* row = in.data() + r * n;
        T* o = out.data() + r * n;
        const T mx = *std::max_element(row, row + n);
        T total = 0;
        for (std::size_t c = 0; c < n; ++c) total += (o[c] = std::exp(row[c] - mx));
        const T inv = T(1) / total;
        for (std::size_t c = 0; c < n; ++c) o[c] *= inv;
    }
    auto* xn = x.node();
    return detail::make_result<T>(x.shape(), std::move(out), {x}, "softmax_rows", [xn, m, n](TensorNode<T>& self) {
        if (!xn->requires_grad) return;
        auto& gx = xn->grad_buffer();
        for (std::size_t r = 0; r < m; ++r) {
            const T* y = self.value.data() + r * n;
            const T* gy = self.grad.data() + r * n;
            T dot = 0;
            for (std::size_t c = 0; c < n; ++c) dot += y[c] * gy[c];
            for (std::size_t c = 0; c < n; ++c) gx[r * n + c] += y[c] * (gy[c] - dot);
        }
    });
}

/// Per-row normalization to zero mean / unit variance, then scale·x̂ + offset.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& offset, T eps = T(1e-5)) {
    detail::require_matrix(x, "layer_norm");
    const std::size_t m = x.rows(), n = x.cols();
    if (gain.size() != n || offset.size() != n) {
        throw ShapeError("layer_norm: parameters of length " + std::to_string(gain.size()) + "/" +
                         std::to_string(offset.size()) + " for rows of width " + std::to_string(n));
    }
    std::vector<T> out(m * n), xhat(m * n), inv_std(m);
    const auto& in = x.values();
    for (std::size_t r = 0; r < m; ++r) {
        const T* row = in.data() + r * n;
        T mean = 0;
        for (std::size_t c = 0; c < n; ++c) mean += row[c];
        mean /= T(n);
        T var = 0;
        for (std::size_t c = 0; c < n; ++c) var += (row[c] - mean) * (row[c] - mean);
        var /= T(n);
        inv_std[r] = T(1) / std::sqrt(var + eps);
        for (std::size_t c = 0; c < n; ++c) {
            xhat[r * n + c] = (row[c] - mean) * inv_std[r];
            out[r * n + c] = xhat[r * n + c] * gain.values()[c] + offset.values()[c];
        }
    }
    auto* xn = x.node();
    auto* gn = gain.node();
    auto* on = offset.node();
    return detail::make_result<T>(
        x.shape(), std::move(out), {x, gain, offset}, "layer_norm",
        [xn, gn, on, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](TensorNode<T>& self) {
            const auto& gy = self.grad;
            if (gn->requires_grad) {
                auto& g = gn->grad_buffer();
                for (std::size_t r = 0; r < m; ++r)
                    for (std::size_t c = 0; c < n; ++c) g[c] += gy[r * n + c] * xhat[r * n + c];
            }
            if (on->requires_grad) {
                auto& g = on->grad_buffer();
                for (std::size_t r = 0; r < m; ++r)
                    for (std::size_t c = 0; c < n; ++c) g[c] += gy[r * n + c];
            }
            if (xn->requires_grad) {
                auto& gx = xn->grad_buffer();
                std::vector<T> dxhat(n);
                for (std::size_t r = 0; r < m; ++r) {
                    T sum_d = 0, sum_dx = 0;
                    for (std::size_t c = 0; c < n; ++c) {
                        dxhat[c] = gy[r * n + c] * gn->value[c];
                        sum_d += dxhat[c];
                        sum_dx += dxhat[c] * xhat[r * n + c];
                    }
                    for (std::size_t c = 0; c < n; ++c) {
                        gx[r * n + c] += inv_std[r] / T(n) *
                                         (T(n) * dxhat[c] - sum_d - xhat[r * n + c] * sum_dx);
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Structural ops (always copy)

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t count) {
    detail::require_matrix(x, "slice_cols");
    const std::size_t m = x.rows(), n = x.cols();
    if (begin + count > n) {
        throw ShapeError("slice_cols: columns [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") out of range for " + shape_str(x.shape()));
    }
    std::vector<T> out(m * count);
    for (std::size_t r = 0; r < m; ++r)
        std::copy_n(x.values().data() + r * n + begin, count, out.data() + r * count);
    auto* xn = x.node();
    return detail::make_result<T>({m, count}, std::move(out), {x}, "slice_cols",
                                  [xn, m, n, begin, count](TensorNode<T>& self) {
                                      if (!xn->requires_grad) return;
                                      auto& g = xn->grad_buffer();
                                      for (std::size_t r = 0; r < m; ++r)
                                          for (std::size_t c = 0; c < count; ++c)
                                              g[r * n + begin + c] += self.grad[r * count + c];
                                  });
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const std::size_t m = parts.front().rows();
    std::vector<std::size_t> offsets;
    std::size_t n = 0;
    for (const auto& p : parts) {
        detail::require_matrix(p, "concat_cols");
        if (p.rows() != m) throw ShapeError("concat_cols: row count mismatch " + shape_str(p.shape()));
        offsets.push_back(n);
        n += p.cols();
    }
    std::vector<T> out(m * n);
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const std::size_t w = parts[k].cols();
        for (std::size_t r = 0; r < m; ++r)
            std::copy_n(parts[k].values().data() + r * w, w, out.data() + r * n + offsets[k]);
    }
    std::vector<TensorNode<T>*> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    return detail::make_result_list<T>({m, n}, std::move(out), parts, "concat_cols",
                                       [nodes, offsets, m, n](TensorNode<T>& self) {
                                           for (std::size_t k = 0; k < nodes.size(); ++k) {
                                               if (!nodes[k]->requires_grad) continue;
                                               auto& g = nodes[k]->grad_buffer();
                                               const std::size_t w = nodes[k]->shape[1];
                                               for (std::size_t r = 0; r < m; ++r)
                                                   for (std::size_t c = 0; c < w; ++c)
                                                       g[r * w + c] += self.grad[r * n + offsets[k] + c];
                                           }
                                       });
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    const std::size_t n = parts.front().cols();
    std::size_t m = 0;
    std::vector<std::size_t> offsets;
    std::vector<T> out;
    for (const auto& p : parts) {
        if (p.cols() != n) throw ShapeError("concat_rows: column count mismatch " + shape_str(p.shape()));
        offsets.push_back(out.size());
        out.insert(out.end(), p.values().begin(), p.values().end());
        m += p.rows();
    }
    std::vector<TensorNode<T>*> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    return detail::make_result_list<T>({m, n}, std::move(out), parts, "concat_rows",
                                       [nodes, offsets](TensorNode<T>& self) {
                                           for (std::size_t k = 0; k < nodes.size(); ++k) {
                                               if (!nodes[k]->requires_grad) continue;
                                               auto& g = nodes[k]->grad_buffer();
                                               for (std::size_t i = 0; i < g.size(); ++i)
                                                   g[i] += self.grad[offsets[k] + i];
                                           }
                                       });
}

/// Output row i is input row index[i]; indices may repeat.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::vector<std::size_t> index) {
    detail::require_matrix(x, "gather_rows");
    const std::size_t m = x.rows(), n = x.cols();
    std::vector<T> out(index.size() * n);
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= m) throw ShapeError("gather_rows: row " + std::to_string(index[i]) + " out of range");
        std::copy_n(x.values().data() + index[i] * n, n, out.data() + i * n);
    }
    auto* xn = x.node();
    const std::size_t k = index.size();
    return detail::make_result<T>({k, n}, std::move(out), {x}, "gather_rows",
                                  [xn, n, index = std::move(index)](TensorNode<T>& self) {
                                      if (!xn->requires_grad) return;
                                      auto& g = xn->grad_buffer();
                                      for (std::size_t i = 0; i < index.size(); ++i)
                                          for (std::size_t c = 0; c < n; ++c) g[index[i] * n + c] += self.grad[i * n + c];
                                  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (shape_numel(shape) != x.size()) {
        throw ShapeError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
    }
    auto* xn = x.node();
    return detail::make_result<T>(std::move(shape), x.values(), {x}, "reshape", [xn](TensorNode<T>& self) {
        if (!xn->requires_grad) return;
        auto& g = xn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

// ---------------------------------------------------------------------------
// Reductions and losses

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T total = 0;
    for (T v : x.values()) total += v;
    auto* xn = x.node();
    return detail::make_result<T>({1}, {total}, {x}, "sum", [xn](TensorNode<T>& self) {
        if (!xn->requires_grad) return;
        auto& g = xn->grad_buffer();
        for (auto& v : g) v += self.grad[0];
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    if (x.size() == 0) throw ShapeError("mean of empty tensor");
    return scale(sum(x), T(1) / T(x.size()));
}

/// Mean of squared differences.
template <typename T>
Tensor<T> mse(const Tensor<T>& prediction, const Tensor<T>& target) {
    const auto diff = sub(prediction, target);
    return mean(mul(diff, diff));
}

/// Binary cross-entropy of sigmoid(logit) against a {0,1} label, computed on the logit.
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logit, T label) {
    if (logit.size() != 1) throw ShapeError("bce_with_logits: expected a single logit");
    const T z = logit.values()[0];
    const T loss = stable_softplus(z) - label * z;
    auto* ln = logit.node();
    return detail::make_result<T>({1}, {loss}, {logit}, "bce_with_logits", [ln, label](TensorNode<T>& self) {
        if (!ln->requires_grad) return;
        ln->grad_buffer()[0] += self.grad[0] * (stable_sigmoid(ln->value[0]) - label);
    });
}

}  // namespace tdvit

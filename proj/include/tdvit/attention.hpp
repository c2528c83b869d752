#pragma once

// Multi-head self-attention, standard and time-aware. The time-aware variant
// gates query-key logits with a ReLU and scales them by a per-head temporal
// emphasis model (TEM), R̂ = 1 / (1 + exp(a·R − c)).

#include "tensor.hpp"

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace tdvit {

enum class AttentionMode { standard, time_aware };

template <typename T>
struct HeadWeights {
    Tensor<T> wq, wk, wv;  // each D×d
};

/// Unconstrained TEM parameters. `u_a`/`u_c` hold one entry per head and
/// `head` selects which entry this head owns; a = softplus(u_a), c = softplus(u_c).
template <typename T>
struct TemParams {
    Tensor<T> u_a, u_c;
    std::size_t head = 0;
    /// Fault injection for gradient-check self tests: negates the TEM backward.
    bool flip_backward_sign = false;

    T slope() const { return stable_softplus(u_a[head]); }
    T offset() const { return stable_softplus(u_c[head]); }

    static TemParams single(T u_a_value, T u_c_value, bool requires_grad = false) {
        return {Tensor<T>({1}, {u_a_value}, requires_grad), Tensor<T>({1}, {u_c_value}, requires_grad), 0, false};
    }
};

/// Inverse of softplus, for initializing TEM parameters from target (a, c).
inline double inverse_softplus(double y) { return y > 20.0 ? y : std::log(std::expm1(y)); }

/// Temporal emphasis model applied elementwise to a relative time-distance matrix.
template <typename T>
Tensor<T> tem_scale(const Tensor<T>& rel_time, const TemParams<T>& tem) {
    for (T v : rel_time.values()) {
        if (v < T(0)) throw std::invalid_argument("tem_scale: relative time distances must be nonnegative");
    }
    if (tem.head >= tem.u_a.size() || tem.head >= tem.u_c.size()) {
        throw ShapeError("tem_scale: head index out of range");
    }
    const std::size_t p = tem.head;
    const T a = tem.slope(), c = tem.offset();
    std::vector<T> out(rel_time.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(c - a * rel_time.values()[i]);
    auto* rn = rel_time.node();
    auto* an = tem.u_a.node();
    auto* cn = tem.u_c.node();
    const T sign = tem.flip_backward_sign ? T(-1) : T(1);
    return detail::make_result<T>(rel_time.shape(), std::move(out), {rel_time, tem.u_a, tem.u_c}, "tem_scale",
                                  [rn, an, cn, p, a, sign](TensorNode<T>& self) {
                                      // ∂R̂/∂z = s(1−s) with z = c − a·R
                                      T dz_total = 0, dz_r_total = 0;
                                      for (std::size_t i = 0; i < self.value.size(); ++i) {
                                          const T s = self.value[i];
                                          const T dz = self.grad[i] * s * (T(1) - s);
                                          dz_total += dz;
                                          dz_r_total += dz * rn->value[i];
                                      }
                                      if (an->requires_grad)
                                          an->grad_buffer()[p] += sign * -dz_r_total * stable_sigmoid(an->value[p]);
                                      if (cn->requires_grad)
                                          cn->grad_buffer()[p] += sign * dz_total * stable_sigmoid(cn->value[p]);
                                      if (rn->requires_grad) {
                                          auto& g = rn->grad_buffer();
                                          for (std::size_t i = 0; i < g.size(); ++i) {
                                              const T s = self.value[i];
                                              g[i] -= self.grad[i] * s * (T(1) - s) * a;
                                          }
                                      }
                                  });
}

namespace detail {

template <typename T>
Tensor<T> attend(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const Tensor<T>* tem_weights) {
    const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(q.cols()));
    Tensor<T> logits = matmul_transposed(q, k);
    if (tem_weights) logits = mul(relu(logits), *tem_weights);
    return matmul(softmax_rows(scale(logits, inv_sqrt_d)), v);
}

template <typename T>
void check_head_shapes(const Tensor<T>& h, const HeadWeights<T>& w) {
    require_matrix(h, "attention");
    for (const auto* m : {&w.wq, &w.wk, &w.wv}) {
        require_matrix(*m, "attention");
        if (m->rows() != h.cols()) {
            throw ShapeError("attention: head weights " + shape_str(m->shape()) + " do not accept tokens " +
                             shape_str(h.shape()));
        }
    }
    if (w.wq.cols() != w.wk.cols()) throw ShapeError("attention: query and key widths differ");
}

template <typename T>
void check_rel_time(const Tensor<T>& r, std::size_t n) {
    if (r.rank() != 2 || r.rows() != n || r.cols() != n) {
        throw ShapeError("attention: relative time matrix " + shape_str(r.shape()) + " for " + std::to_string(n) +
                         " tokens");
    }
}

}  // namespace detail

/// softmax(Q Kᵀ / √d) V for one head.
template <typename T>
Tensor<T> attention_head_standard(const Tensor<T>& h, const HeadWeights<T>& w) {
    detail::check_head_shapes(h, w);
    return detail::attend(matmul(h, w.wq), matmul(h, w.wk), matmul(h, w.wv), static_cast<const Tensor<T>*>(nullptr));
}

/// softmax((ReLU(Q Kᵀ) ∘ R̂) / √d) V for one head.
template <typename T>
Tensor<T> attention_head_time_aware(const Tensor<T>& h, const HeadWeights<T>& w, const TemParams<T>& tem,
                                    const Tensor<T>& rel_time) {
    detail::check_head_shapes(h, w);
    detail::check_rel_time(rel_time, h.rows());
    const Tensor<T> weights = tem_scale(rel_time, tem);
    return detail::attend(matmul(h, w.wq), matmul(h, w.wk), matmul(h, w.wv), &weights);
}

/// Heads share fused D×(heads·d) projections; head p owns column block p.
template <typename T>
struct MhaLayer {
    std::size_t heads = 0;
    std::size_t head_dim = 0;
    Tensor<T> wq, wk, wv;   // D × heads·d
    Tensor<T> wo;           // heads·d × D
    Tensor<T> bo;           // D
    Tensor<T> tem_ua, tem_uc;  // heads
    bool flip_tem_backward = false;

    HeadWeights<T> head(std::size_t p) const {
        return {slice_cols(wq, p * head_dim, head_dim), slice_cols(wk, p * head_dim, head_dim),
                slice_cols(wv, p * head_dim, head_dim)};
    }
    TemParams<T> tem(std::size_t p) const { return {tem_ua, tem_uc, p, flip_tem_backward}; }
};

/// Concatenated per-head outputs projected back to width D.
template <typename T>
Tensor<T> multi_head(const Tensor<T>& h, const MhaLayer<T>& layer, AttentionMode mode,
                     const std::optional<Tensor<T>>& rel_time = std::nullopt) {
    detail::require_matrix(h, "multi_head");
    if (mode == AttentionMode::time_aware && !rel_time) {
        throw std::invalid_argument("multi_head: time-aware mode requires a relative time matrix");
    }
    if (mode == AttentionMode::time_aware) detail::check_rel_time(*rel_time, h.rows());
    const std::size_t width = layer.heads * layer.head_dim;
    if (layer.wq.rows() != h.cols() || layer.wq.cols() != width || layer.wo.rows() != width) {
        throw ShapeError("multi_head: layer weights do not match tokens " + shape_str(h.shape()));
    }
    const Tensor<T> q = matmul(h, layer.wq), k = matmul(h, layer.wk), v = matmul(h, layer.wv);
    std::vector<Tensor<T>> outputs;
    outputs.reserve(layer.heads);
    for (std::size_t p = 0; p < layer.heads; ++p) {
        const std::size_t off = p * layer.head_dim;
        std::optional<Tensor<T>> weights;
        if (mode == AttentionMode::time_aware) weights = tem_scale(*rel_time, layer.tem(p));
        outputs.push_back(detail::attend(slice_cols(q, off, layer.head_dim), slice_cols(k, off, layer.head_dim),
                                         slice_cols(v, off, layer.head_dim), weights ? &*weights : nullptr));
    }
    Tensor<T> merged = layer.heads == 1 ? outputs.front() : concat_cols(outputs);
    Tensor<T> projected = matmul(merged, layer.wo);
    return layer.bo.defined() ? add_row_broadcast(projected, layer.bo) : projected;
}

}  // namespace tdvit

#pragma once

// Pre-norm ViT encoder over longitudinal token sequences with three temporal
// mechanisms, a CLS classification readout and a masked-autoencoder decoder.

#include "attention.hpp"
#include "embedding.hpp"
#include "tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace tdvit {

/// How elapsed time reaches the encoder.
///  positional: frame ordinal encodings TE(t − 1), blind to real intervals
///  te:         continuous time encodings TE(r_t) added to tokens
///  ta:         no additive time term; attention scaled by per-head TEMs
enum class TemporalMode { positional, te, ta };

inline std::string_view to_string(TemporalMode m) {
    switch (m) {
        case TemporalMode::positional: return "positional";
        case TemporalMode::te: return "te";
        case TemporalMode::ta: return "ta";
    }
    return "?";
}

inline TemporalMode parse_mode(std::string_view s) {
    if (s == "positional") return TemporalMode::positional;
    if (s == "te") return TemporalMode::te;
    if (s == "ta") return TemporalMode::ta;
    throw std::invalid_argument("unknown mode '" + std::string(s) + "' (expected positional, te or ta)");
}

struct ModelConfig {
    std::size_t image_height = 32;
    std::size_t image_width = 32;
    std::size_t channels = 3;
    std::size_t patch_size = 8;
    std::size_t dim = 64;
    std::size_t heads = 8;
    std::size_t head_dim = 8;
    std::size_t depth = 8;
    std::size_t mlp_hidden = 256;
    std::size_t decoder_depth = 2;
    TemporalMode mode = TemporalMode::ta;
    bool pairwise_rel_time = false;
    bool share_tem_across_layers = false;
    double tem_init_slope = 1.0;   // a, per month
    double tem_init_offset = 6.0;  // c

    std::size_t grid_h() const { return image_height / patch_size; }
    std::size_t grid_w() const { return image_width / patch_size; }
    std::size_t patches_per_frame() const { return grid_h() * grid_w(); }
    std::size_t patch_len() const { return patch_size * patch_size * channels; }

    void validate() const {
        if (patch_size == 0 || image_height % patch_size || image_width % patch_size) {
            throw std::invalid_argument("patch size " + std::to_string(patch_size) + " does not divide image " +
                                        std::to_string(image_height) + "x" + std::to_string(image_width));
        }
        if (heads * head_dim != dim) throw std::invalid_argument("heads * head_dim must equal dim");
        if (dim % 4 != 0) throw std::invalid_argument("dim must be divisible by 4");
        if (depth == 0 || heads == 0 || channels == 0 || mlp_hidden == 0) {
            throw std::invalid_argument("depth, heads, channels and mlp_hidden must be positive");
        }
    }

    /// Default encoder: 8 blocks of width 64, mlp_hidden = 4·dim.
    static ModelConfig standard(TemporalMode mode) {
        ModelConfig c;
        c.mode = mode;
        return c;
    }

    /// Small double-precision configuration used for gradient checks.
    static ModelConfig tiny(TemporalMode mode) {
        ModelConfig c;
        c.image_height = c.image_width = 8;
        c.channels = 1;
        c.patch_size = 4;
        c.dim = 8;
        c.heads = 2;
        c.head_dim = 4;
        c.depth = 1;
        c.mlp_hidden = 32;
        c.decoder_depth = 1;
        c.mode = mode;
        return c;
    }

    bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct EncoderBlock {
    Tensor<T> norm1_scale, norm1_offset;
    MhaLayer<T> attn;
    Tensor<T> norm2_scale, norm2_offset;
    Tensor<T> mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

template <typename T>
struct NamedTensor {
    std::string name;
    Tensor<T>* tensor;
};

template <typename T>
struct ModelParams {
    ModelConfig config;

    Tensor<T> patch_embed;  // patch_len × D
    Tensor<T> cls_token;    // 1 × D
    std::vector<EncoderBlock<T>> blocks;
    Tensor<T> norm_scale, norm_offset;

    bool has_classifier = false;
    Tensor<T> head_w;  // D × 1
    Tensor<T> head_b;  // 1

    bool has_decoder = false;
    Tensor<T> mask_token;  // 1 × D
    Tensor<T> dec_embed_w, dec_embed_b;
    std::vector<EncoderBlock<T>> dec_blocks;
    Tensor<T> dec_norm_scale, dec_norm_offset;
    Tensor<T> dec_pred_w, dec_pred_b;  // D × patch_len, patch_len

    /// Every trainable tensor, in a fixed order. With shared TEMs only the first
    /// layer's TEM tensors are listed.
    std::vector<NamedTensor<T>> named_parameters() {
        std::vector<NamedTensor<T>> out;
        out.push_back({"patch_embed", &patch_embed});
        out.push_back({"cls_token", &cls_token});
        append_blocks(out, "enc", blocks);
        out.push_back({"norm.scale", &norm_scale});
        out.push_back({"norm.offset", &norm_offset});
        if (has_classifier) {
            out.push_back({"head.weight", &head_w});
            out.push_back({"head.bias", &head_b});
        }
        if (has_decoder) {
            out.push_back({"mask_token", &mask_token});
            out.push_back({"dec.embed.weight", &dec_embed_w});
            out.push_back({"dec.embed.bias", &dec_embed_b});
            append_blocks(out, "dec", dec_blocks);
            out.push_back({"dec.norm.scale", &dec_norm_scale});
            out.push_back({"dec.norm.offset", &dec_norm_offset});
            out.push_back({"dec.pred.weight", &dec_pred_w});
            out.push_back({"dec.pred.bias", &dec_pred_b});
        }
        return out;
    }

    /// Points every layer's TEM at the first layer's when sharing is enabled.
    void relink_shared_tem() {
        if (!config.share_tem_across_layers) return;
        for (auto* stack : {&blocks, &dec_blocks}) {
            for (std::size_t l = 1; l < stack->size(); ++l) {
                (*stack)[l].attn.tem_ua = (*stack)[0].attn.tem_ua;
                (*stack)[l].attn.tem_uc = (*stack)[0].attn.tem_uc;
            }
        }
    }

    void set_tem_fault(bool flip) {
        for (auto* stack : {&blocks, &dec_blocks})
            for (auto& b : *stack) b.attn.flip_tem_backward = flip;
    }

    /// Deep copy into fresh leaves, optionally converting precision.
    template <typename U = T>
    ModelParams<U> clone() const {
        ModelParams<U> out;
        out.config = config;
        out.has_classifier = has_classifier;
        out.has_decoder = has_decoder;
        auto cp = [](const Tensor<T>& t) {
            if (!t.defined()) return Tensor<U>();
            return Tensor<U>(t.shape(), std::vector<U>(t.values().begin(), t.values().end()), t.requires_grad());
        };
        auto cp_blocks = [&](const std::vector<EncoderBlock<T>>& src) {
            std::vector<EncoderBlock<U>> dst;
            for (const auto& b : src) {
                EncoderBlock<U> d;
                d.norm1_scale = cp(b.norm1_scale);
                d.norm1_offset = cp(b.norm1_offset);
                d.attn.heads = b.attn.heads;
                d.attn.head_dim = b.attn.head_dim;
                d.attn.wq = cp(b.attn.wq);
                d.attn.wk = cp(b.attn.wk);
                d.attn.wv = cp(b.attn.wv);
                d.attn.wo = cp(b.attn.wo);
                d.attn.bo = cp(b.attn.bo);
                d.attn.tem_ua = cp(b.attn.tem_ua);
                d.attn.tem_uc = cp(b.attn.tem_uc);
                d.attn.flip_tem_backward = b.attn.flip_tem_backward;
                d.norm2_scale = cp(b.norm2_scale);
                d.norm2_offset = cp(b.norm2_offset);
                d.mlp_w1 = cp(b.mlp_w1);
                d.mlp_b1 = cp(b.mlp_b1);
                d.mlp_w2 = cp(b.mlp_w2);
                d.mlp_b2 = cp(b.mlp_b2);
                dst.push_back(std::move(d));
            }
            return dst;
        };
        out.patch_embed = cp(patch_embed);
        out.cls_token = cp(cls_token);
        out.blocks = cp_blocks(blocks);
        out.norm_scale = cp(norm_scale);
        out.norm_offset = cp(norm_offset);
        out.head_w = cp(head_w);
        out.head_b = cp(head_b);
        out.mask_token = cp(mask_token);
        out.dec_embed_w = cp(dec_embed_w);
        out.dec_embed_b = cp(dec_embed_b);
        out.dec_blocks = cp_blocks(dec_blocks);
        out.dec_norm_scale = cp(dec_norm_scale);
        out.dec_norm_offset = cp(dec_norm_offset);
        out.dec_pred_w = cp(dec_pred_w);
        out.dec_pred_b = cp(dec_pred_b);
        out.relink_shared_tem();
        return out;
    }

   private:
    void append_blocks(std::vector<NamedTensor<T>>& out, const std::string& prefix, std::vector<EncoderBlock<T>>& stack) {
        for (std::size_t l = 0; l < stack.size(); ++l) {
            auto& b = stack[l];
            const std::string p = prefix + "." + std::to_string(l) + ".";
            out.push_back({p + "norm1.scale", &b.norm1_scale});
            out.push_back({p + "norm1.offset", &b.norm1_offset});
            out.push_back({p + "attn.wq", &b.attn.wq});
            out.push_back({p + "attn.wk", &b.attn.wk});
            out.push_back({p + "attn.wv", &b.attn.wv});
            out.push_back({p + "attn.wo", &b.attn.wo});
            out.push_back({p + "attn.bo", &b.attn.bo});
            if (config.mode == TemporalMode::ta && (l == 0 || !config.share_tem_across_layers)) {
                out.push_back({p + "attn.tem_ua", &b.attn.tem_ua});
                out.push_back({p + "attn.tem_uc", &b.attn.tem_uc});
            }
            out.push_back({p + "norm2.scale", &b.norm2_scale});
            out.push_back({p + "norm2.offset", &b.norm2_offset});
            out.push_back({p + "mlp.w1", &b.mlp_w1});
            out.push_back({p + "mlp.b1", &b.mlp_b1});
            out.push_back({p + "mlp.w2", &b.mlp_w2});
            out.push_back({p + "mlp.b2", &b.mlp_b2});
        }
    }
};

/// Parameters exempt from weight decay: normalization, CLS/mask tokens, TEMs.
inline bool is_decay_exempt(std::string_view name) {
    return name.find("norm") != std::string_view::npos || name == "cls_token" || name == "mask_token" ||
           name.find("tem_") != std::string_view::npos;
}

// ---------------------------------------------------------------------------
// Initialization

namespace detail {

class Initializer {
   public:
    explicit Initializer(std::uint64_t seed) : rng_(seed) {}

    template <typename T>
    Tensor<T> uniform(std::size_t rows, std::size_t cols, std::size_t fan_in) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        std::vector<T> v(rows * cols);
        for (auto& x : v) x = static_cast<T>(dist(rng_));
        return Tensor<T>({rows, cols}, std::move(v), true);
    }
    template <typename T>
    Tensor<T> normal(std::size_t rows, std::size_t cols, double stddev) {
        std::normal_distribution<double> dist(0.0, stddev);
        std::vector<T> v(rows * cols);
        for (auto& x : v) x = static_cast<T>(dist(rng_));
        return Tensor<T>({rows, cols}, std::move(v), true);
    }

   private:
    std::mt19937_64 rng_;
};

template <typename T>
EncoderBlock<T> init_block(const ModelConfig& c, Initializer& init) {
    const std::size_t width = c.heads * c.head_dim;
    EncoderBlock<T> b;
    b.norm1_scale = Tensor<T>::full({c.dim}, T(1), true);
    b.norm1_offset = Tensor<T>::zeros({c.dim}, true);
    b.attn.heads = c.heads;
    b.attn.head_dim = c.head_dim;
    b.attn.wq = init.uniform<T>(c.dim, width, c.dim);
    b.attn.wk = init.uniform<T>(c.dim, width, c.dim);
    b.attn.wv = init.uniform<T>(c.dim, width, c.dim);
    b.attn.wo = init.uniform<T>(width, c.dim, width);
    b.attn.bo = Tensor<T>::zeros({c.dim}, true);
    if (c.mode == TemporalMode::ta) {
        b.attn.tem_ua = Tensor<T>::full({c.heads}, static_cast<T>(inverse_softplus(c.tem_init_slope)), true);
        b.attn.tem_uc = Tensor<T>::full({c.heads}, static_cast<T>(inverse_softplus(c.tem_init_offset)), true);
    }
    b.norm2_scale = Tensor<T>::full({c.dim}, T(1), true);
    b.norm2_offset = Tensor<T>::zeros({c.dim}, true);
    b.mlp_w1 = init.uniform<T>(c.dim, c.mlp_hidden, c.dim);
    b.mlp_b1 = Tensor<T>::zeros({c.mlp_hidden}, true);
    b.mlp_w2 = init.uniform<T>(c.mlp_hidden, c.dim, c.mlp_hidden);
    b.mlp_b2 = Tensor<T>::zeros({c.dim}, true);
    return b;
}

}  // namespace detail

/// Deterministic per seed. Linear weights ~ U(±1/√fan_in), biases 0,
/// normalization scale 1 / offset 0, CLS and mask tokens ~ N(0, 0.02),
/// classifier zero-initialized.
template <typename T>
ModelParams<T> init_weights(const ModelConfig& config, std::uint64_t seed, bool with_classifier = true,
                            bool with_decoder = true) {
    config.validate();
    detail::Initializer init(seed);
    ModelParams<T> p;
    p.config = config;
    p.patch_embed = init.uniform<T>(config.patch_len(), config.dim, config.patch_len());
    p.cls_token = init.normal<T>(1, config.dim, 0.02);
    for (std::size_t l = 0; l < config.depth; ++l) p.blocks.push_back(detail::init_block<T>(config, init));
    p.norm_scale = Tensor<T>::full({config.dim}, T(1), true);
    p.norm_offset = Tensor<T>::zeros({config.dim}, true);

    p.has_classifier = with_classifier;
    p.head_w = Tensor<T>::zeros({config.dim, 1}, true);
    p.head_b = Tensor<T>::zeros({1}, true);

    // the decoder is always drawn so encoder weights do not depend on its presence
    p.has_decoder = with_decoder;
    p.mask_token = init.normal<T>(1, config.dim, 0.02);
    p.dec_embed_w = init.uniform<T>(config.dim, config.dim, config.dim);
    p.dec_embed_b = Tensor<T>::zeros({config.dim}, true);
    for (std::size_t l = 0; l < config.decoder_depth; ++l) p.dec_blocks.push_back(detail::init_block<T>(config, init));
    p.dec_norm_scale = Tensor<T>::full({config.dim}, T(1), true);
    p.dec_norm_offset = Tensor<T>::zeros({config.dim}, true);
    p.dec_pred_w = init.uniform<T>(config.dim, config.patch_len(), config.dim);
    p.dec_pred_b = Tensor<T>::zeros({config.patch_len()}, true);
    p.relink_shared_tem();
    return p;
}

// ---------------------------------------------------------------------------
// Forward passes

namespace detail {

template <typename T>
void check_sequence(const ImageSequence& seq, const ModelConfig& c) {
    seq.validate();
    const auto& f = seq.frames.front();
    if (f.height != c.image_height || f.width != c.image_width || f.channels != c.channels) {
        throw std::invalid_argument("sequence frames are " + std::to_string(f.height) + "x" + std::to_string(f.width) +
                                    "x" + std::to_string(f.channels) + " but the model expects " +
                                    std::to_string(c.image_height) + "x" + std::to_string(c.image_width) + "x" +
                                    std::to_string(c.channels));
    }
}

/// All patches of a sequence stacked frame-major: N × patch_len.
template <typename T>
Tensor<T> sequence_patches(const ImageSequence& seq, std::size_t patch) {
    std::vector<Tensor<T>> frames;
    for (const auto& f : seq.frames) frames.push_back(patchify<T>(f, patch));
    return frames.size() == 1 ? frames.front() : concat_rows(frames);
}

/// Constant (N+1)×D offsets added to [CLS; tokens]: 2D patch positions for
/// patch tokens plus the mode's temporal encoding. CLS belongs to the latest frame.
template <typename T>
Tensor<T> additive_encodings(const ImageSequence& seq, const ModelConfig& c) {
    const std::size_t frames = seq.length(), per = c.patches_per_frame(), d = c.dim;
    const Tensor<T> pos = positional_encoding_2d<T>(c.grid_h(), c.grid_w(), d);
    std::vector<std::vector<double>> temporal(frames);
    if (c.mode != TemporalMode::ta) {
        const auto rel = rel_time_vector(seq.times).r;
        for (std::size_t t = 0; t < frames; ++t) {
            temporal[t] = time_encoding(c.mode == TemporalMode::te ? rel[t] : static_cast<double>(t), d);
        }
    }
    std::vector<T> out((frames * per + 1) * d, T(0));
    if (c.mode != TemporalMode::ta) {
        for (std::size_t j = 0; j < d; ++j) out[j] = static_cast<T>(temporal[frames - 1][j]);
    }
    for (std::size_t t = 0; t < frames; ++t)
        for (std::size_t k = 0; k < per; ++k) {
            T* row = out.data() + (1 + t * per + k) * d;
            for (std::size_t j = 0; j < d; ++j) {
                row[j] = pos.values()[k * d + j] + (temporal[t].empty() ? T(0) : static_cast<T>(temporal[t][j]));
            }
        }
    return Tensor<T>({frames * per + 1, d}, std::move(out));
}

/// Frame of each row of [CLS; tokens], CLS mapped to the latest frame.
inline std::vector<std::size_t> token_frames(std::size_t frames, std::size_t per) {
    std::vector<std::size_t> out{frames - 1};
    for (std::size_t t = 0; t < frames; ++t) out.insert(out.end(), per, t);
    return out;
}

template <typename T>
Tensor<T> mlp(const Tensor<T>& x, const EncoderBlock<T>& b) {
    Tensor<T> h = gelu(add_row_broadcast(matmul(x, b.mlp_w1), b.mlp_b1));
    return add_row_broadcast(matmul(h, b.mlp_w2), b.mlp_b2);
}

template <typename T>
Tensor<T> encoder_block(const Tensor<T>& x, const EncoderBlock<T>& b, AttentionMode mode,
                        const std::optional<Tensor<T>>& rel_time) {
    Tensor<T> h = add(x, multi_head(layer_norm(x, b.norm1_scale, b.norm1_offset), b.attn, mode, rel_time));
    return add(h, mlp(layer_norm(h, b.norm2_scale, b.norm2_offset), b));
}

template <typename T>
Tensor<T> run_stack(Tensor<T> x, const std::vector<EncoderBlock<T>>& stack, const ModelConfig& c,
                    const std::vector<double>& times, const std::vector<std::size_t>& rows_frame) {
    std::optional<Tensor<T>> rel_time;
    AttentionMode mode = AttentionMode::standard;
    if (c.mode == TemporalMode::ta) {
        mode = AttentionMode::time_aware;
        rel_time = rel_time_matrix_for_tokens(times, rows_frame, c.pairwise_rel_time).template to_tensor<T>();
    }
    for (const auto& b : stack) x = encoder_block(x, b, mode, rel_time);
    return x;
}

/// Embedded [CLS; tokens] with encodings added, before any row selection.
template <typename T>
Tensor<T> embed_sequence(const ImageSequence& seq, const ModelParams<T>& p) {
    const Tensor<T> embedded = embed_patches(sequence_patches<T>(seq, p.config.patch_size), p.patch_embed);
    return add(concat_rows<T>({p.cls_token, embedded}), additive_encodings<T>(seq, p.config));
}

}  // namespace detail

/// Relative-time matrix the encoder uses for a full sequence (row 0 is CLS).
inline RelTimeMatrix encoder_rel_time(const ImageSequence& seq, const ModelConfig& c) {
    return rel_time_matrix_for_tokens(seq.times, detail::token_frames(seq.length(), c.patches_per_frame()),
                                      c.pairwise_rel_time);
}

/// Classifier logit (1×1) for a sequence.
template <typename T>
Tensor<T> classify_logit(const ImageSequence& seq, const ModelParams<T>& p) {
    const auto& c = p.config;
    detail::check_sequence<T>(seq, c);
    if (!p.has_classifier) throw std::invalid_argument("checkpoint missing classifier head");
    Tensor<T> x = detail::embed_sequence(seq, p);
    x = detail::run_stack(x, p.blocks, c, seq.times, detail::token_frames(seq.length(), c.patches_per_frame()));
    x = layer_norm(x, p.norm_scale, p.norm_offset);
    const Tensor<T> cls = gather_rows(x, {0});
    return add(matmul(cls, p.head_w), reshape(p.head_b, {1, 1}));
}

/// Malignancy probability in (0, 1).
template <typename T>
double forward_classify(const ImageSequence& seq, const ModelParams<T>& p) {
    NoGradGuard no_grad;
    return static_cast<double>(stable_sigmoid(classify_logit(seq, p).item()));
}

// ---------------------------------------------------------------------------
// Masked autoencoding

struct MaskPlan {
    std::vector<bool> masked;  // per patch token, frame-major
    double ratio = 0.0;

    std::size_t count() const { return static_cast<std::size_t>(std::count(masked.begin(), masked.end(), true)); }
};

inline std::size_t masked_count(std::size_t tokens, double ratio) {
    // guard against ratio·n landing a rounding step above an integer
    return static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(tokens) - 1e-9));
}

/// Uniformly random subset of ceil(ratio·T·P) patch tokens, across all frames.
template <typename Rng>
MaskPlan sample_mask(std::size_t frames, std::size_t per_frame, double ratio, Rng& rng) {
    if (!(ratio > 0.0 && ratio < 1.0)) throw std::invalid_argument("masking ratio must lie in (0, 1)");
    const std::size_t n = frames * per_frame;
    const std::size_t k = masked_count(n, ratio);
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = 0; i < k; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, n - 1);
        std::swap(idx[i], idx[pick(rng)]);
    }
    MaskPlan plan;
    plan.ratio = ratio;
    plan.masked.assign(n, false);
    for (std::size_t i = 0; i < k; ++i) plan.masked[idx[i]] = true;
    return plan;
}

template <typename T>
struct MaeOutput {
    Tensor<T> loss;
    Tensor<T> predictions;      // all N patch predictions (rows follow token order)
    Tensor<T> reconstructions;  // masked rows only
    std::vector<std::size_t> masked_tokens;
};

/// Each patch standardized to zero mean and unit variance.
template <typename T>
Tensor<T> normalized_patch_targets(const Tensor<T>& patches) {
    const std::size_t m = patches.rows(), n = patches.cols();
    std::vector<T> out(patches.values());
    for (std::size_t r = 0; r < m; ++r) {
        T* row = out.data() + r * n;
        T mu = 0, var = 0;
        for (std::size_t c = 0; c < n; ++c) mu += row[c];
        mu /= T(n);
        for (std::size_t c = 0; c < n; ++c) var += (row[c] - mu) * (row[c] - mu);
        var /= T(n);
        const T inv = T(1) / std::sqrt(var + T(1e-6));
        for (std::size_t c = 0; c < n; ++c) row[c] = (row[c] - mu) * inv;
    }
    return Tensor<T>(patches.shape(), std::move(out));
}

/// Encoder sees visible tokens only; the decoder sees encoded visible tokens
/// plus mask tokens, all carrying their positional/time encodings. Loss is the
/// MSE over masked patches against per-patch normalized pixels.
template <typename T>
MaeOutput<T> forward_mae(const ImageSequence& seq, const ModelParams<T>& p, const MaskPlan& plan) {
    const auto& c = p.config;
    detail::check_sequence<T>(seq, c);
    if (!p.has_decoder) throw std::invalid_argument("checkpoint missing decoder");
    const std::size_t per = c.patches_per_frame(), n = seq.length() * per;
    if (plan.masked.size() != n) {
        throw std::invalid_argument("mask plan covers " + std::to_string(plan.masked.size()) + " tokens, sequence has " +
                                    std::to_string(n));
    }
    std::vector<std::size_t> visible, masked;
    for (std::size_t i = 0; i < n; ++i) (plan.masked[i] ? masked : visible).push_back(i);
    if (visible.empty()) throw std::invalid_argument("mask plan hides every token");
    if (masked.empty()) throw std::invalid_argument("mask plan hides no token");

    const auto all_frames = detail::token_frames(seq.length(), per);
    const Tensor<T> patches = detail::sequence_patches<T>(seq, c.patch_size);
    const Tensor<T> encodings = detail::additive_encodings<T>(seq, c);
    const Tensor<T> embedded =
        add(concat_rows<T>({p.cls_token, embed_patches(patches, p.patch_embed)}), encodings);

    std::vector<std::size_t> keep{0};
    std::vector<std::size_t> keep_frames{all_frames[0]};
    for (std::size_t i : visible) {
        keep.push_back(i + 1);
        keep_frames.push_back(all_frames[i + 1]);
    }
    Tensor<T> x = detail::run_stack(gather_rows(embedded, keep), p.blocks, c, seq.times, keep_frames);
    x = layer_norm(x, p.norm_scale, p.norm_offset);

    // decoder over the full [CLS; tokens] layout
    const Tensor<T> y = add_row_broadcast(matmul(x, p.dec_embed_w), p.dec_embed_b);
    const Tensor<T> fill = gather_rows(p.mask_token, std::vector<std::size_t>(masked.size(), 0));
    std::vector<std::size_t> order(n + 1);
    order[0] = 0;
    for (std::size_t v = 0; v < visible.size(); ++v) order[visible[v] + 1] = v + 1;
    for (std::size_t m = 0; m < masked.size(); ++m) order[masked[m] + 1] = visible.size() + 1 + m;
    Tensor<T> z = add(gather_rows(concat_rows<T>({y, fill}), order), encodings);
    z = detail::run_stack(z, p.dec_blocks, c, seq.times, all_frames);
    z = layer_norm(z, p.dec_norm_scale, p.dec_norm_offset);

    std::vector<std::size_t> token_rows(n);
    std::iota(token_rows.begin(), token_rows.end(), std::size_t{1});
    MaeOutput<T> out;
    out.predictions = add_row_broadcast(matmul(gather_rows(z, token_rows), p.dec_pred_w), p.dec_pred_b);
    out.reconstructions = gather_rows(out.predictions, masked);
    const Tensor<T> targets = normalized_patch_targets(gather_rows(patches, masked));
    out.loss = mse(out.reconstructions, targets);
    out.masked_tokens = std::move(masked);
    return out;
}

}  // namespace tdvit

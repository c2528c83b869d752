#pragma once

// Token extraction from longitudinal image sequences plus the time-distance
// constructs: relative time vectors/matrices and sinusoidal encodings.

#include "tensor.hpp"

#include <cmath>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace tdvit {

/// One H×W×C pixel grid, stored row-major with channels innermost.
struct Frame {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 0;
    std::vector<float> pixels;

    Frame() = default;
    Frame(std::size_t h, std::size_t w, std::size_t c, float fill = 0.0f)
        : height(h), width(w), channels(c), pixels(h * w * c, fill) {}

    float& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * channels + c]; }
    float at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * channels + c]; }
    bool operator==(const Frame&) const = default;
};

enum class Label : int { benign = 0, malignant = 1 };

/// T frames with acquisition times in months.
struct ImageSequence {
    std::vector<Frame> frames;
    std::vector<double> times;
    std::optional<Label> label;

    std::size_t length() const { return frames.size(); }

    void validate() const {
        if (frames.empty()) throw std::invalid_argument("image sequence has no frames");
        if (frames.size() != times.size()) {
            throw std::invalid_argument("image sequence has " + std::to_string(frames.size()) + " frames but " +
                                        std::to_string(times.size()) + " times");
        }
        for (const auto& f : frames) {
            if (f.height != frames[0].height || f.width != frames[0].width || f.channels != frames[0].channels) {
                throw std::invalid_argument("frames of one sequence must share H, W, C");
            }
            if (f.pixels.size() != f.height * f.width * f.channels) {
                throw std::invalid_argument("frame pixel buffer does not match its extents");
            }
        }
        for (std::size_t i = 1; i < times.size(); ++i) {
            if (!(times[i] > times[i - 1])) throw std::invalid_argument("acquisition times must strictly increase");
        }
    }
};

/// N = T·P embedded tokens with their temporal index (0-based frame number).
template <typename T>
struct TokenSequence {
    Tensor<T> tokens;
    std::vector<std::size_t> frame_index;
    std::size_t tokens_per_frame = 0;

    std::size_t frames() const { return tokens_per_frame ? frame_index.size() / tokens_per_frame : 0; }
};

// ---------------------------------------------------------------------------
// Patches

/// Flattens a frame into (H/p)·(W/p) patches of length p·p·C, patches in
/// row-major grid order, pixels within a patch row-major with channels innermost.
template <typename T>
Tensor<T> patchify(const Frame& frame, std::size_t patch) {
    if (patch == 0 || frame.height % patch != 0 || frame.width % patch != 0) {
        throw std::invalid_argument("patch size " + std::to_string(patch) + " does not divide frame " +
                                    std::to_string(frame.height) + "x" + std::to_string(frame.width));
    }
    const std::size_t gh = frame.height / patch, gw = frame.width / patch, c = frame.channels;
    const std::size_t len = patch * patch * c;
    std::vector<T> out(gh * gw * len);
    for (std::size_t py = 0; py < gh; ++py)
        for (std::size_t px = 0; px < gw; ++px) {
            T* dst = out.data() + (py * gw + px) * len;
            for (std::size_t y = 0; y < patch; ++y)
                for (std::size_t x = 0; x < patch; ++x)
                    for (std::size_t ch = 0; ch < c; ++ch)
                        *dst++ = static_cast<T>(frame.at(py * patch + y, px * patch + x, ch));
        }
    return Tensor<T>({gh * gw, len}, std::move(out));
}

/// Inverse of patchify.
template <typename T>
Frame unpatchify(const Tensor<T>& patches, std::size_t height, std::size_t width, std::size_t channels,
                 std::size_t patch) {
    const std::size_t gh = height / patch, gw = width / patch, len = patch * patch * channels;
    if (patches.rows() != gh * gw || patches.cols() != len) {
        throw ShapeError("unpatchify: patch matrix " + shape_str(patches.shape()) + " does not fit frame");
    }
    Frame f(height, width, channels);
    const auto& v = patches.values();
    for (std::size_t py = 0; py < gh; ++py)
        for (std::size_t px = 0; px < gw; ++px) {
            const T* src = v.data() + (py * gw + px) * len;
            for (std::size_t y = 0; y < patch; ++y)
                for (std::size_t x = 0; x < patch; ++x)
                    for (std::size_t ch = 0; ch < channels; ++ch)
                        f.at(py * patch + y, px * patch + x, ch) = static_cast<float>(*src++);
        }
    return f;
}

/// Linear projection of patches into token space (no bias).
template <typename T>
Tensor<T> embed_patches(const Tensor<T>& patches, const Tensor<T>& w_embed) {
    return matmul(patches, w_embed);
}

// ---------------------------------------------------------------------------
// Time distances

struct RelTimeVector {
    std::vector<double> r;
};

inline void validate_times(const std::vector<double>& times) {
    if (times.empty()) throw std::invalid_argument("acquisition times are empty");
    for (std::size_t i = 1; i < times.size(); ++i) {
        if (!(times[i] > times[i - 1])) {
            throw std::invalid_argument("acquisition times must strictly increase (index " + std::to_string(i) + ")");
        }
    }
}

/// r_t = |t_T − t_t|: months from each acquisition to the latest one.
inline RelTimeVector rel_time_vector(const std::vector<double>& times) {
    validate_times(times);
    RelTimeVector out;
    out.r.reserve(times.size());
    for (double t : times) out.r.push_back(std::abs(times.back() - t));
    return out;
}

/// N×N matrix of relative time distances, row-major.
struct RelTimeMatrix {
    std::size_t n = 0;
    std::vector<double> values;

    double at(std::size_t i, std::size_t j) const { return values[i * n + j]; }

    template <typename T>
    Tensor<T> to_tensor() const {
        return Tensor<T>({n, n}, std::vector<T>(values.begin(), values.end()));
    }
};

/// R for an arbitrary token list given each token's frame. By default
/// R[i][j] = |t_T − t_frame(i)| for every j; the pairwise variant uses
/// |t_frame(i) − t_frame(j)| instead.
inline RelTimeMatrix rel_time_matrix_for_tokens(const std::vector<double>& times,
                                                const std::vector<std::size_t>& token_frame,
                                                bool pairwise = false) {
    validate_times(times);
    RelTimeMatrix out;
    out.n = token_frame.size();
    out.values.resize(out.n * out.n);
    for (std::size_t i = 0; i < out.n; ++i) {
        if (token_frame[i] >= times.size()) throw std::invalid_argument("token frame index out of range");
        const double ti = times[token_frame[i]];
        for (std::size_t j = 0; j < out.n; ++j) {
            out.values[i * out.n + j] = pairwise ? std::abs(ti - times[token_frame[j]]) : std::abs(times.back() - ti);
        }
    }
    return out;
}

inline RelTimeMatrix rel_time_matrix(const std::vector<double>& times, std::size_t tokens_per_frame,
                                     bool pairwise = false) {
    if (tokens_per_frame == 0) throw std::invalid_argument("tokens per frame must be at least 1");
    validate_times(times);
    std::vector<std::size_t> frame;
    for (std::size_t t = 0; t < times.size(); ++t) frame.insert(frame.end(), tokens_per_frame, t);
    return rel_time_matrix_for_tokens(times, frame, pairwise);
}

// ---------------------------------------------------------------------------
// Sinusoidal encodings

inline double encoding_frequency(std::size_t pair, std::size_t dim) {
    return 1.0 / std::pow(10000.0, static_cast<double>(2 * pair) / static_cast<double>(dim));
}

/// TE(r)[2i] = sin(r / 10000^(2i/D)), TE(r)[2i+1] = cos(r / 10000^(2i/D)).
inline std::vector<double> time_encoding(double r, std::size_t dim) {
    if (dim < 2 || dim % 2 != 0) throw std::invalid_argument("time encoding dimension must be even, got " + std::to_string(dim));
    std::vector<double> out(dim);
    for (std::size_t i = 0; i < dim / 2; ++i) {
        const double angle = r * encoding_frequency(i, dim);
        out[2 * i] = std::sin(angle);
        out[2 * i + 1] = std::cos(angle);
    }
    return out;
}

/// D×D block-diagonal rotation M_k with M_k·TE(r) == TE(r + k).
inline std::vector<double> time_shift_operator(double k, std::size_t dim) {
    if (dim < 2 || dim % 2 != 0) throw std::invalid_argument("time encoding dimension must be even, got " + std::to_string(dim));
    std::vector<double> m(dim * dim, 0.0);
    for (std::size_t i = 0; i < dim / 2; ++i) {
        const double angle = k * encoding_frequency(i, dim);
        const double c = std::cos(angle), s = std::sin(angle);
        const std::size_t a = 2 * i, b = 2 * i + 1;
        m[a * dim + a] = c;
        m[a * dim + b] = s;
        m[b * dim + a] = -s;
        m[b * dim + b] = c;
    }
    return m;
}

/// Adds one encoding row per temporal index to that frame's tokens.
template <typename T>
Tensor<T> frame_encoding_matrix(const std::vector<std::size_t>& frame_index, const std::vector<double>& per_frame_value,
                                std::size_t dim) {
    std::vector<T> out;
    out.reserve(frame_index.size() * dim);
    for (std::size_t f : frame_index) {
        const auto te = time_encoding(per_frame_value.at(f), dim);
        out.insert(out.end(), te.begin(), te.end());
    }
    return Tensor<T>({frame_index.size(), dim}, std::move(out));
}

template <typename T>
TokenSequence<T> add_time_encodings(const TokenSequence<T>& seq, const RelTimeVector& r) {
    if (seq.frames() != r.r.size()) {
        throw std::invalid_argument("token sequence has " + std::to_string(seq.frames()) + " frames but " +
                                    std::to_string(r.r.size()) + " time distances");
    }
    TokenSequence<T> out = seq;
    out.tokens = add(seq.tokens, frame_encoding_matrix<T>(seq.frame_index, r.r, seq.tokens.cols()));
    return out;
}

/// Fixed 2D patch encodings: first D/2 dims encode the patch row, last D/2 the column.
template <typename T>
Tensor<T> positional_encoding_2d(std::size_t grid_h, std::size_t grid_w, std::size_t dim) {
    if (dim == 0 || dim % 4 != 0) throw std::invalid_argument("2D positional encoding needs D divisible by 4, got " + std::to_string(dim));
    const std::size_t half = dim / 2;
    std::vector<T> out;
    out.reserve(grid_h * grid_w * dim);
    for (std::size_t y = 0; y < grid_h; ++y)
        for (std::size_t x = 0; x < grid_w; ++x) {
            const auto row = time_encoding(static_cast<double>(y), half);
            const auto col = time_encoding(static_cast<double>(x), half);
            out.insert(out.end(), row.begin(), row.end());
            out.insert(out.end(), col.begin(), col.end());
        }
    return Tensor<T>({grid_h * grid_w, dim}, std::move(out));
}

}  // namespace tdvit

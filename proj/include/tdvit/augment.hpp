#pragma once

// Sequence-level augmentation. One geometric draw is shared by every frame of
// a sequence so growth between frames is preserved.

#include "embedding.hpp"

#include <algorithm>
#include <random>

namespace tdvit {

struct AugmentDraw {
    std::size_t crop_y = 0;  // offset into the reflect-padded frame, in [0, 2·pad]
    std::size_t crop_x = 0;
    bool flip = false;
    double shift = 0.0;  // added to every pixel before clamping

    static AugmentDraw identity(std::size_t pad = 4) { return {pad, pad, false, 0.0}; }
};

template <typename Rng>
AugmentDraw draw_augment(Rng& rng, std::size_t pad = 4, double max_shift = 0.1) {
    std::uniform_int_distribution<std::size_t> offset(0, 2 * pad);
    AugmentDraw d;
    d.crop_y = offset(rng);
    d.crop_x = offset(rng);
    d.flip = std::bernoulli_distribution(0.5)(rng);
    d.shift = std::uniform_real_distribution<double>(-max_shift, max_shift)(rng);
    return d;
}

namespace detail {

inline std::ptrdiff_t reflect_index(std::ptrdiff_t i, std::ptrdiff_t n) {
    while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
    return i;
}

}  // namespace detail

/// Reflect-pads by `pad`, crops back to size at the drawn offset, optionally
/// mirrors horizontally, then shifts intensities and clamps to [0, 1].
inline Frame augment_frame(const Frame& f, const AugmentDraw& d, std::size_t pad = 4) {
    Frame out(f.height, f.width, f.channels);
    const auto h = static_cast<std::ptrdiff_t>(f.height), w = static_cast<std::ptrdiff_t>(f.width);
    for (std::ptrdiff_t y = 0; y < h; ++y)
        for (std::ptrdiff_t x = 0; x < w; ++x) {
            const std::ptrdiff_t xx = d.flip ? w - 1 - x : x;
            const auto sy = detail::reflect_index(y + static_cast<std::ptrdiff_t>(d.crop_y) - static_cast<std::ptrdiff_t>(pad), h);
            const auto sx = detail::reflect_index(xx + static_cast<std::ptrdiff_t>(d.crop_x) - static_cast<std::ptrdiff_t>(pad), w);
            for (std::size_t c = 0; c < f.channels; ++c) {
                const double v = f.at(static_cast<std::size_t>(sy), static_cast<std::size_t>(sx), c) + d.shift;
                out.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
        }
    return out;
}

inline ImageSequence augment(const ImageSequence& seq, const AugmentDraw& d, std::size_t pad = 4) {
    ImageSequence out;
    out.times = seq.times;
    out.label = seq.label;
    for (const auto& f : seq.frames) out.frames.push_back(augment_frame(f, d, pad));
    return out;
}

template <typename Rng>
ImageSequence augment(const ImageSequence& seq, Rng& rng, std::size_t pad = 4) {
    return augment(seq, draw_augment(rng, pad), pad);
}

}  // namespace tdvit

#pragma once

// Procedural longitudinal nodule sequences.
//
// v1: scans at a fixed interval; a nodule grows linearly d(t) = d0 + g·t, so
//     size at a given scan carries the class signal.
// v2: diameters follow a class-independent increasing schedule and scan times
//     are derived from each sample's growth rate, t_j = (d_j − d0) / g. Size
//     distributions match across classes; only the time stamps carry signal.
//
// Malignant growth rates are the benign distribution scaled by 3 (mean and std).

#include "embedding.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace tdvit {

enum class Variant { v1, v2 };

inline std::string to_string(Variant v) { return v == Variant::v1 ? "v1" : "v2"; }

inline Variant parse_variant(const std::string& s) {
    if (s == "v1") return Variant::v1;
    if (s == "v2") return Variant::v2;
    throw std::invalid_argument("unknown variant '" + s + "' (expected v1 or v2)");
}

struct GeneratorSpec {
    std::size_t image_size = 32;
    std::size_t channels = 3;
    std::size_t frames = 5;
    double benign_growth_mean = 0.25;  // px / month
    double benign_growth_std = 0.08;
    double initial_diameter_mean = 3.0;  // px
    double initial_diameter_std = 0.5;
    double nodule_intensity = 0.6;
    double edge_softness = 2.0;      // exponent k of the radial profile
    double scan_interval = 3.0;      // months, v1
    double increment_min = 0.5;      // px per scan, v2 size schedule
    double increment_max = 2.5;
    double center_jitter = 2.0;      // px, per frame
    Variant variant = Variant::v2;
    std::uint64_t seed = 0;
    std::vector<Frame> backgrounds;  // empty → procedural noise

    double growth_mean(Label l) const { return l == Label::malignant ? 3.0 * benign_growth_mean : benign_growth_mean; }
    double growth_std(Label l) const { return l == Label::malignant ? 3.0 * benign_growth_std : benign_growth_std; }
    double max_diameter() const { return static_cast<double>(image_size) - 2.0 * center_jitter - 2.0; }

    void validate() const {
        if (image_size < 8 || channels == 0 || frames == 0) throw std::invalid_argument("generator: invalid frame geometry");
        if (benign_growth_mean <= 0.0) throw std::invalid_argument("generator: growth mean must be positive");
        if (benign_growth_std < 0.0 || initial_diameter_std < 0.0) {
            throw std::invalid_argument("generator: standard deviations must be nonnegative");
        }
        if (initial_diameter_mean <= 0.0 || scan_interval <= 0.0) {
            throw std::invalid_argument("generator: initial diameter and scan interval must be positive");
        }
        if (!(increment_min > 0.0 && increment_max >= increment_min)) {
            throw std::invalid_argument("generator: size increments must satisfy 0 < min <= max");
        }
        for (const auto& b : backgrounds) {
            if (b.height != image_size || b.width != image_size || b.channels != channels) {
                throw std::invalid_argument("generator: background does not match frame geometry");
            }
        }
    }
};

struct SyntheticSample {
    ImageSequence sequence;
    std::uint64_t seed = 0;
    std::uint64_t index = 0;
    double growth_rate = 0.0;
    double initial_diameter = 0.0;
    std::vector<double> diameters;
};

using SynthRng = std::mt19937_64;

/// Independent stream per (seed, sample index), so generation order does not matter.
inline SynthRng sample_rng(std::uint64_t seed, std::uint64_t index) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32), 0x7d7dU};
    return SynthRng(seq);
}

/// g ~ Normal(mean_label, std_label), rejected below 0.05·mean_label.
template <typename Rng>
double sample_growth(Label label, const GeneratorSpec& spec, Rng& rng) {
    const double mean = spec.growth_mean(label), sd = spec.growth_std(label);
    if (sd == 0.0) return mean;
    std::normal_distribution<double> dist(mean, sd);
    for (;;) {
        const double g = dist(rng);
        if (g >= 0.05 * mean) return g;
    }
}

/// Adds intensity·exp(−ln2·(dist/(d/2))^k) to every channel, clamped to [0, 1].
/// The ln 2 factor puts the half-maximum contour at radius d/2.
inline Frame render_nodule(const Frame& background, double center_y, double center_x, double diameter,
                           const GeneratorSpec& spec) {
    if (!(center_y >= 0.0 && center_y <= static_cast<double>(background.height) && center_x >= 0.0 &&
          center_x <= static_cast<double>(background.width))) {
        throw std::invalid_argument("render_nodule: center (" + std::to_string(center_y) + ", " +
                                    std::to_string(center_x) + ") lies outside the frame");
    }
    if (!(diameter > 0.0)) throw std::invalid_argument("render_nodule: diameter must be positive");
    Frame out = background;
    if (spec.nodule_intensity == 0.0) return out;
    const double radius = diameter / 2.0;
    for (std::size_t y = 0; y < out.height; ++y)
        for (std::size_t x = 0; x < out.width; ++x) {
            const double dy = static_cast<double>(y) + 0.5 - center_y, dx = static_cast<double>(x) + 0.5 - center_x;
            const double rel = std::sqrt(dy * dy + dx * dx) / radius;
            const double blob = spec.nodule_intensity * std::exp(-std::log(2.0) * std::pow(rel, spec.edge_softness));
            for (std::size_t c = 0; c < out.channels; ++c) {
                out.at(y, x, c) = static_cast<float>(std::clamp(out.at(y, x, c) + blob, 0.0, 1.0));
            }
        }
    return out;
}

/// Smooth value noise: a coarse random lattice, bilinearly upsampled, in [0.1, 0.5].
template <typename Rng>
Frame procedural_background(const GeneratorSpec& spec, Rng& rng) {
    constexpr std::size_t lattice = 5;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Frame f(spec.image_size, spec.image_size, spec.channels);
    for (std::size_t c = 0; c < spec.channels; ++c) {
        double grid[lattice][lattice];
        for (auto& row : grid)
            for (auto& v : row) v = u(rng);
        const double step = static_cast<double>(spec.image_size) / static_cast<double>(lattice - 1);
        for (std::size_t y = 0; y < f.height; ++y)
            for (std::size_t x = 0; x < f.width; ++x) {
                const double gy = (static_cast<double>(y) + 0.5) / step, gx = (static_cast<double>(x) + 0.5) / step;
                const std::size_t iy = std::min<std::size_t>(static_cast<std::size_t>(gy), lattice - 2);
                const std::size_t ix = std::min<std::size_t>(static_cast<std::size_t>(gx), lattice - 2);
                const double fy = gy - static_cast<double>(iy), fx = gx - static_cast<double>(ix);
                const double v = (1 - fy) * ((1 - fx) * grid[iy][ix] + fx * grid[iy][ix + 1]) +
                                 fy * ((1 - fx) * grid[iy + 1][ix] + fx * grid[iy + 1][ix + 1]);
                f.at(y, x, c) = static_cast<float>(0.1 + 0.4 * v);
            }
    }
    return f;
}

namespace detail {

template <typename Rng>
Frame pick_background(const GeneratorSpec& spec, Rng& rng) {
    if (spec.backgrounds.empty()) return procedural_background(spec, rng);
    std::uniform_int_distribution<std::size_t> pick(0, spec.backgrounds.size() - 1);
    return spec.backgrounds[pick(rng)];
}

template <typename Rng>
Label coin_label(Rng& rng) {
    return std::bernoulli_distribution(0.5)(rng) ? Label::malignant : Label::benign;
}

template <typename Rng>
double initial_diameter(const GeneratorSpec& spec, Rng& rng) {
    if (spec.initial_diameter_std == 0.0) return spec.initial_diameter_mean;
    std::normal_distribution<double> dist(spec.initial_diameter_mean, spec.initial_diameter_std);
    for (;;) {
        const double d = dist(rng);
        if (d >= 1.0) return d;
    }
}

template <typename Rng>
void render_frames(SyntheticSample& s, const GeneratorSpec& spec, Rng& rng) {
    const Frame background = pick_background(spec, rng);
    const double mid = static_cast<double>(spec.image_size) / 2.0;
    std::uniform_real_distribution<double> jitter(-spec.center_jitter, spec.center_jitter);
    for (double d : s.diameters) {
        const double cy = mid + jitter(rng), cx = mid + jitter(rng);
        s.sequence.frames.push_back(render_nodule(background, cy, cx, d, spec));
    }
}

}  // namespace detail

/// Regular sampling: times 0, Δ, 2Δ, …; diameters d0 + g·t.
template <typename Rng>
SyntheticSample generate_v1(const GeneratorSpec& spec, Rng& rng, std::optional<Label> label = std::nullopt) {
    spec.validate();
    SyntheticSample s;
    const Label l = label ? *label : detail::coin_label(rng);
    const double last_time = spec.scan_interval * static_cast<double>(spec.frames - 1);
    do {
        s.growth_rate = sample_growth(l, spec, rng);
        s.initial_diameter = detail::initial_diameter(spec, rng);
    } while (s.initial_diameter + s.growth_rate * last_time > spec.max_diameter());
    for (std::size_t t = 0; t < spec.frames; ++t) {
        const double time = spec.scan_interval * static_cast<double>(t);
        s.sequence.times.push_back(time);
        s.diameters.push_back(s.initial_diameter + s.growth_rate * time);
    }
    s.sequence.label = l;
    detail::render_frames(s, spec, rng);
    return s;
}

/// Irregular sampling with class-matched size distributions.
template <typename Rng>
SyntheticSample generate_v2(const GeneratorSpec& spec, Rng& rng, std::optional<Label> label = std::nullopt) {
    spec.validate();
    SyntheticSample s;
    const Label l = label ? *label : detail::coin_label(rng);
    s.growth_rate = sample_growth(l, spec, rng);
    std::uniform_real_distribution<double> increment(spec.increment_min, spec.increment_max);
    do {
        s.initial_diameter = detail::initial_diameter(spec, rng);
        s.diameters.assign(1, s.initial_diameter);
        for (std::size_t t = 1; t < spec.frames; ++t) s.diameters.push_back(s.diameters.back() + increment(rng));
    } while (s.diameters.back() > spec.max_diameter());
    for (double d : s.diameters) s.sequence.times.push_back((d - s.initial_diameter) / s.growth_rate);
    for (std::size_t t = 1; t < s.sequence.times.size(); ++t) {
        if (!(s.sequence.times[t] > s.sequence.times[t - 1])) throw std::logic_error("generate_v2: times not increasing");
    }
    s.sequence.label = l;
    detail::render_frames(s, spec, rng);
    return s;
}

/// Sample `index` of a dataset: even indices benign, odd malignant.
inline SyntheticSample generate_sample(const GeneratorSpec& spec, std::uint64_t index) {
    auto rng = sample_rng(spec.seed, index);
    const Label l = index % 2 == 0 ? Label::benign : Label::malignant;
    SyntheticSample s = spec.variant == Variant::v1 ? generate_v1(spec, rng, l) : generate_v2(spec, rng, l);
    s.seed = spec.seed;
    s.index = index;
    return s;
}

/// Reads the CIFAR-10 binary layout: records of 1 label byte + 3×32×32
/// channel-major image bytes. Pixels are scaled to [0, 1]; labels are dropped.
inline std::vector<Frame> load_external_backgrounds(const std::string& path) {
    constexpr std::size_t side = 32, record = 1 + 3 * side * side;
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open background file '" + path + "'");
    const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.empty() || bytes.size() % record != 0) {
        throw std::runtime_error("background file '" + path + "' has " + std::to_string(bytes.size()) +
                                 " bytes, expected a nonzero multiple of " + std::to_string(record));
    }
    std::vector<Frame> out;
    for (std::size_t off = 0; off < bytes.size(); off += record) {
        Frame f(side, side, 3);
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t y = 0; y < side; ++y)
                for (std::size_t x = 0; x < side; ++x)
                    f.at(y, x, c) = static_cast<float>(bytes[off + 1 + c * side * side + y * side + x]) / 255.0f;
        out.push_back(std::move(f));
    }
    return out;
}

}  // namespace tdvit

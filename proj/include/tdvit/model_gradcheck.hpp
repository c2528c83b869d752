#pragma once

// Whole-model gradient verification on a tiny double-precision configuration.

#include "gradcheck.hpp"
#include "model.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace tdvit {

struct GroupError {
    std::string name;
    double max_relative_error;
};

/// A random sequence of `frames` frames for the given model geometry.
inline ImageSequence random_sequence(const ModelConfig& c, std::size_t frames, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> px(0.0, 1.0), gap(1.0, 6.0);
    ImageSequence s;
    double t = 0.0;
    for (std::size_t f = 0; f < frames; ++f) {
        Frame fr(c.image_height, c.image_width, c.channels);
        for (auto& v : fr.pixels) v = static_cast<float>(px(rng));
        s.frames.push_back(std::move(fr));
        s.times.push_back(t);
        t += gap(rng);
    }
    s.label = Label::malignant;
    return s;
}

/// Checks every parameter tensor of a tiny model (encoder, classifier and
/// decoder) against central differences. The loss is the classification BCE
/// plus the MAE loss under a fixed mask plan on a random two-frame sequence.
inline std::vector<GroupError> gradcheck_model(TemporalMode mode, std::uint64_t seed, double eps = 1e-5,
                                               bool flip_tem_backward = false) {
    const ModelConfig config = ModelConfig::tiny(mode);
    ModelParams<double> params = init_weights<double>(config, seed);
    // a nonzero head so classifier gradients reach the encoder
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
    std::normal_distribution<double> small(0.0, 0.5);
    for (auto& v : params.head_w.values()) v = small(rng);
    params.head_b.values()[0] = small(rng);
    params.set_tem_fault(flip_tem_backward);

    const ImageSequence seq = random_sequence(config, 2, seed + 1);
    const MaskPlan plan = sample_mask(seq.length(), config.patches_per_frame(), 0.5, rng);
    auto loss_fn = [&]() {
        const Tensor<double> bce = bce_with_logits(classify_logit(seq, params), 1.0);
        return add(bce, forward_mae(seq, params, plan).loss);
    };

    std::vector<GroupError> out;
    for (const auto& [name, tensor] : params.named_parameters()) {
        const auto report = finite_difference_check<double>(loss_fn, {*tensor}, eps);
        out.push_back({name, report.max_relative_error});
    }
    return out;
}

}  // namespace tdvit

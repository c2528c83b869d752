#include <tdvit/dataset.hpp>
#include <tdvit/model.hpp>
#include <tdvit/model_gradcheck.hpp>
#include <tdvit/optim.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace tdvit;

namespace {

constexpr TemporalMode kModes[] = {TemporalMode::positional, TemporalMode::te, TemporalMode::ta};

ModelConfig small_config(TemporalMode mode) {
    ModelConfig c = ModelConfig::tiny(mode);
    c.image_height = c.image_width = 8;
    c.channels = 2;
    c.dim = 16;
    c.heads = 4;
    c.head_dim = 4;
    c.depth = 2;
    c.mlp_hidden = 64;
    c.decoder_depth = 1;
    return c;
}

template <typename T>
void randomize_head(ModelParams<T>& p, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    for (auto& v : p.head_w.values()) v = static_cast<T>(n(rng));
}

}  // namespace

TEST(ModelConfig, DefaultsMatchStandardArchitecture) {
    const auto c = ModelConfig::standard(TemporalMode::ta);
    EXPECT_EQ(c.dim, 64u);
    EXPECT_EQ(c.heads, 8u);
    EXPECT_EQ(c.depth, 8u);
    EXPECT_EQ(c.heads * c.head_dim, c.dim);
    EXPECT_EQ(c.mlp_hidden, 4 * c.dim);
    EXPECT_EQ(c.patches_per_frame(), 16u);
    ModelConfig bad = c;
    bad.head_dim = 7;
    EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(ForwardClassify, ZeroHeadGivesOneHalf) {
    for (auto mode : kModes) {
        const auto c = small_config(mode);
        const auto p = init_weights<double>(c, 3);
        for (std::uint64_t s = 0; s < 5; ++s) EXPECT_EQ(forward_classify(random_sequence(c, 3, s), p), 0.5);
    }
}

TEST(ForwardClassify, SingleFrameTeAndPositionalCoincide) {
    auto te = init_weights<double>(small_config(TemporalMode::te), 4);
    randomize_head(te, 5);
    ModelParams<double> pos = te.clone();
    pos.config.mode = TemporalMode::positional;
    const auto seq = random_sequence(te.config, 1, 6);
    EXPECT_EQ(forward_classify(seq, te), forward_classify(seq, pos));
}

TEST(ForwardClassify, TimeScalingAffectsTeButNotPositional) {
    auto te = init_weights<double>(small_config(TemporalMode::te), 7);
    randomize_head(te, 8);
    ModelParams<double> pos = te.clone();
    pos.config.mode = TemporalMode::positional;
    const auto seq = random_sequence(te.config, 3, 9);
    ImageSequence doubled = seq;
    for (auto& t : doubled.times) t *= 2.0;
    EXPECT_EQ(forward_classify(seq, pos), forward_classify(doubled, pos));
    EXPECT_NE(forward_classify(seq, te), forward_classify(doubled, te));
}

TEST(ForwardClassify, StrictlyInsideUnitIntervalAndDeterministic) {
    for (auto mode : kModes) {
        auto p = init_weights<float>(small_config(mode), 10);
        randomize_head(p, 11);
        for (std::uint64_t s = 0; s < 10; ++s) {
            const auto seq = random_sequence(p.config, 4, s);
            const double y = forward_classify(seq, p);
            EXPECT_GT(y, 0.0);
            EXPECT_LT(y, 1.0);
            EXPECT_EQ(y, forward_classify(seq, p));
        }
    }
}

TEST(ForwardClassify, GeometryMismatchThrows) {
    const auto p = init_weights<double>(small_config(TemporalMode::ta), 1);
    ModelConfig other = p.config;
    other.image_height = other.image_width = 12;
    EXPECT_THROW(forward_classify(random_sequence(other, 2, 0), p), std::invalid_argument);
}

TEST(ForwardClassify, ClassifierlessParamsThrow) {
    const auto p = init_weights<double>(small_config(TemporalMode::ta), 1, false, true);
    try {
        forward_classify(random_sequence(p.config, 2, 0), p);
        FAIL();
    } catch (const std::invalid_argument& e) {
        EXPECT_STREQ(e.what(), "checkpoint missing classifier head");
    }
}

TEST(EncoderRelTime, ClsBelongsToLatestFrame) {
    const auto c = small_config(TemporalMode::ta);
    ImageSequence seq = random_sequence(c, 3, 1);
    seq.times = {0.0, 4.0, 9.0};
    const auto r = encoder_rel_time(seq, c);
    ASSERT_EQ(r.n, 1 + 3 * c.patches_per_frame());
    for (std::size_t j = 0; j < r.n; ++j) {
        EXPECT_EQ(r.at(0, j), 0.0);
        EXPECT_EQ(r.at(1, j), 9.0);
        EXPECT_EQ(r.at(r.n - 1, j), 0.0);
    }
}

TEST(InitWeights, DeterministicPerSeedAndSeedSensitive) {
    auto a = init_weights<double>(small_config(TemporalMode::ta), 42);
    auto b = init_weights<double>(small_config(TemporalMode::ta), 42);
    auto c = init_weights<double>(small_config(TemporalMode::ta), 43);
    auto na = a.named_parameters(), nb = b.named_parameters(), nc = c.named_parameters();
    bool any_diff = false;
    for (std::size_t k = 0; k < na.size(); ++k) {
        EXPECT_EQ(na[k].tensor->values(), nb[k].tensor->values()) << na[k].name;
        any_diff = any_diff || na[k].tensor->values() != nc[k].tensor->values();
    }
    EXPECT_TRUE(any_diff);
}

TEST(InitWeights, FollowsInitializationScheme) {
    const auto c = small_config(TemporalMode::ta);
    auto p = init_weights<double>(c, 1);
    for (const auto& [name, t] : p.named_parameters()) {
        if (name.find("scale") != std::string::npos) {
            for (double v : t->values()) EXPECT_EQ(v, 1.0) << name;
        } else if (name.find("offset") != std::string::npos || name.find("bias") != std::string::npos ||
                   name.ends_with(".bo") || name.ends_with(".b1") || name.ends_with(".b2") || name.starts_with("head.")) {
            for (double v : t->values()) EXPECT_EQ(v, 0.0) << name;
        } else if (name.ends_with("tem_ua")) {
            for (double v : t->values()) EXPECT_NEAR(stable_softplus(v), 1.0, 1e-12);
        } else if (name.ends_with("tem_uc")) {
            for (double v : t->values()) EXPECT_NEAR(stable_softplus(v), 6.0, 1e-12);
        } else if (name == "cls_token" || name == "mask_token") {
            for (double v : t->values()) EXPECT_LT(std::abs(v), 0.02 * 6);
        } else {
            const double bound = 1.0 / std::sqrt(static_cast<double>(t->rows()));
            for (double v : t->values()) EXPECT_LE(std::abs(v), bound) << name;
        }
    }
}

TEST(InitWeights, SharedTemListsOneCopyAndStaysLinked) {
    auto c = small_config(TemporalMode::ta);
    c.share_tem_across_layers = true;
    auto p = init_weights<double>(c, 1);
    std::size_t tem_tensors = 0;
    for (const auto& [name, t] : p.named_parameters()) tem_tensors += name.find("tem_") != std::string::npos;
    EXPECT_EQ(tem_tensors, 4u);  // one (u_a, u_c) pair for the encoder, one for the decoder
    auto q = p.clone();
    q.blocks[0].attn.tem_ua.values()[0] = 3.0;
    EXPECT_EQ(q.blocks[1].attn.tem_ua.values()[0], 3.0);
}

TEST(SampleMask, DefaultRatioMasksSixtyOfEighty) {
    std::mt19937_64 rng(1);
    const auto plan = sample_mask(5, 16, 0.75, rng);
    EXPECT_EQ(plan.masked.size(), 80u);
    EXPECT_EQ(plan.count(), 60u);
}

TEST(SampleMask, SmallestRatioMasksOneToken) {
    std::mt19937_64 rng(2);
    EXPECT_EQ(sample_mask(5, 16, 1.0 / 80.0, rng).count(), 1u);
    EXPECT_EQ(sample_mask(2, 16, 0.5, rng).count(), 16u);
}

TEST(SampleMask, RatioOutsideOpenIntervalThrows) {
    std::mt19937_64 rng(3);
    for (double r : {0.0, 1.0, -0.1, 1.5}) EXPECT_THROW(sample_mask(5, 16, r, rng), std::invalid_argument);
}

TEST(SampleMask, EveryTokenMaskedAtTheRatioFrequency) {
    std::mt19937_64 rng(4);
    std::vector<int> hits(80, 0);
    const int draws = 10000;
    for (int d = 0; d < draws; ++d) {
        const auto plan = sample_mask(5, 16, 0.75, rng);
        for (std::size_t i = 0; i < 80; ++i) hits[i] += plan.masked[i];
    }
    for (int h : hits) EXPECT_NEAR(static_cast<double>(h) / draws, 0.75, 0.02);
}

TEST(ForwardMae, PerfectReconstructionGivesZeroLoss) {
    // with a zero projection every prediction is the bias, so a single masked
    // patch is reconstructed exactly when the bias equals its normalized pixels
    const auto c = small_config(TemporalMode::ta);
    auto p = init_weights<double>(c, 1);
    const auto seq = random_sequence(c, 2, 3);
    MaskPlan plan;
    plan.masked.assign(2 * c.patches_per_frame(), false);
    plan.masked[5] = true;
    const auto target = normalized_patch_targets(gather_rows(detail::sequence_patches<double>(seq, c.patch_size), {5}));
    for (auto& v : p.dec_pred_w.values()) v = 0.0;
    p.dec_pred_b.values() = target.values();
    EXPECT_EQ(forward_mae(seq, p, plan).loss.item(), 0.0);
}

TEST(ForwardMae, LossIsMeanSquaredErrorAgainstNormalizedPatches) {
    const auto c = small_config(TemporalMode::te);
    auto p = init_weights<double>(c, 6);
    const auto seq = random_sequence(c, 3, 7);
    std::mt19937_64 rng(8);
    const auto plan = sample_mask(3, c.patches_per_frame(), 0.75, rng);
    const auto out = forward_mae(seq, p, plan);
    ASSERT_EQ(out.reconstructions.rows(), plan.count());
    const std::size_t len = c.patch_len();
    double sq = 0;
    for (std::size_t m = 0; m < out.masked_tokens.size(); ++m) {
        const std::size_t tok = out.masked_tokens[m];
        const Frame& f = seq.frames[tok / c.patches_per_frame()];
        const std::size_t k = tok % c.patches_per_frame();
        const std::size_t gy = k / c.grid_w(), gx = k % c.grid_w();
        std::vector<double> px;
        for (std::size_t y = 0; y < c.patch_size; ++y)
            for (std::size_t x = 0; x < c.patch_size; ++x)
                for (std::size_t ch = 0; ch < c.channels; ++ch)
                    px.push_back(f.at(gy * c.patch_size + y, gx * c.patch_size + x, ch));
        double mu = 0, var = 0;
        for (double v : px) mu += v;
        mu /= len;
        for (double v : px) var += (v - mu) * (v - mu);
        var /= len;
        for (std::size_t j = 0; j < len; ++j) {
            const double e = out.reconstructions.at(m, j) - (px[j] - mu) / std::sqrt(var + 1e-6);
            sq += e * e;
        }
    }
    EXPECT_NEAR(out.loss.item(), sq / (plan.count() * len), 1e-12);
}

TEST(ForwardMae, UnmaskedPredictionsReceiveNoGradient) {
    const auto c = small_config(TemporalMode::te);
    auto p = init_weights<double>(c, 2);
    const auto seq = random_sequence(c, 2, 5);
    MaskPlan plan;
    plan.ratio = 1.0 / 8.0;
    plan.masked.assign(2 * c.patches_per_frame(), false);
    plan.masked[3] = true;
    const auto out = forward_mae(seq, p, plan);
    backward(out.loss);
    const auto g = out.predictions.grad();
    const std::size_t cols = out.predictions.cols();
    for (std::size_t r = 0; r < out.predictions.rows(); ++r) {
        double norm = 0;
        for (std::size_t j = 0; j < cols; ++j) norm += std::abs(g[r * cols + j]);
        if (r == 3) {
            EXPECT_GT(norm, 0.0);
        } else {
            EXPECT_EQ(norm, 0.0) << "token " << r;
        }
    }
}

TEST(ForwardMae, RandomInitLossNearOneOnSingleFrame) {
    for (auto mode : kModes) {
        const auto c = ModelConfig::standard(mode);
        auto p = init_weights<float>(c, 11);
        std::mt19937_64 rng(12);
        double total = 0;
        for (std::uint64_t s = 0; s < 4; ++s) {
            const auto plan = sample_mask(1, c.patches_per_frame(), 0.75, rng);
            total += forward_mae(random_sequence(c, 1, s), p, plan).loss.item();
        }
        EXPECT_NEAR(total / 4, 1.0, 0.5) << to_string(mode);
    }
}

TEST(ForwardMae, DegeneratePlansThrow) {
    const auto c = small_config(TemporalMode::ta);
    const auto p = init_weights<double>(c, 1);
    const auto seq = random_sequence(c, 2, 1);
    MaskPlan plan;
    plan.masked.assign(2 * c.patches_per_frame(), false);
    EXPECT_THROW(forward_mae(seq, p, plan), std::invalid_argument);
    plan.masked.assign(2 * c.patches_per_frame(), true);
    EXPECT_THROW(forward_mae(seq, p, plan), std::invalid_argument);
    plan.masked.assign(3, true);
    EXPECT_THROW(forward_mae(seq, p, plan), std::invalid_argument);
}

TEST(ModelGradcheck, AllModesBelowTolerance) {
    for (auto mode : kModes) {
        for (std::uint64_t seed : {1u, 2u, 3u}) {
            for (const auto& g : gradcheck_model(mode, seed)) {
                EXPECT_LT(g.max_relative_error, 1e-4) << to_string(mode) << " seed " << seed << " " << g.name;
            }
        }
    }
}

TEST(ModelGradcheck, TemGroupsAreChecked) {
    std::size_t tem = 0;
    for (const auto& g : gradcheck_model(TemporalMode::ta, 1)) tem += g.name.find("tem_") != std::string::npos;
    EXPECT_EQ(tem, 4u);
}

TEST(ModelGradcheck, InjectedTemFaultIsCaught) {
    double worst = 0;
    for (const auto& g : gradcheck_model(TemporalMode::ta, 1, 1e-5, true)) {
        if (g.name.find("tem_") != std::string::npos) worst = std::max(worst, g.max_relative_error);
    }
    EXPECT_GT(worst, 1e-4);
}

// Fixed 32-sample synthetic batch and fixed mask plans: the full-batch MAE loss
// must halve within 200 AdamW steps for every temporal mode.
TEST(MaeTraining, LossHalvesWithinTwoHundredSteps) {
    GeneratorSpec spec;
    spec.image_size = 16;
    spec.frames = 5;
    spec.seed = 20;
    const auto cohort = generate_dataset(spec, 32);
    const auto& batch = cohort.dataset.samples;
    for (auto mode : kModes) {
        ModelConfig c = ModelConfig::tiny(mode);
        c.image_height = c.image_width = 16;
        c.channels = 3;
        c.dim = 64;
        c.heads = 4;
        c.head_dim = 16;
        c.mlp_hidden = 256;
        auto p = init_weights<float>(c, 21, false, true);
        std::vector<MaskPlan> plans;
        std::mt19937_64 rng(22);
        for (std::size_t s = 0; s < batch.size(); ++s) plans.push_back(sample_mask(5, c.patches_per_frame(), 0.75, rng));
        OptimState<float> state;
        double first = 0, last = 0;
        for (int step = 0; step < 200; ++step) {
            auto named = p.named_parameters();
            for (auto& n : named) n.tensor->zero_grad();
            Tensor<float> loss = forward_mae(batch[0], p, plans[0]).loss;
            for (std::size_t i = 1; i < batch.size(); ++i) loss = add(loss, forward_mae(batch[i], p, plans[i]).loss);
            loss = scale(loss, 1.0f / 32.0f);
            backward(loss);
            if (step == 0) first = loss.item();
            last = loss.item();
            std::vector<std::vector<float>> grads;
            for (auto& n : named) grads.emplace_back(n.tensor->grad().begin(), n.tensor->grad().end());
            adamw_step(named, grads, state, 2e-3);
        }
        EXPECT_LE(last, 0.5 * first) << to_string(mode) << ": " << first << " -> " << last;
    }
}

#include <tdvit/attention.hpp>
#include <tdvit/embedding.hpp>
#include <tdvit/gradcheck.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <optional>
#include <random>

using namespace tdvit;
using Td = Tensor<double>;

namespace {

Td random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, bool grad = false, double lo = -1.0,
                 double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(r * c);
    for (auto& x : v) x = u(rng);
    return Td({r, c}, std::move(v), grad);
}

MhaLayer<double> random_layer(std::size_t dim, std::size_t heads, std::size_t d, std::mt19937_64& rng,
                              bool grad = false) {
    MhaLayer<double> l;
    l.heads = heads;
    l.head_dim = d;
    l.wq = random_matrix(dim, heads * d, rng, grad);
    l.wk = random_matrix(dim, heads * d, rng, grad);
    l.wv = random_matrix(dim, heads * d, rng, grad);
    l.wo = random_matrix(heads * d, dim, rng, grad);
    l.bo = random_matrix(1, dim, rng, grad);
    l.bo = Td({dim}, l.bo.values(), grad);
    std::uniform_real_distribution<double> u(-1.0, 2.5);
    std::vector<double> ua(heads), uc(heads);
    for (auto& x : ua) x = u(rng);
    for (auto& x : uc) x = u(rng);
    l.tem_ua = Td({heads}, ua, grad);
    l.tem_uc = Td({heads}, uc, grad);
    return l;
}

}  // namespace

TEST(TemScale, SigmoidOfZeroAtOrigin) {
    const auto tem = TemParams<double>::single(inverse_softplus(1.0), -800.0);  // c ≈ 0
    EXPECT_NEAR(tem_scale(Td::zeros({1, 1}), tem).item(), 0.5, 1e-12);
}

TEST(TemScale, HandEvaluatedPoint) {
    const auto tem = TemParams<double>::single(inverse_softplus(1.5), inverse_softplus(1.0));
    EXPECT_NEAR(tem_scale(Td::full({1, 1}, 2.0), tem).item(), 1.0 / (1.0 + std::exp(2.0)), 1e-12);
    EXPECT_NEAR(tem_scale(Td::full({1, 1}, 2.0), tem).item(), 0.1192, 5e-5);
}

TEST(TemScale, VanishingSlopeIsTimeAgnostic) {
    const double c = 1.7;
    const auto tem = TemParams<double>::single(-60.0, inverse_softplus(c));
    const Td out = tem_scale(Td::matrix({{0, 3, 24, 120}}), tem);
    for (double v : out.values()) EXPECT_NEAR(v, 1.0 / (1.0 + std::exp(-c)), 1e-12);
}

TEST(TemScale, NegativeDistanceThrows) {
    EXPECT_THROW(tem_scale(Td::matrix({{0, -1}}), TemParams<double>::single(0, 0)), std::invalid_argument);
}

TEST(TemScale, RangeFloorAndMonotonicityOverRandomParameters) {
    std::mt19937_64 rng(10);
    std::uniform_real_distribution<double> u(-8.0, 8.0);
    std::vector<double> grid(100);
    for (std::size_t i = 0; i < grid.size(); ++i) grid[i] = 0.5 * static_cast<double>(i);
    for (int trial = 0; trial < 1000; ++trial) {
        const auto tem = TemParams<double>::single(u(rng), u(rng));
        const Td out = tem_scale(Td({1, grid.size()}, grid), tem);
        EXPECT_GE(out.values()[0], 0.5);
        for (std::size_t i = 0; i < grid.size(); ++i) {
            EXPECT_GT(out.values()[i], 0.0);
            EXPECT_LT(out.values()[i], 1.0);
            if (i) {
                EXPECT_LE(out.values()[i], out.values()[i - 1]);
            }
        }
    }
}

TEST(TemScale, DerivedParametersStayPositive) {
    for (double u : {-700.0, -30.0, -1.0, 0.0, 1.0, 30.0, 700.0}) {
        const auto tem = TemParams<double>::single(u, u);
        EXPECT_GT(tem.slope(), 0.0);
        EXPECT_GT(tem.offset(), 0.0);
    }
}

TEST(StandardHead, SingleTokenReturnsItsValueRow) {
    std::mt19937_64 rng(11);
    const Td h = random_matrix(1, 6, rng);
    const HeadWeights<double> w{random_matrix(6, 3, rng), random_matrix(6, 3, rng), random_matrix(6, 3, rng)};
    const Td out = attention_head_standard(h, w);
    const Td v = matmul(h, w.wv);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(out.values()[j], v.values()[j], 1e-15);
}

TEST(StandardHead, IdenticalTokensAverageValues) {
    std::mt19937_64 rng(12);
    const Td row = random_matrix(1, 6, rng);
    const Td h = gather_rows(row, {0, 0, 0, 0});
    const HeadWeights<double> w{random_matrix(6, 3, rng), random_matrix(6, 3, rng), random_matrix(6, 3, rng)};
    const Td out = attention_head_standard(h, w);
    const Td v = matmul(h, w.wv);
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(out.at(r, j), v.at(0, j), 1e-14);
}

TEST(StandardHead, ShapeMismatchThrows) {
    std::mt19937_64 rng(13);
    const HeadWeights<double> w{random_matrix(5, 3, rng), random_matrix(5, 3, rng), random_matrix(5, 3, rng)};
    EXPECT_THROW(attention_head_standard(random_matrix(4, 6, rng), w), ShapeError);
}

TEST(TimeAwareHead, SaturatedTemMatchesReluGatedLogits) {
    std::mt19937_64 rng(14);
    // nonnegative tokens and weights keep every QKᵀ entry ≥ 0
    const Td h = random_matrix(5, 6, rng, false, 0.0, 1.0);
    const HeadWeights<double> w{random_matrix(6, 4, rng, false, 0.0, 1.0), random_matrix(6, 4, rng, false, 0.0, 1.0),
                                random_matrix(6, 4, rng, false)};
    const auto tem = TemParams<double>::single(inverse_softplus(1.0), 60.0);
    const Td r = rel_time_matrix({0, 2, 5, 9, 10}, 1).to_tensor<double>();
    const Td ta = attention_head_time_aware(h, w, tem, r);
    const Td q = matmul(h, w.wq), k = matmul(h, w.wk);
    const Td ref = matmul(softmax_rows(scale(relu(matmul_transposed(q, k)), 1.0 / 2.0)), matmul(h, w.wv));
    const Td plain = attention_head_standard(h, w);
    for (std::size_t i = 0; i < ta.size(); ++i) {
        EXPECT_NEAR(ta.values()[i], ref.values()[i], 1e-6);
        EXPECT_NEAR(ta.values()[i], plain.values()[i], 1e-6);
    }
}

TEST(TimeAwareHead, SingleFrameScalesAllLogitsUniformly) {
    std::mt19937_64 rng(15);
    const Td h = random_matrix(4, 6, rng);
    const HeadWeights<double> w{random_matrix(6, 2, rng), random_matrix(6, 2, rng), random_matrix(6, 2, rng)};
    const double c = 2.0;
    const auto tem = TemParams<double>::single(0.3, inverse_softplus(c));
    const Td r = rel_time_matrix({4.0}, 4).to_tensor<double>();
    const Td scaled = tem_scale(r, tem);
    for (double v : scaled.values()) EXPECT_DOUBLE_EQ(v, scaled.values()[0]);
    EXPECT_NEAR(scaled.values()[0], 1.0 / (1.0 + std::exp(-c)), 1e-12);
    const Td q = matmul(h, w.wq), k = matmul(h, w.wk);
    const Td ref = matmul(softmax_rows(scale(relu(matmul_transposed(q, k)), scaled.values()[0] / std::sqrt(2.0))),
                          matmul(h, w.wv));
    const Td out = attention_head_time_aware(h, w, tem, r);
    for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out.values()[i], ref.values()[i], 1e-12);
}

TEST(TimeAwareHead, SteepTemFlattensEarlierTokenAttention) {
    std::mt19937_64 rng(16);
    const Td h = random_matrix(2, 4, rng);
    const HeadWeights<double> w{random_matrix(4, 2, rng), random_matrix(4, 2, rng), random_matrix(4, 2, rng)};
    const auto tem = TemParams<double>::single(inverse_softplus(50.0), -800.0);
    const Td r = rel_time_matrix({0, 12}, 1).to_tensor<double>();
    const Td out = attention_head_time_aware(h, w, tem, r);
    const Td v = matmul(h, w.wv);
    for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(out.at(0, j), 0.5 * (v.at(0, j) + v.at(1, j)), 1e-12);
}

TEST(TimeAwareHead, NegativeDistancesThrow) {
    std::mt19937_64 rng(17);
    const Td h = random_matrix(2, 4, rng);
    const HeadWeights<double> w{random_matrix(4, 2, rng), random_matrix(4, 2, rng), random_matrix(4, 2, rng)};
    EXPECT_THROW(attention_head_time_aware(h, w, TemParams<double>::single(0, 0), Td::matrix({{0, -1}, {0, 0}})),
                 std::invalid_argument);
    EXPECT_THROW(attention_head_time_aware(h, w, TemParams<double>::single(0, 0), Td::zeros({3, 3})), ShapeError);
}

TEST(MultiHead, OneHeadIdentityProjectionEqualsHead) {
    std::mt19937_64 rng(18);
    auto layer = random_layer(4, 1, 4, rng);
    layer.wo = Td::matrix({{1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}, {0, 0, 0, 1}});
    layer.bo = Td::zeros({4});
    const Td h = random_matrix(3, 4, rng);
    const Td out = multi_head(h, layer, AttentionMode::standard);
    const Td ref = attention_head_standard(h, layer.head(0));
    for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out.values()[i], ref.values()[i], 1e-14);
}

TEST(MultiHead, ZeroProjectionGivesZero) {
    std::mt19937_64 rng(19);
    auto layer = random_layer(8, 2, 4, rng);
    layer.wo = Td::zeros({8, 8});
    layer.bo = Td::zeros({8});
    const Td out = multi_head(random_matrix(5, 8, rng), layer, AttentionMode::standard);
    for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(MultiHead, DefaultConfigurationShape) {
    std::mt19937_64 rng(20);
    const auto layer = random_layer(64, 8, 8, rng);
    const std::optional<Td> r = rel_time_matrix({0, 3, 6, 9, 12}, 16).to_tensor<double>();
    EXPECT_EQ(multi_head(random_matrix(80, 64, rng), layer, AttentionMode::time_aware, r).shape(), (Shape{80, 64}));
    EXPECT_EQ(multi_head(random_matrix(80, 64, rng), layer, AttentionMode::standard).shape(), (Shape{80, 64}));
}

TEST(MultiHead, TimeAwareWithoutDistancesThrows) {
    std::mt19937_64 rng(21);
    const auto layer = random_layer(8, 2, 4, rng);
    EXPECT_THROW(multi_head(random_matrix(3, 8, rng), layer, AttentionMode::time_aware), std::invalid_argument);
}

TEST(MultiHead, AttentionRowsSumToOneInBothModes) {
    std::mt19937_64 rng(22);
    const Td h = random_matrix(6, 8, rng);
    const Td q = matmul(h, random_matrix(8, 4, rng)), k = matmul(h, random_matrix(8, 4, rng));
    const Td r = rel_time_matrix({0, 4, 7}, 2).to_tensor<double>();
    const Td rhat = tem_scale(r, TemParams<double>::single(0.2, 1.5));
    for (const Td& logits : {matmul_transposed(q, k), mul(relu(matmul_transposed(q, k)), rhat)}) {
        const Td p = softmax_rows(scale(logits, 0.5));
        for (std::size_t i = 0; i < 6; ++i) {
            double s = 0;
            for (std::size_t j = 0; j < 6; ++j) s += p.at(i, j);
            EXPECT_NEAR(s, 1.0, 1e-6);
        }
    }
}

TEST(MultiHead, MutatingOneHeadTemLeavesOthersUnchanged) {
    std::mt19937_64 rng(23);
    auto layer = random_layer(8, 2, 4, rng);
    layer.wo = Td::matrix({{1, 0, 0, 0, 0, 0, 0, 0},
                           {0, 1, 0, 0, 0, 0, 0, 0},
                           {0, 0, 1, 0, 0, 0, 0, 0},
                           {0, 0, 0, 1, 0, 0, 0, 0},
                           {0, 0, 0, 0, 1, 0, 0, 0},
                           {0, 0, 0, 0, 0, 1, 0, 0},
                           {0, 0, 0, 0, 0, 0, 1, 0},
                           {0, 0, 0, 0, 0, 0, 0, 1}});
    layer.bo = Td::zeros({8});
    const Td h = random_matrix(6, 8, rng);
    const std::optional<Td> r = rel_time_matrix({0, 5, 11}, 2).to_tensor<double>();
    const Td before = multi_head(h, layer, AttentionMode::time_aware, r);
    layer.tem_ua = Td({2}, {layer.tem_ua.values()[0] + 1.3, layer.tem_ua.values()[1]});
    layer.tem_uc = Td({2}, {layer.tem_uc.values()[0] - 0.7, layer.tem_uc.values()[1]});
    const Td after = multi_head(h, layer, AttentionMode::time_aware, r);
    bool head0_changed = false;
    for (std::size_t i = 0; i < 6; ++i) {
        for (std::size_t j = 0; j < 4; ++j) head0_changed = head0_changed || before.at(i, j) != after.at(i, j);
        for (std::size_t j = 4; j < 8; ++j) EXPECT_EQ(before.at(i, j), after.at(i, j));
    }
    EXPECT_TRUE(head0_changed);
}

TEST(MultiHead, PermutingLatestFrameTokensPermutesOutputs) {
    std::mt19937_64 rng(24);
    const auto layer = random_layer(8, 2, 4, rng);
    const Td h = random_matrix(6, 8, rng);
    const std::optional<Td> r = rel_time_matrix({0, 5, 11}, 2).to_tensor<double>();
    const std::vector<std::size_t> perm{0, 1, 2, 3, 5, 4};
    for (auto mode : {AttentionMode::standard, AttentionMode::time_aware}) {
        const Td out = multi_head(h, layer, mode, r);
        const Td out_perm = multi_head(gather_rows(h, perm), layer, mode, r);
        const Td expected = gather_rows(out, perm);
        for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out_perm.values()[i], expected.values()[i], 1e-12);
    }
}

// Smallest |q·k|/√d over all heads; the ReLU gate has a kink at zero.
static double min_abs_logit(const Td& h, const MhaLayer<double>& l) {
    const std::size_t n = h.rows(), dim = h.cols(), w = l.heads * l.head_dim;
    auto project = [&](const Td& m, std::size_t i, std::size_t c) {
        double acc = 0;
        for (std::size_t k = 0; k < dim; ++k) acc += h.at(i, k) * m.at(k, c);
        return acc;
    };
    double worst = INFINITY;
    for (std::size_t head = 0; head < l.heads; ++head)
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                double dot = 0;
                for (std::size_t c = head * l.head_dim; c < (head + 1) * l.head_dim && c < w; ++c)
                    dot += project(l.wq, i, c) * project(l.wk, j, c);
                worst = std::min(worst, std::abs(dot) / std::sqrt(static_cast<double>(l.head_dim)));
            }
    return worst;
}

TEST(MultiHead, GradientsMatchFiniteDifferencesInBothModes) {
    // 100 instances per mode; time-aware draws too close to the gate are replaced
    int checked[2] = {0, 0};
    for (std::uint64_t seed = 0; seed < 300 && checked[1] < 100; ++seed) {
        std::mt19937_64 rng(100 + seed);
        auto layer = random_layer(8, 2, 4, rng, true);
        Td h = random_matrix(6, 8, rng, true);
        const std::optional<Td> r = rel_time_matrix({0, 2.5, 6}, 2).to_tensor<double>();
        const Td target = random_matrix(6, 8, rng);
        for (auto mode : {AttentionMode::standard, AttentionMode::time_aware}) {
            const int m = mode == AttentionMode::time_aware;
            if (checked[m] == 100 || (m && min_abs_logit(h, layer) < 1e-3)) continue;
            ++checked[m];
            auto loss = [&] { return mse(multi_head(h, layer, mode, r), target); };
            std::vector<Td> params{h, layer.wq, layer.wk, layer.wv, layer.wo, layer.bo};
            if (mode == AttentionMode::time_aware) {
                params.push_back(layer.tem_ua);
                params.push_back(layer.tem_uc);
            }
            const auto rep = finite_difference_check<double>(loss, params);
            EXPECT_LT(rep.max_relative_error, 1e-4) << "seed " << seed << " mode " << static_cast<int>(mode);
        }
    }
    EXPECT_EQ(checked[0], 100);
    EXPECT_EQ(checked[1], 100);
}

TEST(MultiHead, FlippedTemBackwardIsDetected) {
    std::mt19937_64 rng(25);
    auto layer = random_layer(8, 2, 4, rng, true);
    layer.flip_tem_backward = true;
    Td h = random_matrix(6, 8, rng);
    const std::optional<Td> r = rel_time_matrix({0, 2.5, 6}, 2).to_tensor<double>();
    auto loss = [&] { return sum(multi_head(h, layer, AttentionMode::time_aware, r)); };
    const auto rep = finite_difference_check<double>(loss, {layer.tem_ua, layer.tem_uc});
    EXPECT_GT(rep.max_relative_error, 1.0);
}

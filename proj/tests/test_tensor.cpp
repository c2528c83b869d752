#include <tdvit/gradcheck.hpp>
#include <tdvit/tensor.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace tdvit;
using Td = Tensor<double>;

namespace {

Td random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, bool grad = true, double scale = 1.0) {
    std::uniform_real_distribution<double> u(-scale, scale);
    std::vector<double> v(r * c);
    for (auto& x : v) x = u(rng);
    return Td({r, c}, std::move(v), grad);
}

}  // namespace

TEST(Matmul, IdentityLeavesOperandUnchanged) {
    const Td eye = Td::matrix({{1, 0}, {0, 1}});
    const Td b = Td::matrix({{1.5, -2}, {3, 4.25}});
    EXPECT_EQ(matmul(eye, b).values(), b.values());
}

TEST(Matmul, HandComputedProduct) {
    const Td c = matmul(Td::matrix({{1, 2}, {3, 4}}), Td::matrix({{0}, {1}}));
    EXPECT_EQ(c.shape(), (Shape{2, 1}));
    EXPECT_EQ(c.values(), (std::vector<double>{2, 4}));
}

TEST(Matmul, ZeroMatrixAnnihilates) {
    std::mt19937_64 rng(1);
    const Td c = matmul(random_matrix(3, 4, rng, false), Td::zeros({4, 2}));
    for (double v : c.values()) EXPECT_EQ(v, 0.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
    try {
        matmul(Td::zeros({2, 3}), Td::zeros({2, 3}));
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    }
}

TEST(Softmax, UniformRow) {
    const Td y = softmax_rows(Td::matrix({{0, 0, 0}}));
    for (double v : y.values()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, LargeLogitsAreStable) {
    const Td y = softmax_rows(Td::matrix({{1000, 1000}}));
    EXPECT_DOUBLE_EQ(y.values()[0], 0.5);
    EXPECT_DOUBLE_EQ(y.values()[1], 0.5);
}

TEST(Softmax, LogThreeRow) {
    const Td y = softmax_rows(Td::matrix({{0, std::log(3.0)}}));
    EXPECT_NEAR(y.values()[0], 0.25, 1e-15);
    EXPECT_NEAR(y.values()[1], 0.75, 1e-15);
}

TEST(Softmax, RowsSumToOneForRandomInputs) {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 200; ++trial) {
        const Td y = softmax_rows(random_matrix(5, 7, rng, false, 50.0));
        for (std::size_t r = 0; r < 5; ++r) {
            double s = 0;
            for (std::size_t c = 0; c < 7; ++c) {
                EXPECT_GE(y.at(r, c), 0.0);
                s += y.at(r, c);
            }
            EXPECT_NEAR(s, 1.0, 1e-6);
        }
    }
}

TEST(Relu, ForwardValues) {
    EXPECT_EQ(relu(Td::matrix({{-1, 0, 2}})).values(), (std::vector<double>{0, 0, 2}));
    const Td pos = Td::matrix({{0.5, 3, 7}});
    EXPECT_EQ(relu(pos).values(), pos.values());
}

TEST(Relu, GradientIsPiecewiseWithZeroAtKink) {
    const Td x = Td::matrix({{-0.5, 0.5, 0.0}}, true);
    backward(sum(relu(x)));
    EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{0, 1, 0}));
}

TEST(Sigmoid, ReferenceValues) {
    const Td y = sigmoid(Td::matrix({{0, 50, std::log(3.0), -800}}));
    EXPECT_DOUBLE_EQ(y.values()[0], 0.5);
    EXPECT_NEAR(y.values()[1], 1.0, 1e-9);
    EXPECT_NEAR(y.values()[2], 0.75, 1e-15);
    EXPECT_EQ(y.values()[3], 0.0);
    EXPECT_FALSE(std::isnan(y.values()[3]));
}

TEST(Backward, SumGivesOnes) {
    const Td w({2, 3, 1}, std::vector<double>(6, 0.7), true);
    backward(sum(w));
    for (double g : w.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, UnusedLeafHasZeroGradient) {
    const Td used = Td::full({2}, 1.0, true);
    const Td unused = Td::full({3}, 2.0, true);
    backward(sum(used));
    for (double g : unused.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, NonScalarLossIsRejected) {
    const Td x = Td::full({2}, 1.0, true);
    EXPECT_THROW(backward(x), ShapeError);
}

TEST(Backward, ReusedLeafAccumulates) {
    const Td x = Td::scalar(3.0, true);
    backward(add(mul(x, x), x));  // d/dx (x² + x) = 2x + 1
    EXPECT_DOUBLE_EQ(x.grad()[0], 7.0);
}

TEST(Backward, MatmulSumAgreesWithFiniteDifferences) {
    std::mt19937_64 rng(3);
    Td a = random_matrix(3, 4, rng), b = random_matrix(4, 2, rng);
    const auto r = finite_difference_check<double>([&] { return sum(matmul(a, b)); }, {a, b});
    EXPECT_LT(r.max_relative_error, 1e-6);
}

TEST(Backward, IsLinearInTheLoss) {
    std::mt19937_64 rng(4);
    Td w = random_matrix(3, 3, rng);
    const Td x = random_matrix(3, 3, rng, false);
    auto l1 = [&] { return sum(softmax_rows(matmul(x, w))); };
    auto l2 = [&] { return mean(gelu(matmul(w, x))); };
    const double alpha = 0.7, beta = -1.3;

    backward(l1());
    const std::vector<double> g1(w.grad().begin(), w.grad().end());
    w.zero_grad();
    backward(l2());
    const std::vector<double> g2(w.grad().begin(), w.grad().end());
    w.zero_grad();
    backward(add(scale(l1(), alpha), scale(l2(), beta)));
    for (std::size_t i = 0; i < g1.size(); ++i) EXPECT_NEAR(w.grad()[i], alpha * g1[i] + beta * g2[i], 1e-12);
}

TEST(Backward, NoGradGuardSkipsRecording) {
    const Td x = Td::scalar(2.0, true);
    Td y;
    {
        NoGradGuard guard;
        y = mul(x, x);
    }
    EXPECT_FALSE(y.requires_grad());
}

// Random compositions of every differentiable op, checked in double precision.
TEST(Backward, RandomGraphsPassFiniteDifferenceCheck) {
    for (std::uint64_t seed = 0; seed < 120; ++seed) {
        std::mt19937_64 rng(seed);
        Td a = random_matrix(3, 4, rng), b = random_matrix(4, 4, rng), bias = random_matrix(1, 4, rng);
        Td gain = random_matrix(1, 4, rng), off = random_matrix(1, 4, rng);
        const Td target = random_matrix(3, 4, rng, false);
        auto loss = [&] {
            Td h = add_row_broadcast(matmul(a, b), reshape(bias, {4}));
            h = layer_norm(h, reshape(gain, {4}), reshape(off, {4}));
            Td s = softmax_rows(matmul_transposed(h, a));
            Td g = gelu(matmul(s, h));
            Td mix = concat_cols<double>({slice_cols(g, 0, 2), sigmoid(slice_cols(h, 2, 2))});
            Td rows = concat_rows<double>({gather_rows(mix, {2, 0}), gather_rows(softplus(h), {1})});
            Td loss = add(mse(rows, target), scale(mean(mul(rows, sub(rows, target))), 0.3));
            return add(loss, bce_with_logits(reshape(gather_rows(slice_cols(h, 1, 1), {0}), {1}), 1.0));
        };
        const auto r = finite_difference_check<double>(loss, {a, b, bias, gain, off});
        EXPECT_LT(r.max_relative_error, 1e-4) << "seed " << seed;
    }
}

TEST(ShapeOps, ErrorsOnBadExtents) {
    EXPECT_THROW(add(Td::zeros({2, 2}), Td::zeros({2, 3})), ShapeError);
    EXPECT_THROW(slice_cols(Td::zeros({2, 2}), 1, 2), ShapeError);
    EXPECT_THROW(reshape(Td::zeros({2, 2}), {3}), ShapeError);
    EXPECT_THROW(gather_rows(Td::zeros({2, 2}), {2}), ShapeError);
    EXPECT_THROW(Td({2, 2}, {1.0, 2.0}), ShapeError);
}

TEST(Precision, SingleAndDoubleAgreeOnSmallGraph) {
    const Tensor<float> af = Tensor<float>::matrix({{0.5f, -1.0f}, {2.0f, 0.25f}});
    const Td ad = Td::matrix({{0.5, -1.0}, {2.0, 0.25}});
    EXPECT_NEAR(sum(softmax_rows(af)).item(), sum(softmax_rows(ad)).item(), 1e-6);
}

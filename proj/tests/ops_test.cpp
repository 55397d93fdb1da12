#include <gtest/gtest.h>

#include <cmath>

#include "slw/core.hpp"
#include "slw/gradcheck.hpp"
#include "slw/ops.hpp"

using slw::Tensor;

namespace {

// independent triple-loop reference for matmul
Tensor<double> matmul_oracle(const Tensor<double>& a, const Tensor<double>& b) {
    const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    Tensor<double> c({m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t p = 0; p < k; ++p)
                c.ptr()[i * n + j] += a.ptr()[i * k + p] * b.ptr()[p * n + j];
    return c;
}

Tensor<double> random_tensor(std::vector<std::size_t> shape, slw::Rng& rng) {
    Tensor<double> t(std::move(shape));
    for (auto& v : t.data) v = rng.next_normal();
    return t;
}

Tensor<double> identity(std::size_t n) {
    Tensor<double> t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.ptr()[i * n + i] = 1.0;
    return t;
}

TEST(Matmul, IdentityCase) {
    Tensor<double> a({2, 2}, {1, 2, 3, 4});
    Tensor<double> c = slw::matmul(identity(2), a);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(c[i], a[i]);
}

TEST(Matmul, HandDotProduct) {
    Tensor<double> a({1, 2}, {1, 2});
    Tensor<double> b({2, 1}, {3, 4});
    Tensor<double> c = slw::matmul(a, b);
    EXPECT_DOUBLE_EQ(c[0], 11.0);
}

TEST(Matmul, MatchesTripleLoopOracle) {
    slw::Rng rng(42);
    Tensor<double> a = random_tensor({5, 7}, rng);
    Tensor<double> b = random_tensor({7, 3}, rng);
    Tensor<double> c = slw::matmul(a, b);
    Tensor<double> ref = matmul_oracle(a, b);
    for (std::size_t i = 0; i < c.numel(); ++i) EXPECT_NEAR(c[i], ref[i], 1e-12);
}

TEST(Matmul, ShapeMismatchRejected) {
    Tensor<double> a({2, 3});
    Tensor<double> b({4, 2});
    EXPECT_THROW(slw::matmul(a, b), std::invalid_argument);
}

TEST(Matmul, IdentityAssociativityUpTo64) {
    slw::Rng rng(7);
    for (std::size_t n : {1, 4, 17, 64}) {
        Tensor<double> a = random_tensor({n, n}, rng);
        Tensor<double> left = slw::matmul(identity(n), a);
        Tensor<double> right = slw::matmul(a, identity(n));
        for (std::size_t i = 0; i < a.numel(); ++i) {
            EXPECT_EQ(left[i], a[i]);
            EXPECT_EQ(right[i], a[i]);
        }
    }
}

TEST(MatmulBackward, IdentityAndScalarCases) {
    Tensor<double> i2 = identity(2);
    auto [ga, gb] = slw::matmul_backward(i2, i2, i2);
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_DOUBLE_EQ(ga[i], i2[i]);
        EXPECT_DOUBLE_EQ(gb[i], i2[i]);
    }
    Tensor<double> a({1, 1}, {2}), b({1, 1}, {3}), g({1, 1}, {1});
    auto [ga2, gb2] = slw::matmul_backward(g, a, b);
    EXPECT_DOUBLE_EQ(ga2[0], 3.0);
    EXPECT_DOUBLE_EQ(gb2[0], 2.0);
}

TEST(MatmulBackward, FiniteDifferences) {
    slw::Rng rng(3);
    Tensor<double> a = random_tensor({4, 4}, rng);
    Tensor<double> b = random_tensor({4, 4}, rng);
    Tensor<double> g = random_tensor({4, 4}, rng);
    auto [ga, gb] = slw::matmul_backward(g, a, b);

    // scalar objective: sum(g .* (a*b))
    auto loss_of_a = [&](const std::vector<double>& av) {
        Tensor<double> at({4, 4}, av);
        Tensor<double> c = slw::matmul(at, b);
        double s = 0;
        for (std::size_t i = 0; i < c.numel(); ++i) s += g[i] * c[i];
        return s;
    };
    double err = slw::finite_diff_check(loss_of_a, a.data, ga.data, 1e-5);
    EXPECT_LE(err, 1e-6);

    auto loss_of_b = [&](const std::vector<double>& bv) {
        Tensor<double> bt({4, 4}, bv);
        Tensor<double> c = slw::matmul(a, bt);
        double s = 0;
        for (std::size_t i = 0; i < c.numel(); ++i) s += g[i] * c[i];
        return s;
    };
    err = slw::finite_diff_check(loss_of_b, b.data, gb.data, 1e-5);
    EXPECT_LE(err, 1e-6);
}

TEST(Softmax, UniformAndShiftInvariance) {
    Tensor<double> x({1, 2}, {0, 0});
    Tensor<double> y = slw::softmax_rows(x);
    EXPECT_NEAR(y[0], 0.5, 1e-15);
    EXPECT_NEAR(y[1], 0.5, 1e-15);

    Tensor<double> big({1, 2}, {1000, 1000});
    y = slw::softmax_rows(big);
    EXPECT_NEAR(y[0], 0.5, 1e-15);

    Tensor<double> z({1, 2}, {0, std::log(3.0)});
    y = slw::softmax_rows(z);
    EXPECT_NEAR(y[0], 0.25, 1e-12);
    EXPECT_NEAR(y[1], 0.75, 1e-12);
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
    slw::Rng rng(11);
    Tensor<double> x = random_tensor({6, 9}, rng);
    Tensor<double> y = slw::softmax_rows(x);
    for (std::size_t r = 0; r < 6; ++r) {
        double s = 0;
        for (std::size_t j = 0; j < 9; ++j) {
            double v = y.ptr()[r * 9 + j];
            EXPECT_GE(v, 0.0);
            s += v;
        }
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
    Tensor<double> shifted = x;
    for (std::size_t r = 0; r < 6; ++r)
        for (std::size_t j = 0; j < 9; ++j) shifted.ptr()[r * 9 + j] += 3.7;
    Tensor<double> ys = slw::softmax_rows(shifted);
    for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(ys[i], y[i], 1e-12);
}

TEST(Softmax, NanRejected) {
    Tensor<double> x({1, 2}, {std::nan(""), 0.0});
    EXPECT_THROW(slw::softmax_rows(x), std::invalid_argument);
}

TEST(LayerNorm, TwoPointRow) {
    Tensor<double> x({1, 2}, {1, 3});
    Tensor<double> g({2}, {1, 1}), b({2}, {0, 0});
    Tensor<double> y = slw::layer_norm(x, g, b, 1e-12);
    EXPECT_NEAR(y[0], -1.0, 1e-5);
    EXPECT_NEAR(y[1], 1.0, 1e-5);
}

TEST(LayerNorm, ConstantRowGivesBeta) {
    Tensor<double> x({1, 3}, {4, 4, 4});
    Tensor<double> g({3}, {2, 2, 2}), b({3}, {0.5, -0.5, 7});
    Tensor<double> y = slw::layer_norm(x, g, b, 1e-5);
    EXPECT_NEAR(y[0], 0.5, 1e-12);
    EXPECT_NEAR(y[1], -0.5, 1e-12);
    EXPECT_NEAR(y[2], 7.0, 1e-12);
}

TEST(LayerNorm, BackwardFiniteDifferences) {
    slw::Rng rng(5);
    const std::size_t d = 8;
    Tensor<double> x = random_tensor({2, d}, rng);
    Tensor<double> gamma = random_tensor({d}, rng);
    Tensor<double> beta = random_tensor({d}, rng);
    Tensor<double> gout = random_tensor({2, d}, rng);

    slw::LayerNormCache<double> cache;
    slw::layer_norm(x, gamma, beta, 1e-5, &cache);
    slw::LayerNormGrads<double> grads = slw::layer_norm_backward(gout, gamma, cache);

    auto loss_of = [&](const Tensor<double>& xx, const Tensor<double>& gg,
                       const Tensor<double>& bb) {
        Tensor<double> y = slw::layer_norm(xx, gg, bb, 1e-5);
        double s = 0;
        for (std::size_t i = 0; i < y.numel(); ++i) s += gout[i] * y[i];
        return s;
    };
    double err = slw::finite_diff_check(
        [&](const std::vector<double>& v) { return loss_of(Tensor<double>({2, d}, v), gamma, beta); },
        x.data, grads.grad_x.data, 1e-6);
    EXPECT_LE(err, 1e-6);
    err = slw::finite_diff_check(
        [&](const std::vector<double>& v) { return loss_of(x, Tensor<double>({d}, v), beta); },
        gamma.data, grads.grad_gamma.data, 1e-6);
    EXPECT_LE(err, 1e-6);
    err = slw::finite_diff_check(
        [&](const std::vector<double>& v) { return loss_of(x, gamma, Tensor<double>({d}, v)); },
        beta.data, grads.grad_beta.data, 1e-6);
    EXPECT_LE(err, 1e-6);
}

TEST(CrossEntropy, UniformIsLn2) {
    Tensor<double> logits({1, 2}, {0, 0});
    double loss = slw::cross_entropy<double>(logits, {0}, nullptr);
    EXPECT_NEAR(loss, std::log(2.0), 1e-12);
}

TEST(CrossEntropy, ConfidentCorrectNearZero) {
    Tensor<double> logits({1, 2}, {100, -100});
    double loss = slw::cross_entropy<double>(logits, {0}, nullptr);
    EXPECT_NEAR(loss, 0.0, 1e-12);
}

TEST(CrossEntropy, BatchEqualsMeanOfPerPosition) {
    slw::Rng rng(9);
    Tensor<double> logits = random_tensor({3, 5}, rng);
    std::vector<std::size_t> targets = {1, 4, 0};
    double batch_loss = slw::cross_entropy<double>(logits, targets, nullptr);
    double acc = 0;
    for (std::size_t i = 0; i < 3; ++i) {
        Tensor<double> row({1, 5});
        for (std::size_t j = 0; j < 5; ++j) row[j] = logits.ptr()[i * 5 + j];
        acc += slw::cross_entropy<double>(row, {targets[i]}, nullptr);
    }
    EXPECT_NEAR(batch_loss, acc / 3.0, 1e-12);
}

TEST(CrossEntropy, NonnegativeAndUniformEqualsLnV) {
    for (std::size_t v : {2, 3, 17, 100}) {
        Tensor<double> logits({4, v});
        double loss = slw::cross_entropy<double>(logits, {0, v - 1, v / 2, 1}, nullptr);
        EXPECT_NEAR(loss, std::log(static_cast<double>(v)), 1e-12);
        EXPECT_GE(loss, 0.0);
    }
}

TEST(CrossEntropy, OutOfRangeTargetRejected) {
    Tensor<double> logits({1, 3});
    EXPECT_THROW(slw::cross_entropy<double>(logits, {3}, nullptr), std::invalid_argument);
}

TEST(CrossEntropy, BackwardFiniteDifferences) {
    slw::Rng rng(13);
    Tensor<double> logits = random_tensor({3, 7}, rng);
    std::vector<std::size_t> targets = {2, 6, 0};
    Tensor<double> grad;
    slw::cross_entropy(logits, targets, &grad);
    double err = slw::finite_diff_check(
        [&](const std::vector<double>& v) {
            return slw::cross_entropy<double>(Tensor<double>({3, 7}, v), targets, nullptr);
        },
        logits.data, grad.data, 1e-6);
    EXPECT_LE(err, 1e-6);
}

TEST(FiniteDiffCheck, QuadraticAndConstant) {
    auto square = [](const std::vector<double>& p) { return p[0] * p[0]; };
    double err = slw::finite_diff_check(square, {3.0}, {6.0}, 1e-5);
    EXPECT_LE(err, 1e-10);

    auto constant = [](const std::vector<double>&) { return 1.5; };
    err = slw::finite_diff_check(constant, {0.7}, {0.0}, 1e-5);
    EXPECT_EQ(err, 0.0);
}

TEST(FiniteDiffCheck, RejectsBadInput) {
    auto f = [](const std::vector<double>& p) { return p[0]; };
    EXPECT_THROW(slw::finite_diff_check(f, {1.0}, {1.0}, 0.0), std::invalid_argument);
    auto inf = [](const std::vector<double>&) { return std::numeric_limits<double>::infinity(); };
    EXPECT_THROW(slw::finite_diff_check(inf, {1.0}, {0.0}, 1e-5), std::invalid_argument);
}

TEST(Tensor, ShapeInvariants) {
    EXPECT_THROW(Tensor<double>({2, 3}, {1, 2, 3}), std::invalid_argument);
    EXPECT_THROW(Tensor<double>({0, 3}), std::invalid_argument);
    slw::GradPair<double> gp(Tensor<double>({2, 2}, {1, 2, 3, 4}));
    EXPECT_EQ(gp.value.shape, gp.grad.shape);
    for (double g : gp.grad.data) EXPECT_EQ(g, 0.0);
}

}  // namespace

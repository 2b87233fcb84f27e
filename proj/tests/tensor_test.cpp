#include "ppf/tensor.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <sstream>

#include "ppf/tensor_io.hpp"
#include "test_util.hpp"

using namespace ppf;
using ppftest::fd_compare;
using ppftest::random_tensor;

namespace {

Tensor mat(std::size_t r, std::size_t c, std::vector<double> v) {
    return Tensor(Shape{r, c}, std::move(v));
}

}  // namespace

TEST(Matmul, IdentityLeavesOperandUnchanged) {
    Tensor eye = mat(2, 2, {1, 0, 0, 1});
    Tensor b = mat(2, 3, {5, -1, 2, 0.5, 3, 7});
    Tensor out = matmul(eye, b);
    ASSERT_EQ(out.shape(), (Shape{2, 3}));
    for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_DOUBLE_EQ(out[i], b[i]);
}

TEST(Matmul, HandComputedProduct) {
    Tensor a = mat(2, 2, {1, 2, 3, 4});
    Tensor b = mat(2, 1, {1, 1});
    Tensor out = matmul(a, b);
    EXPECT_DOUBLE_EQ(out[0], 3.0);
    EXPECT_DOUBLE_EQ(out[1], 7.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
    Tensor a = mat(2, 3, {1, 2, 3, 4, 5, 6});
    Tensor b = mat(2, 2, {1, 2, 3, 4});
    try {
        matmul(a, b);
        FAIL() << "expected shape_error";
    } catch (const shape_error& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
        EXPECT_NE(msg.find("[2x2]"), std::string::npos) << msg;
    }
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
    Rng rng(11);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4, 2}, rng);
    auto rep = fd_compare([&] { return sum(matmul(a, b)); }, {a, b});
    EXPECT_LT(rep.max_rel_err, 1e-4) << "analytic " << rep.analytic << " vs fd " << rep.numeric;
}

TEST(SoftmaxRows, UniformRowIsUniform) {
    Tensor x = mat(1, 3, {0, 0, 0});
    Tensor y = softmax_rows(x);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(y[j], 1.0 / 3.0, 1e-15);
}

TEST(SoftmaxRows, StableUnderLargeMagnitudes) {
    Tensor x = mat(1, 3, {1000, 1000, 0});
    Tensor y = softmax_rows(x);
    EXPECT_NEAR(y[0], 0.5, 1e-12);
    EXPECT_NEAR(y[1], 0.5, 1e-12);
    EXPECT_NEAR(y[2], 0.0, 1e-12);
}

TEST(SoftmaxRows, MatchesDirectExpSumOracle) {
    const std::vector<double> row = {1, 2, 3};
    // Independent oracle: plain exp / sum.
    double z = 0.0;
    for (double v : row) z += std::exp(v);
    Tensor y = softmax_rows(Tensor(Shape{3}, row));
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(y[j], std::exp(row[j]) / z, 1e-12);
    // Frozen values from the oracle.
    EXPECT_NEAR(y[0], 0.09003057, 1e-8);
    EXPECT_NEAR(y[1], 0.24472847, 1e-8);
    EXPECT_NEAR(y[2], 0.66524096, 1e-8);
}

TEST(SoftmaxRows, RowsSumToOneProperty) {
    Rng rng(17);
    for (int iter = 0; iter < 40; ++iter) {
        const double mag = iter % 2 == 0 ? 1.0 : 1e4;
        Tensor x = random_tensor({4, 6}, rng, -mag, mag);
        Tensor y = softmax_rows(x);
        for (std::size_t i = 0; i < 4; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < 6; ++j) s += y.at(i, j);
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
    }
}

TEST(Backward, SumGivesOnes) {
    Rng rng(3);
    Tensor x = random_tensor({2, 3}, rng);
    x.set_requires_grad(true);
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = sum(x);
    backward(loss);
    for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 1.0);
}

TEST(Backward, ElementwiseSquareAnalytic) {
    Tensor x(Shape{3}, {1, 2, 3});
    x.set_requires_grad(true);
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = sum(mul(x, x));
    backward(loss);
    EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
    EXPECT_DOUBLE_EQ(x.grad()[1], 4.0);
    EXPECT_DOUBLE_EQ(x.grad()[2], 6.0);
}

TEST(Backward, NonScalarLossIsContractError) {
    Tensor x(Shape{2}, {1.0, 2.0});
    x.set_requires_grad(true);
    Tape tape;
    TapeScope scope(tape);
    Tensor y = mul(x, 2.0);
    EXPECT_THROW(backward(y), contract_error);
}

TEST(Backward, DeterministicAcrossIdenticalTapes) {
    Rng rng(5);
    Tensor a = random_tensor({4, 4}, rng);
    Tensor b = random_tensor({4, 4}, rng);

    auto run = [&](std::vector<double>& ga, std::vector<double>& gb) {
        a.set_requires_grad(true);
        b.set_requires_grad(true);
        a.zero_grad();
        b.zero_grad();
        Tape tape;
        TapeScope scope(tape);
        Tensor loss = sum(mul(softmax_rows(matmul(a, b)), a));
        backward(loss);
        ga = a.grad();
        gb = b.grad();
    };
    std::vector<double> ga1, gb1, ga2, gb2;
    run(ga1, gb1);
    run(ga2, gb2);
    EXPECT_EQ(0, std::memcmp(ga1.data(), ga2.data(), ga1.size() * sizeof(double)));
    EXPECT_EQ(0, std::memcmp(gb1.data(), gb2.data(), gb1.size() * sizeof(double)));
}

// Finite-difference sweep over every differentiable op, 20 random instances
// each, inputs in [-2, 2].
TEST(GradCheck, AllOpsAgainstFiniteDifferences) {
    Rng rng(23);
    for (int iter = 0; iter < 20; ++iter) {
        Tensor a = random_tensor({3, 4}, rng);
        Tensor b = random_tensor({3, 4}, rng);
        Tensor m2 = random_tensor({4, 3}, rng);
        Tensor rowv = random_tensor({4}, rng);
        Tensor scl = random_tensor({1}, rng);
        Tensor vec = random_tensor({5}, rng);
        Tensor gma = random_tensor({4}, rng, 0.5, 1.5);
        Tensor bta = random_tensor({4}, rng, -0.5, 0.5);
        // Keep divisors and log arguments away from zero.
        Tensor posd = random_tensor({3, 4}, rng, 0.5, 2.0);
        Tensor poss = random_tensor({1}, rng, 0.5, 2.0);
        // Keep relu inputs away from the kink.
        Tensor rel = random_tensor({3, 4}, rng);
        for (std::size_t i = 0; i < rel.numel(); ++i)
            if (std::abs(rel[i]) < 0.05) rel[i] = 0.1;

        std::vector<std::uint8_t> keep = {1, 0, 1, 1};
        std::vector<std::uint8_t> vkeep = {0, 1, 1, 0, 1};

        EXPECT_LT(fd_compare([&] { return sum(add(a, b)); }, {a, b}).max_rel_err, 1e-4);
        EXPECT_LT(fd_compare([&] { return sum(add(a, rowv)); }, {a, rowv}).max_rel_err, 1e-4);
        EXPECT_LT(fd_compare([&] { return sum(add(a, scl)); }, {a, scl}).max_rel_err, 1e-4);
        EXPECT_LT(fd_compare([&] { return sum(sub(a, b)); }, {a, b}).max_rel_err, 1e-4);
        EXPECT_LT(fd_compare([&] { return sum(sub(a, rowv)); }, {a, rowv}).max_rel_err, 1e-4);
        EXPECT_LT(fd_compare([&] { return sum(mul(a, b)); }, {a, b}).max_rel_err, 1e-4);
        EXPECT_LT(fd_compare([&] { return sum(mul(a, scl)); }, {a, scl}).max_rel_err, 1e-4);
        EXPECT_LT(fd_compare([&] { return sum(div(a, posd)); }, {a, posd}).max_rel_err, 1e-4);
        EXPECT_LT(fd_compare([&] { return sum(div(a, poss)); }, {a, poss}).max_rel_err, 1e-4);
        EXPECT_LT(fd_compare([&] { return sum(mul(matmul(a, m2), matmul(a, m2))); }, {a, m2})
                      .max_rel_err,
                  1e-4);
        EXPECT_LT(fd_compare([&] { return sum(mul(transpose(a), transpose(a))); }, {a})
                      .max_rel_err,
                  1e-4);
        EXPECT_LT(fd_compare([&] { return mean(mul(a, a)); }, {a}).max_rel_err, 1e-4);
        EXPECT_LT(fd_compare([&] { return sum(mul(sum_rows(a), sum_rows(a))); }, {a}).max_rel_err,
                  1e-4);
        EXPECT_LT(fd_compare([&] { return sum(log(posd)); }, {posd}).max_rel_err, 1e-4);
        EXPECT_LT(fd_compare([&] { return sum(exp(a)); }, {a}).max_rel_err, 1e-4);
        EXPECT_LT(fd_compare([&] { return sum(relu(rel)); }, {rel}).max_rel_err, 1e-4);
        EXPECT_LT(fd_compare([&] { return sum(gelu(a)); }, {a}).max_rel_err, 1e-4);
        EXPECT_LT(fd_compare([&] { return sum(mul(softmax_rows(a), b)); }, {a}).max_rel_err,
                  1e-4);
        EXPECT_LT(fd_compare([&] { return sum(mul(log_softmax_rows(a), b)); }, {a}).max_rel_err,
                  1e-4);
        EXPECT_LT(
            fd_compare([&] { return sum(mul(masked_softmax_rows(a, keep), b)); }, {a}).max_rel_err,
            1e-4);
        EXPECT_LT(fd_compare([&] { return sum(mul(layer_norm_rows(a, gma, bta), b)); },
                             {a, gma, bta})
                      .max_rel_err,
                  1e-4);
        EXPECT_LT(fd_compare([&] { return sum(mul(rows(a, 1, 2), rows(a, 1, 2))); }, {a})
                      .max_rel_err,
                  1e-4);
        EXPECT_LT(fd_compare([&] { return sum(mul(cols(a, 1, 2), cols(a, 1, 2))); }, {a})
                      .max_rel_err,
                  1e-4);
        EXPECT_LT(
            fd_compare([&] { return sum(mul(concat_rows(a, b), concat_rows(b, a))); }, {a, b})
                .max_rel_err,
            1e-4);
        EXPECT_LT(fd_compare(
                      [&] {
                          return sum(mul(concat_cols({a, b}), concat_cols({b, a})));
                      },
                      {a, b})
                      .max_rel_err,
                  1e-4);
        EXPECT_LT(fd_compare([&] { return sum(mul(reshape(a, {4, 3}), m2)); }, {a}).max_rel_err,
                  1e-4);
        EXPECT_LT(fd_compare([&] { return mul(pick(a, 5), pick(a, 5)); }, {a}).max_rel_err, 1e-4);
        EXPECT_LT(fd_compare([&] { return masked_max(vec, vkeep); }, {vec}).max_rel_err, 1e-4);
        EXPECT_LT(fd_compare(
                      [&] {
                          return sum(mul(stack_scalars({pick(a, 0), pick(a, 5), pick(b, 2)}),
                                         stack_scalars({pick(b, 0), pick(a, 1), pick(a, 2)})));
                      },
                      {a, b})
                      .max_rel_err,
                  1e-4);
    }
}

TEST(MaskedSoftmax, AllOnesEqualsPlainSoftmax) {
    Rng rng(31);
    Tensor x = random_tensor({3, 5}, rng);
    Tensor a = softmax_rows(x);
    Tensor b = masked_softmax_rows(x, std::vector<std::uint8_t>(5, 1));
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-15);
}

TEST(MaskedSoftmax, EmptyMaskIsContractError) {
    Tensor x = mat(2, 3, {1, 2, 3, 4, 5, 6});
    EXPECT_THROW(masked_softmax_rows(x, std::vector<std::uint8_t>(3, 0)), contract_error);
    EXPECT_THROW(masked_softmax_rows(x, std::vector<std::uint8_t>(2, 1)), contract_error);
}

TEST(MaskedMax, RoutesGradientToFirstArgmax) {
    Tensor x(Shape{4}, {1.0, 3.0, 3.0, 2.0});
    x.set_requires_grad(true);
    Tape tape;
    TapeScope scope(tape);
    Tensor m = masked_max(x, {1, 1, 1, 1});
    EXPECT_DOUBLE_EQ(m.value(), 3.0);
    backward(m);
    EXPECT_DOUBLE_EQ(x.grad()[1], 1.0);
    EXPECT_DOUBLE_EQ(x.grad()[2], 0.0);
}

TEST(TensorCore, ValueAndShapeChecks) {
    EXPECT_THROW(Tensor(Shape{2, 2}, {1.0, 2.0}), shape_error);
    Tensor s = Tensor::scalar(4.0);
    EXPECT_DOUBLE_EQ(s.value(), 4.0);
    Tensor v(Shape{3}, {1, 2, 3});
    EXPECT_THROW(v.value(), contract_error);
    EXPECT_THROW(pick(v, 3), param_error);
}

TEST(TensorCore, DetachDropsGraphParticipation) {
    Tensor x(Shape{2}, {1, 2});
    x.set_requires_grad(true);
    Tape tape;
    TapeScope scope(tape);
    Tensor y = mul(x.detach(), 3.0);
    EXPECT_FALSE(y.requires_grad());
    EXPECT_EQ(tape.size(), 0u);
}

TEST(TensorIo, RoundTripPreservesShapeAndBits) {
    Rng rng(41);
    Tensor t = random_tensor({2, 3, 4}, rng);
    std::ostringstream os(std::ios::binary);
    write_tensor(os, t);
    std::istringstream is(os.str(), std::ios::binary);
    Tensor back = read_tensor(is);
    ASSERT_EQ(back.shape(), t.shape());
    for (std::size_t i = 0; i < t.numel(); ++i) EXPECT_EQ(back[i], t[i]);
}

TEST(TensorIo, BadMagicReportsOffsetZero) {
    std::istringstream is(std::string("XXXX\0\0\0\0", 8), std::ios::binary);
    try {
        read_tensor(is);
        FAIL() << "expected format_error";
    } catch (const format_error& e) {
        EXPECT_EQ(e.offset, 0u);
    }
}

TEST(TensorIo, TruncationReportsOffset) {
    Tensor t(Shape{4}, {1, 2, 3, 4});
    std::ostringstream os(std::ios::binary);
    write_tensor(os, t);
    std::string bytes = os.str();
    bytes.resize(bytes.size() - 6);
    std::istringstream is(bytes, std::ios::binary);
    try {
        read_tensor(is);
        FAIL() << "expected format_error";
    } catch (const format_error& e) {
        EXPECT_GT(e.offset, 0u);
        EXPECT_NE(std::string(e.what()).find("offset"), std::string::npos);
    }
}

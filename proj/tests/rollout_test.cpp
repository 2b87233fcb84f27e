#include "ppf/rollout.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "test_util.hpp"

using namespace ppf;
using ppftest::random_tensor;

namespace {

// Independent rollout oracle: explicit (I + A) row-normalized products, plain
// double loops, no shared code with rollout_step.
std::vector<double> naive_rollout(const std::vector<std::vector<double>>& layers, std::size_t n,
                                  bool renorm) {
    std::vector<double> r(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) r[i * n + i] = 1.0;
    for (const auto& attn : layers) {
        std::vector<double> a(n * n);
        for (std::size_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                a[i * n + j] = (i == j ? 1.0 : 0.0) + attn[i * n + j];
                s += a[i * n + j];
            }
            if (renorm)
                for (std::size_t j = 0; j < n; ++j) a[i * n + j] /= s;
        }
        std::vector<double> next(n * n, 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < n; ++k)
                for (std::size_t j = 0; j < n; ++j)
                    next[i * n + j] += a[i * n + k] * r[k * n + j];
        r = next;
    }
    return r;
}

Tensor random_stochastic(std::size_t n, Rng& rng) {
    Tensor a(Shape{n, n});
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            a.at(i, j) = rng.uniform(0.01, 1.0);
            s += a.at(i, j);
        }
        for (std::size_t j = 0; j < n; ++j) a.at(i, j) /= s;
    }
    return a;
}

}  // namespace

TEST(RolloutStep, SelfAttentionOnlyKeepsIdentity) {
    RolloutMatrix r = RolloutMatrix::identity(3);
    Tensor eye(Shape{3, 3});
    for (std::size_t i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
    RolloutMatrix out = rollout_step(r, eye);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j)
            EXPECT_NEAR(out.m.at(i, j), i == j ? 1.0 : 0.0, 1e-15);
}

TEST(RolloutStep, UniformTwoTokenHandValue) {
    RolloutMatrix r = RolloutMatrix::identity(2);
    Tensor uni(Shape{2, 2}, {0.5, 0.5, 0.5, 0.5});
    RolloutMatrix out = rollout_step(r, uni);
    EXPECT_NEAR(out.m.at(0, 0), 0.75, 1e-15);
    EXPECT_NEAR(out.m.at(0, 1), 0.25, 1e-15);
    EXPECT_NEAR(out.m.at(1, 0), 0.25, 1e-15);
    EXPECT_NEAR(out.m.at(1, 1), 0.75, 1e-15);
}

TEST(RolloutStep, RowsStayStochastic) {
    Rng rng(7);
    RolloutMatrix r = RolloutMatrix::identity(5);
    for (int l = 0; l < 4; ++l) r = rollout_step(r, random_stochastic(5, rng));
    for (std::size_t i = 0; i < 5; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < 5; ++j) s += r.m.at(i, j);
        EXPECT_NEAR(s, 1.0, 1e-9);
    }
}

TEST(RolloutStep, ShapeMismatchThrows) {
    RolloutMatrix r = RolloutMatrix::identity(3);
    EXPECT_THROW(rollout_step(r, Tensor(Shape{2, 2}, {1, 0, 0, 1})), shape_error);
    EXPECT_THROW(rollout_step(r, Tensor(Shape{2, 3})), shape_error);
}

TEST(RolloutOracle, MatchesNaiveProductOnRandomStacks) {
    Rng rng(13);
    const std::size_t n = 6;
    for (int trial = 0; trial < 10; ++trial) {
        for (bool renorm : {true, false}) {
            std::vector<Tensor> layers;
            std::vector<std::vector<double>> raw;
            for (int l = 0; l < 3; ++l) {
                Tensor a = random_stochastic(n, rng);
                layers.push_back(a);
                raw.push_back(a.data());
            }
            RolloutMatrix r = rollout(layers, renorm);
            std::vector<double> expect = naive_rollout(raw, n, renorm);
            double max_diff = 0.0;
            for (std::size_t i = 0; i < n * n; ++i)
                max_diff = std::max(max_diff, std::abs(r.m[i] - expect[i]));
            EXPECT_LT(max_diff, 1e-10);
        }
    }
}

TEST(ClassTokenScores, IdentityRolloutScoresZero) {
    RolloutMatrix r = RolloutMatrix::identity(4);
    Tensor s = class_token_scores(r);
    ASSERT_EQ(s.numel(), 3u);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(s[i], 0.0);
}

TEST(ClassTokenScores, UniformSingleLayerHandValue) {
    // One layer of uniform attention over n=5: class row of norm(I + 1/n) is
    // 2/(2n) on the diagonal... the image-token entries are (1/5)/2 = 0.1.
    const std::size_t n = 5;
    Tensor uni(Shape{n, n}, std::vector<double>(n * n, 1.0 / n));
    RolloutMatrix r = rollout({uni});
    Tensor s = class_token_scores(r);
    for (std::size_t i = 0; i < n - 1; ++i) EXPECT_NEAR(s[i], 0.1, 1e-12);
}

TEST(ClassTokenScores, PermutationEquivariant) {
    Rng rng(19);
    const std::size_t n = 6;
    Tensor a = random_stochastic(n, rng);
    // Permute image tokens 1..n-1 (class token fixed at 0).
    std::vector<std::size_t> perm = {0, 3, 1, 5, 2, 4};
    Tensor ap(Shape{n, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) ap.at(perm[i], perm[j]) = a.at(i, j);
    Tensor s = class_token_scores(rollout({a}));
    Tensor sp = class_token_scores(rollout({ap}));
    for (std::size_t j = 1; j < n; ++j) EXPECT_NEAR(sp[perm[j] - 1], s[j - 1], 1e-14);
}

TEST(BuildFpMask, TopOneSelectsLargest) {
    FPMask m = build_fp_mask(Tensor(Shape{3}, {0.1, 0.5, 0.2}), 1);
    EXPECT_EQ(m.gamma, (std::vector<std::uint8_t>{0, 1, 0}));
    EXPECT_EQ(m.k, 1u);
}

TEST(BuildFpMask, FullKKeepsEverything) {
    FPMask m = build_fp_mask(Tensor(Shape{4}, {0.4, 0.1, 0.9, 0.2}), 4);
    EXPECT_EQ(m.gamma, (std::vector<std::uint8_t>{1, 1, 1, 1}));
}

TEST(BuildFpMask, TieBreaksToLowestIndex) {
    FPMask m = build_fp_mask(Tensor(Shape{3}, {0.3, 0.3, 0.1}), 1);
    EXPECT_EQ(m.gamma, (std::vector<std::uint8_t>{1, 0, 0}));
}

TEST(BuildFpMask, KOutOfRangeThrows) {
    Tensor s(Shape{3}, {0.1, 0.2, 0.3});
    EXPECT_THROW(build_fp_mask(s, 0), param_error);
    EXPECT_THROW(build_fp_mask(s, 4), param_error);
}

TEST(BuildFpMask, ExactlyKPreservedAndOrdered) {
    Rng rng(29);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor s = random_tensor({9}, rng, 0.0, 1.0);
        const std::size_t k = 1 + rng.index(9);
        FPMask m = build_fp_mask(s, k);
        std::size_t kept = 0;
        double min_kept = 1e30, max_dropped = -1e30;
        for (std::size_t i = 0; i < 9; ++i) {
            if (m.gamma[i]) {
                ++kept;
                min_kept = std::min(min_kept, s[i]);
            } else {
                max_dropped = std::max(max_dropped, s[i]);
            }
        }
        EXPECT_EQ(kept, k);
        if (k < 9) EXPECT_GE(min_kept, max_dropped);
    }
}

TEST(BuildFpMask, InvariantUnderOrderPreservingScoreMaps) {
    Rng rng(37);
    Tensor s = random_tensor({8}, rng, 0.1, 2.0);
    for (std::size_t k = 1; k <= 8; ++k) {
        FPMask base = build_fp_mask(s, k);
        Tensor warped(Shape{8});
        for (std::size_t i = 0; i < 8; ++i) warped[i] = std::exp(3.0 * s[i]) + 1.0;
        FPMask mapped = build_fp_mask(warped, k);
        EXPECT_EQ(base.gamma, mapped.gamma);
    }
}

TEST(BuildFpMask, DeterministicForIdenticalInputs) {
    Rng rng(43);
    Tensor s = random_tensor({10}, rng);
    FPMask a = build_fp_mask(s, 4);
    FPMask b = build_fp_mask(s, 4);
    EXPECT_EQ(a.gamma, b.gamma);
    EXPECT_EQ(a.source_scores, b.source_scores);
}

TEST(FpMaskType, KeepColsPrependsClassToken) {
    FPMask m;
    m.gamma = {0, 1, 0};
    m.k = 1;
    EXPECT_EQ(m.keep_cols(), (std::vector<std::uint8_t>{1, 0, 1, 0}));
}

#pragma once

// Attention rollout and top-K foreground-preserving mask construction.
//
// Rollout accumulates per-layer head-averaged attention as
//   R <- norm(I + A_mean) * R,  R(0) = I,
// where norm renormalizes each row to sum 1 (switchable; without it the
// literal I + A_mean is used and rows of a stochastic A sum to 2).
// Everything here runs on detached tensors: mask construction is a hard
// selection and never receives gradients.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "ppf/errors.hpp"
#include "ppf/tensor.hpp"

namespace ppf {

struct RolloutMatrix {
    Tensor m;  // n x n, no gradient participation

    static RolloutMatrix identity(std::size_t n) {
        Tensor t(Shape{n, n});
        for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
        return {t};
    }
};

// Binary keep/drop decision over the n-1 image tokens.
struct FPMask {
    std::vector<std::uint8_t> gamma;    // 1 = preserved foreground token
    std::size_t k = 0;                  // number of preserved tokens
    std::vector<double> source_scores;  // class-token rollout scores the mask came from

    std::size_t tokens() const { return gamma.size(); }

    static FPMask all_ones(std::size_t tokens) {
        FPMask m;
        m.gamma.assign(tokens, 1);
        m.k = tokens;
        m.source_scores.assign(tokens, 0.0);
        return m;
    }

    // Column mask over the full sequence [class token, image tokens]; the
    // class-token column is always preserved.
    std::vector<std::uint8_t> keep_cols() const {
        std::vector<std::uint8_t> keep(gamma.size() + 1, 0);
        keep[0] = 1;
        std::copy(gamma.begin(), gamma.end(), keep.begin() + 1);
        return keep;
    }
};

inline RolloutMatrix rollout_step(const RolloutMatrix& prev, const Tensor& attn_mean,
                                  bool renormalize = true) {
    if (attn_mean.rank() != 2 || attn_mean.dim(0) != attn_mean.dim(1)) {
        throw shape_error("rollout_step: attention must be square, got " +
                          shape_str(attn_mean.shape()));
    }
    if (prev.m.shape() != attn_mean.shape()) {
        throw shape_error("rollout_step: rollout " + shape_str(prev.m.shape()) +
                          " does not match attention " + shape_str(attn_mean.shape()));
    }
    const std::size_t n = attn_mean.dim(0);
    Tensor a(Shape{n, n});
    for (std::size_t i = 0; i < n; ++i) {
        double row_sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            a.at(i, j) = (i == j ? 1.0 : 0.0) + attn_mean.at(i, j);
            row_sum += a.at(i, j);
        }
        if (renormalize) {
            for (std::size_t j = 0; j < n; ++j) a.at(i, j) /= row_sum;
        }
    }
    return {matmul(a, prev.m)};
}

inline RolloutMatrix rollout(const std::vector<Tensor>& attn_layers, bool renormalize = true) {
    if (attn_layers.empty()) throw contract_error("rollout: no attention layers");
    RolloutMatrix r = RolloutMatrix::identity(attn_layers[0].dim(0));
    for (const Tensor& a : attn_layers) r = rollout_step(r, a, renormalize);
    return r;
}

// Influence of each image token on the class token: row 0 of the rollout
// matrix restricted to image-token columns.
inline Tensor class_token_scores(const RolloutMatrix& r) {
    const std::size_t n = r.m.dim(0);
    if (n < 2) throw contract_error("class_token_scores: need at least one image token");
    Tensor scores(Shape{n - 1});
    for (std::size_t j = 1; j < n; ++j) scores[j - 1] = r.m.at(0, j);
    return scores;
}

// gamma_i = 1 exactly for the K largest scores; ties keep the lowest index.
inline FPMask build_fp_mask(const Tensor& scores, std::size_t k) {
    if (scores.rank() != 1) throw shape_error("build_fp_mask: scores must be rank-1");
    const std::size_t t = scores.numel();
    if (k < 1 || k > t) {
        throw param_error("build_fp_mask: K=" + std::to_string(k) + " outside [1, " +
                          std::to_string(t) + "]");
    }
    std::vector<std::size_t> order(t);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;
    });
    FPMask m;
    m.gamma.assign(t, 0);
    for (std::size_t i = 0; i < k; ++i) m.gamma[order[i]] = 1;
    m.k = k;
    m.source_scores.assign(scores.data().begin(), scores.data().end());
    return m;
}

}  // namespace ppf

#pragma once

// Global and local prototype banks with the log-distance similarity, masked
// max-pooling over preserved tokens, frozen per-class FC heads and weighted
// logit fusion.
//
// Similarity: log((||t - p||^2 + 1) / (||t - p||^2 + eps)), eps = 1e-4.
// Strictly positive, strictly decreasing in distance, maximum log(1/eps) at
// t = p.
//
// FC heads are non-trainable: weight 1 from each prototype to its owning
// class, 0 elsewhere, so a class score is the plain sum of its own
// prototypes' similarities.

#include <cstdint>
#include <string>
#include <vector>

#include "ppf/errors.hpp"
#include "ppf/rng.hpp"
#include "ppf/rollout.hpp"
#include "ppf/tensor.hpp"

namespace ppf {

inline constexpr double kSimilarityEps = 1e-4;

struct PrototypeBank {
    Tensor global;  // [m_g x d]
    Tensor local;   // [m_l x d]
    std::vector<std::uint32_t> global_class;  // owning class per global prototype
    std::vector<std::uint32_t> local_class;   // owning class per local prototype
    std::size_t n_classes = 0;

    std::size_t global_count() const { return global_class.size(); }
    std::size_t local_count() const { return local_class.size(); }
    std::size_t global_per_class() const { return global_count() / n_classes; }
    std::size_t local_per_class() const { return local_count() / n_classes; }

    std::vector<std::size_t> local_of_class(std::size_t c) const {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < local_class.size(); ++i)
            if (local_class[i] == c) idx.push_back(i);
        return idx;
    }

    // Uniform [0, 1) init; prototypes assigned equally, class-major.
    static PrototypeBank init(std::size_t n_classes, std::size_t global_per_class,
                              std::size_t local_per_class, std::size_t dim, Rng& rng) {
        if (n_classes == 0 || global_per_class == 0 || local_per_class == 0 || dim == 0) {
            throw param_error("prototype bank: all counts must be positive");
        }
        PrototypeBank b;
        b.n_classes = n_classes;
        b.global = Tensor(Shape{n_classes * global_per_class, dim});
        b.local = Tensor(Shape{n_classes * local_per_class, dim});
        for (std::size_t i = 0; i < b.global.numel(); ++i) b.global[i] = rng.uniform();
        for (std::size_t i = 0; i < b.local.numel(); ++i) b.local[i] = rng.uniform();
        b.global_class.resize(n_classes * global_per_class);
        b.local_class.resize(n_classes * local_per_class);
        for (std::size_t i = 0; i < b.global_class.size(); ++i)
            b.global_class[i] = static_cast<std::uint32_t>(i / global_per_class);
        for (std::size_t i = 0; i < b.local_class.size(); ++i)
            b.local_class[i] = static_cast<std::uint32_t>(i / local_per_class);
        return b;
    }
};

// Frozen FC head: [C x m] with weight 1.0 at (owning class, prototype).
inline Tensor make_class_fc(const std::vector<std::uint32_t>& class_of, std::size_t n_classes) {
    Tensor fc(Shape{n_classes, class_of.size()});
    for (std::size_t i = 0; i < class_of.size(); ++i) {
        if (class_of[i] >= n_classes) {
            throw param_error("make_class_fc: prototype " + std::to_string(i) +
                              " owned by class " + std::to_string(class_of[i]) + " >= " +
                              std::to_string(n_classes));
        }
        fc.at(class_of[i], i) = 1.0;
    }
    return fc;
}

// Similarity of one prototype against every token row: [T x d], [d] -> [T].
inline Tensor similarity_map(const Tensor& tokens, const Tensor& prototype) {
    if (tokens.rank() != 2 || prototype.rank() != 1 || tokens.dim(1) != prototype.numel()) {
        throw shape_error("similarity_map: tokens " + shape_str(tokens.shape()) +
                          " vs prototype " + shape_str(prototype.shape()));
    }
    Tensor diff = sub(tokens, prototype);
    Tensor d2 = sum_rows(mul(diff, diff));
    return sub(log(add(d2, 1.0)), log(add(d2, kSimilarityEps)));
}

// Scalar similarity between a single token and a prototype.
inline Tensor similarity(const Tensor& token, const Tensor& prototype) {
    Tensor t = token.rank() == 2 ? reshape(token, Shape{token.numel()}) : token;
    if (t.rank() != 1 || prototype.rank() != 1 || t.numel() != prototype.numel()) {
        throw shape_error("similarity: token " + shape_str(token.shape()) + " vs prototype " +
                          shape_str(prototype.shape()));
    }
    return pick(similarity_map(reshape(t, Shape{1, t.numel()}), prototype), 0);
}

// Full similarity map plus the pooled score of one local prototype.
struct SimilarityMap {
    Tensor full;    // [n-1], every token position (visualization + Gaussian fits)
    Tensor pooled;  // scalar, max over preserved positions only
};

struct LocalBranchOut {
    std::vector<SimilarityMap> maps;  // one per local prototype
    Tensor scores;                    // [m_l] pooled scores
    Tensor logits;                    // [C]
};

inline LocalBranchOut local_branch(const Tensor& feature_tokens, const FPMask& mask,
                                   const PrototypeBank& bank, const Tensor& fc_local) {
    if (mask.tokens() != feature_tokens.dim(0)) {
        throw contract_error("local_branch: mask covers " + std::to_string(mask.tokens()) +
                             " tokens, features have " + std::to_string(feature_tokens.dim(0)));
    }
    if (mask.k == 0) throw contract_error("local_branch: mask preserves no tokens");

    LocalBranchOut out;
    const std::size_t m = bank.local_count();
    std::vector<Tensor> pooled;
    pooled.reserve(m);
    for (std::size_t i = 0; i < m; ++i) {
        Tensor proto = reshape(rows(bank.local, i, 1), Shape{bank.local.dim(1)});
        SimilarityMap sm;
        sm.full = similarity_map(feature_tokens, proto);
        sm.pooled = masked_max(sm.full, mask.gamma);
        pooled.push_back(sm.pooled);
        out.maps.push_back(std::move(sm));
    }
    out.scores = stack_scalars(pooled);
    out.logits = reshape(matmul(fc_local, reshape(out.scores, Shape{m, 1})),
                         Shape{fc_local.dim(0)});
    return out;
}

struct GlobalBranchOut {
    Tensor scores;  // [m_g]
    Tensor logits;  // [C]
};

inline GlobalBranchOut global_branch(const Tensor& class_token, const PrototypeBank& bank,
                                     const Tensor& fc_global) {
    Tensor t = class_token.rank() == 2 ? reshape(class_token, Shape{class_token.numel()})
                                       : class_token;
    GlobalBranchOut out;
    const std::size_t m = bank.global_count();
    // The class token is a single position: the pooled value is the score itself.
    std::vector<Tensor> scores;
    scores.reserve(m);
    for (std::size_t i = 0; i < m; ++i) {
        Tensor proto = reshape(rows(bank.global, i, 1), Shape{bank.global.dim(1)});
        scores.push_back(similarity(t, proto));
    }
    out.scores = stack_scalars(scores);
    out.logits = reshape(matmul(fc_global, reshape(out.scores, Shape{m, 1})),
                         Shape{fc_global.dim(0)});
    return out;
}

// z_c = lambda_g * z_g + lambda_l * z_l.
inline Tensor fuse(const Tensor& global_logits, const Tensor& local_logits, double lambda_g,
                   double lambda_l) {
    if (global_logits.numel() != local_logits.numel()) {
        throw shape_error("fuse: logit lengths differ, " + shape_str(global_logits.shape()) +
                          " vs " + shape_str(local_logits.shape()));
    }
    return add(mul(global_logits, lambda_g), mul(local_logits, lambda_l));
}

struct BranchLogits {
    Tensor global_logits;  // z_g
    Tensor local_logits;   // z_l
    Tensor fused;          // z_c
    double lambda_g = 0.5;
    double lambda_l = 0.5;
};

}  // namespace ppf

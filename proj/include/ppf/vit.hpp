#pragma once

// Small vision transformer: patch embedding with class token and positional
// embeddings, pre-LN encoder layers (MHSA + GELU MLP, residuals), attention
// recording, and a final layer whose attention normalization is restricted to
// the columns a foreground-preserving mask keeps.
//
// Layers 1..L-1 run unmasked; the mask is built from the attention rollout of
// those layers and applied only to layer L. Dropped tokens still produce
// outputs (they attend to preserved tokens) but preserved-token outputs are
// independent of dropped-token embeddings at the input of layer L.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ppf/errors.hpp"
#include "ppf/rng.hpp"
#include "ppf/rollout.hpp"
#include "ppf/tensor.hpp"

namespace ppf {

struct ViTConfig {
    std::size_t image_size = 32;
    std::size_t patch_size = 8;
    std::size_t channels = 3;
    std::size_t depth = 3;
    std::size_t heads = 2;
    std::size_t embed_dim = 32;
    double mlp_ratio = 4.0;
    std::size_t n_classes = 4;

    std::size_t grid() const { return image_size / patch_size; }
    std::size_t patch_tokens() const { return grid() * grid(); }
    std::size_t tokens() const { return patch_tokens() + 1; }
    std::size_t patch_dim() const { return patch_size * patch_size * channels; }
    std::size_t head_dim() const { return embed_dim / heads; }
    std::size_t mlp_hidden() const {
        return static_cast<std::size_t>(mlp_ratio * static_cast<double>(embed_dim));
    }

    void validate() const {
        if (image_size == 0 || patch_size == 0 || image_size % patch_size != 0) {
            throw param_error("vit config: image_size " + std::to_string(image_size) +
                              " must be a positive multiple of patch_size " +
                              std::to_string(patch_size));
        }
        if (embed_dim == 0 || heads == 0 || embed_dim % heads != 0) {
            throw param_error("vit config: embed_dim " + std::to_string(embed_dim) +
                              " must be a positive multiple of heads " + std::to_string(heads));
        }
        if (depth < 2) {
            throw param_error("vit config: depth must be >= 2 so the mask layer has a rollout");
        }
        if (channels == 0 || n_classes == 0 || mlp_hidden() == 0) {
            throw param_error("vit config: channels, classes and mlp width must be positive");
        }
    }
};

struct LayerParams {
    Tensor ln1_g, ln1_b;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_g, ln2_b;
    Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

struct ViTParams {
    Tensor patch_w, patch_b;  // [patch_dim x d], [d]
    Tensor cls_token;         // [1 x d]
    Tensor pos_embed;         // [n x d]
    std::vector<LayerParams> layers;
    Tensor final_ln_g, final_ln_b;

    static ViTParams shaped(const ViTConfig& cfg) {
        cfg.validate();
        const std::size_t d = cfg.embed_dim, h = cfg.mlp_hidden();
        ViTParams p;
        p.patch_w = Tensor(Shape{cfg.patch_dim(), d});
        p.patch_b = Tensor(Shape{d});
        p.cls_token = Tensor(Shape{1, d});
        p.pos_embed = Tensor(Shape{cfg.tokens(), d});
        p.layers.resize(cfg.depth);
        for (auto& l : p.layers) {
            l.ln1_g = Tensor(Shape{d}, 1.0);
            l.ln1_b = Tensor(Shape{d});
            l.wq = Tensor(Shape{d, d});
            l.bq = Tensor(Shape{d});
            l.wk = Tensor(Shape{d, d});
            l.bk = Tensor(Shape{d});
            l.wv = Tensor(Shape{d, d});
            l.bv = Tensor(Shape{d});
            l.wo = Tensor(Shape{d, d});
            l.bo = Tensor(Shape{d});
            l.ln2_g = Tensor(Shape{d}, 1.0);
            l.ln2_b = Tensor(Shape{d});
            l.mlp_w1 = Tensor(Shape{d, h});
            l.mlp_b1 = Tensor(Shape{h});
            l.mlp_w2 = Tensor(Shape{h, d});
            l.mlp_b2 = Tensor(Shape{d});
        }
        p.final_ln_g = Tensor(Shape{d}, 1.0);
        p.final_ln_b = Tensor(Shape{d});
        return p;
    }

    // Truncated-normal(0.02) weights, zero biases, unit LN gains.
    static ViTParams init(const ViTConfig& cfg, Rng& rng) {
        ViTParams p = shaped(cfg);
        auto fill = [&rng](Tensor& t) {
            for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.trunc_normal(0.02);
        };
        fill(p.patch_w);
        fill(p.cls_token);
        fill(p.pos_embed);
        for (auto& l : p.layers) {
            fill(l.wq);
            fill(l.wk);
            fill(l.wv);
            fill(l.wo);
            fill(l.mlp_w1);
            fill(l.mlp_w2);
        }
        return p;
    }

    // Stable ordered traversal; checkpoint layout and the optimizer both rely
    // on this order.
    template <typename F>
    void visit(F&& f) {
        f("embed.patch_w", patch_w);
        f("embed.patch_b", patch_b);
        f("embed.cls", cls_token);
        f("embed.pos", pos_embed);
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const std::string p = "layers." + std::to_string(i) + ".";
            auto& l = layers[i];
            f(p + "ln1.g", l.ln1_g);
            f(p + "ln1.b", l.ln1_b);
            f(p + "wq", l.wq);
            f(p + "bq", l.bq);
            f(p + "wk", l.wk);
            f(p + "bk", l.bk);
            f(p + "wv", l.wv);
            f(p + "bv", l.bv);
            f(p + "wo", l.wo);
            f(p + "bo", l.bo);
            f(p + "ln2.g", l.ln2_g);
            f(p + "ln2.b", l.ln2_b);
            f(p + "mlp.w1", l.mlp_w1);
            f(p + "mlp.b1", l.mlp_b1);
            f(p + "mlp.w2", l.mlp_w2);
            f(p + "mlp.b2", l.mlp_b2);
        }
        f("final_ln.g", final_ln_g);
        f("final_ln.b", final_ln_b);
    }
};

// Per-layer head-averaged attention captured during a forward pass. Rows sum
// to 1 before masking; in the masked final layer they sum to 1 over preserved
// columns and dropped columns are exactly zero.
struct AttentionRecord {
    std::vector<Tensor> layer_mean;  // each [n x n], detached
};

struct EncoderOutput {
    Tensor class_token;     // [1 x d]
    Tensor feature_tokens;  // [(n-1) x d]
    AttentionRecord attention;
};

// How the final-layer mask is chosen.
struct MaskPolicy {
    enum class Kind { rollout_topk, all_ones };
    Kind kind = Kind::rollout_topk;
    std::size_t top_k = 0;
    bool renormalize_rollout = true;

    static MaskPolicy topk(std::size_t k, bool renorm = true) {
        return {Kind::rollout_topk, k, renorm};
    }
    static MaskPolicy all_ones() { return {Kind::all_ones, 0, true}; }
};

// Flattens disjoint patches (row-major over the grid; row-major pixels,
// channels innermost within a patch) into a [T x patch_dim] matrix.
inline Tensor extract_patches(const Tensor& image, const ViTConfig& cfg) {
    if (image.rank() != 3 || image.dim(0) != cfg.image_size || image.dim(1) != cfg.image_size ||
        image.dim(2) != cfg.channels) {
        throw shape_error("extract_patches: image shape " + shape_str(image.shape()) +
                          " does not match config [" + std::to_string(cfg.image_size) + "x" +
                          std::to_string(cfg.image_size) + "x" + std::to_string(cfg.channels) +
                          "]");
    }
    const std::size_t g = cfg.grid(), ps = cfg.patch_size, ch = cfg.channels;
    const std::size_t w = cfg.image_size;
    Tensor patches(Shape{g * g, cfg.patch_dim()});
    for (std::size_t pr = 0; pr < g; ++pr) {
        for (std::size_t pc = 0; pc < g; ++pc) {
            double* dst = patches.data().data() + (pr * g + pc) * cfg.patch_dim();
            for (std::size_t r = 0; r < ps; ++r) {
                for (std::size_t c = 0; c < ps; ++c) {
                    for (std::size_t k = 0; k < ch; ++k) {
                        *dst++ = image[((pr * ps + r) * w + (pc * ps + c)) * ch + k];
                    }
                }
            }
        }
    }
    return patches;
}

// Patch projection + class token + positional embeddings -> [n x d].
inline Tensor patch_embed(const Tensor& image, const ViTConfig& cfg, const ViTParams& params) {
    Tensor patches = extract_patches(image, cfg);
    Tensor tokens = add(matmul(patches, params.patch_w), params.patch_b);
    Tensor seq = concat_rows(params.cls_token, tokens);
    return add(seq, params.pos_embed);
}

struct MhsaResult {
    Tensor out;        // [n x d]
    Tensor attn_mean;  // [n x n], detached head average
};

// Scaled dot-product multi-head self-attention. With a mask, normalization of
// every row runs over the preserved columns only (class-token column always
// preserved); dropped columns are exactly zero.
inline MhsaResult mhsa(const Tensor& x, const LayerParams& p, std::size_t heads,
                       const FPMask* mask = nullptr) {
    const std::size_t n = x.dim(0), d = x.dim(1);
    const std::size_t dh = d / heads;
    if (mask && mask->tokens() != n - 1) {
        throw contract_error("mhsa: mask covers " + std::to_string(mask->tokens()) +
                             " tokens but sequence has " + std::to_string(n - 1) +
                             " image tokens");
    }
    std::vector<std::uint8_t> keep;
    if (mask) keep = mask->keep_cols();

    Tensor q = add(matmul(x, p.wq), p.bq);
    Tensor k = add(matmul(x, p.wk), p.bk);
    Tensor v = add(matmul(x, p.wv), p.bv);

    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Tensor attn_sum(Shape{n, n});
    std::vector<Tensor> head_outs;
    head_outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        Tensor qh = cols(q, h * dh, dh);
        Tensor kh = cols(k, h * dh, dh);
        Tensor vh = cols(v, h * dh, dh);
        Tensor logits = mul(matmul(qh, transpose(kh)), scale);
        Tensor ah = mask ? masked_softmax_rows(logits, keep) : softmax_rows(logits);
        for (std::size_t i = 0; i < n * n; ++i) attn_sum[i] += ah[i];
        head_outs.push_back(matmul(ah, vh));
    }
    for (std::size_t i = 0; i < n * n; ++i) attn_sum[i] /= static_cast<double>(heads);

    Tensor out = add(matmul(concat_cols(head_outs), p.wo), p.bo);
    return {out, attn_sum};
}

struct LayerResult {
    Tensor out;
    Tensor attn_mean;
};

// Pre-LN transformer block: x + MHSA(LN(x)), then y + MLP(LN(y)).
inline LayerResult encoder_layer(const Tensor& x, const LayerParams& p, std::size_t heads,
                                 const FPMask* mask = nullptr) {
    MhsaResult att = mhsa(layer_norm_rows(x, p.ln1_g, p.ln1_b), p, heads, mask);
    Tensor y = add(x, att.out);
    Tensor h = gelu(add(matmul(layer_norm_rows(y, p.ln2_g, p.ln2_b), p.mlp_w1), p.mlp_b1));
    Tensor out = add(y, add(matmul(h, p.mlp_w2), p.mlp_b2));
    return {out, att.attn_mean};
}

struct EncodeResult {
    EncoderOutput out;
    FPMask mask;
};

// Full encoder pass: layers 1..L-1 unmasked with attention recording, mask
// from the rollout of those layers, masked layer L, final LN, class/feature
// split.
inline EncodeResult encode(const Tensor& image, const ViTConfig& cfg, const ViTParams& params,
                           const MaskPolicy& policy) {
    cfg.validate();
    const std::size_t n = cfg.tokens();
    Tensor x = patch_embed(image, cfg, params);

    AttentionRecord record;
    record.layer_mean.reserve(cfg.depth);
    for (std::size_t l = 0; l + 1 < cfg.depth; ++l) {
        LayerResult r = encoder_layer(x, params.layers[l], cfg.heads);
        x = r.out;
        record.layer_mean.push_back(r.attn_mean);
    }

    FPMask mask;
    if (policy.kind == MaskPolicy::Kind::all_ones) {
        mask = FPMask::all_ones(n - 1);
    } else {
        RolloutMatrix roll = rollout(record.layer_mean, policy.renormalize_rollout);
        mask = build_fp_mask(class_token_scores(roll), policy.top_k);
    }

    LayerResult last = encoder_layer(x, params.layers[cfg.depth - 1], cfg.heads, &mask);
    record.layer_mean.push_back(last.attn_mean);

    Tensor normed = layer_norm_rows(last.out, params.final_ln_g, params.final_ln_b);
    EncoderOutput out;
    out.class_token = rows(normed, 0, 1);
    out.feature_tokens = rows(normed, 1, n - 1);
    out.attention = std::move(record);
    return {std::move(out), std::move(mask)};
}

}  // namespace ppf

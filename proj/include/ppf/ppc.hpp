#pragma once

// Weighted bivariate Gaussian fits of masked similarity maps and the
// prototypical-part concentration loss.
//
// Positions are integer (row, col) grid coordinates starting at (0, 0); the
// thresholds t_mu / t_sigma are expressed in those units. With weights
// w_i = gamma_i * s_i and W = sum w_i:
//   mu_hat    = sum w_i x_i / W
//   sigma_hat = sum w_i (x_i - mu_hat)(x_i - mu_hat)^T / (W - 1)
// The sigma estimate is skipped (contributes zero downstream) when W - 1 is
// within 1e-6 of zero instead of dividing by a vanishing denominator.
//
// Gradients flow through the similarity values into prototypes and backbone;
// the mask is a hard selection and receives none.

#include <cstdint>
#include <string>
#include <vector>

#include "ppf/errors.hpp"
#include "ppf/tensor.hpp"

namespace ppf {

inline constexpr double kSigmaDenomGuard = 1e-6;

struct PPCConfig {
    double lambda_mu = 0.5;
    double lambda_sigma = 0.1;
    double t_mu = 2.0;
    double t_sigma = 1.0;

    void validate() const {
        if (lambda_mu < 0 || lambda_sigma < 0 || t_mu < 0 || t_sigma < 0) {
            throw param_error("ppc config: weights and thresholds must be >= 0");
        }
    }
};

struct GaussianFit {
    Tensor mu;         // [2], (row, col)
    Tensor sigma;      // [2 x 2], symmetric by construction
    bool has_sigma = false;  // false when W - 1 <= guard; sigma is then zero
    double weight_sum = 0.0;

    double mu_row() const { return mu[0]; }
    double mu_col() const { return mu[1]; }
    double trace_sigma() const { return sigma.at(0, 0) + sigma.at(1, 1); }
};

// Fits one prototype's similarity map restricted to preserved positions.
// `smap` is rank-1 of length rows*cols (row-major grid) or rank-2 [rows x cols].
inline GaussianFit fit_gaussian(const Tensor& smap, const std::vector<std::uint8_t>& gamma,
                                std::size_t rows, std::size_t cols) {
    if (smap.numel() != rows * cols) {
        throw shape_error("fit_gaussian: map has " + std::to_string(smap.numel()) +
                          " entries, expected " + std::to_string(rows * cols));
    }
    if (gamma.size() != rows * cols) {
        throw contract_error("fit_gaussian: mask length " + std::to_string(gamma.size()) +
                             " does not match grid " + std::to_string(rows * cols));
    }
    const std::size_t n = rows * cols;
    Tensor flat = smap.rank() == 1 ? smap : reshape(smap, Shape{n});

    Tensor mask(Shape{n});
    Tensor pos_r(Shape{n}), pos_c(Shape{n});
    for (std::size_t i = 0; i < n; ++i) {
        mask[i] = gamma[i] ? 1.0 : 0.0;
        pos_r[i] = static_cast<double>(i / cols);
        pos_c[i] = static_cast<double>(i % cols);
    }

    Tensor w = mul(flat, mask);
    Tensor wsum = sum(w);
    const double wv = wsum.value();
    if (wv <= 0.0) throw degenerate_fit_error(wv);

    Tensor mu_r = div(sum(mul(w, pos_r)), wsum);
    Tensor mu_c = div(sum(mul(w, pos_c)), wsum);

    GaussianFit fit;
    fit.weight_sum = wv;
    fit.mu = stack_scalars({mu_r, mu_c});
    fit.has_sigma = (wv - 1.0) > kSigmaDenomGuard;
    if (fit.has_sigma) {
        Tensor dr = sub(pos_r, mu_r);
        Tensor dc = sub(pos_c, mu_c);
        Tensor denom = add(wsum, -1.0);
        Tensor sxx = div(sum(mul(w, mul(dr, dr))), denom);
        Tensor sxy = div(sum(mul(w, mul(dr, dc))), denom);
        Tensor syy = div(sum(mul(w, mul(dc, dc))), denom);
        fit.sigma = reshape(stack_scalars({sxx, sxy, sxy, syy}), Shape{2, 2});
    } else {
        fit.sigma = Tensor(Shape{2, 2});
    }
    return fit;
}

inline GaussianFit fit_gaussian(const Tensor& smap, const std::vector<std::uint8_t>& gamma) {
    if (smap.rank() != 2) {
        throw shape_error("fit_gaussian: grid shape required when rows/cols are not given");
    }
    return fit_gaussian(smap, gamma, smap.dim(0), smap.dim(1));
}

// Hinge on pairwise center distances of one class's prototypes:
//   (1 / m^2) * sum_{i != j} max(t_mu - ||mu_i - mu_j||^2, 0)
inline Tensor ppc_mu(const std::vector<GaussianFit>& fits, double t_mu) {
    const std::size_t m = fits.size();
    if (m <= 1) return Tensor::scalar(0.0);
    Tensor acc = Tensor::scalar(0.0);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            if (i == j) continue;
            Tensor d = sub(fits[i].mu, fits[j].mu);
            Tensor dist2 = sum(mul(d, d));
            acc = add(acc, relu(add(neg(dist2), t_mu)));
        }
    }
    return div(acc, static_cast<double>(m * m));
}

// Hinge on covariance magnitude: tr(max(0, sigma - t_sigma)) with the max
// applied elementwise, so only diagonal entries reach the trace.
inline Tensor ppc_sigma(const GaussianFit& fit, double t_sigma) {
    if (!fit.has_sigma) return Tensor::scalar(0.0);
    Tensor sxx = pick(fit.sigma, 0);
    Tensor syy = pick(fit.sigma, 3);
    return add(relu(add(sxx, -t_sigma)), relu(add(syy, -t_sigma)));
}

// Cross-entropy of fused logits against an integer label.
inline Tensor cross_entropy(const Tensor& logits, std::size_t label) {
    if (label >= logits.numel()) {
        throw param_error("cross_entropy: label " + std::to_string(label) +
                          " out of range for " + std::to_string(logits.numel()) + " classes");
    }
    return neg(pick(log_softmax_rows(logits), label));
}

// Per-sample loss terms; the trainer averages totals over the batch.
struct LossTerms {
    Tensor total;
    Tensor ce;
    Tensor mu_term;     // ppc_mu over the sample's own-class fits (pre-lambda)
    Tensor sigma_term;  // mean over those fits of ppc_sigma (pre-lambda)
};

// L = CE + lambda_mu * ppc_mu + lambda_sigma * mean_i ppc_sigma(fit_i), with
// the fits belonging to the sample's ground-truth class.
inline LossTerms total_loss(const Tensor& fused_logits, std::size_t label,
                            const std::vector<GaussianFit>& fits, const PPCConfig& cfg) {
    cfg.validate();
    LossTerms t;
    t.ce = cross_entropy(fused_logits, label);
    t.mu_term = ppc_mu(fits, cfg.t_mu);
    if (fits.empty()) {
        t.sigma_term = Tensor::scalar(0.0);
    } else {
        Tensor acc = Tensor::scalar(0.0);
        for (const auto& f : fits) acc = add(acc, ppc_sigma(f, cfg.t_sigma));
        t.sigma_term = div(acc, static_cast<double>(fits.size()));
    }
    t.total = add(t.ce, add(mul(t.mu_term, cfg.lambda_mu), mul(t.sigma_term, cfg.lambda_sigma)));
    return t;
}

}  // namespace ppf

#pragma once

// Shared test helpers: central finite differences against recorded gradients,
// and small random-tensor factories.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "ppf/rng.hpp"
#include "ppf/tensor.hpp"

namespace ppftest {

inline ppf::Tensor random_tensor(ppf::Shape shape, ppf::Rng& rng, double lo = -2.0,
                                 double hi = 2.0) {
    ppf::Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

struct FdReport {
    double max_rel_err = 0.0;
    std::size_t worst_param = 0;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

// Checks analytic gradients of `make_loss` against central finite differences
// for every element of every tensor in `leaves`. `make_loss` must rebuild the
// whole forward pass from the current leaf values (it runs under a fresh tape
// for the analytic pass and tape-free for the FD evaluations).
inline FdReport fd_compare(const std::function<ppf::Tensor()>& make_loss,
                           std::vector<ppf::Tensor> leaves, double h = 1e-5) {
    using namespace ppf;
    for (auto& l : leaves) {
        l.set_requires_grad(true);
        l.zero_grad();
    }

    std::vector<std::vector<double>> analytic;
    {
        Tape tape;
        TapeScope scope(tape);
        Tensor loss = make_loss();
        backward(loss);
        for (auto& l : leaves) analytic.push_back(l.grad());
    }

    FdReport rep;
    for (std::size_t p = 0; p < leaves.size(); ++p) {
        Tensor& leaf = leaves[p];
        for (std::size_t i = 0; i < leaf.numel(); ++i) {
            const double orig = leaf[i];
            leaf[i] = orig + h;
            const double up = make_loss().value();
            leaf[i] = orig - h;
            const double dn = make_loss().value();
            leaf[i] = orig;
            const double numeric = (up - dn) / (2.0 * h);
            const double a = analytic[p][i];
            const double abs_diff = std::abs(a - numeric);
            // Differences under the absolute floor pass outright; otherwise
            // compare relative to the larger magnitude.
            const double rel =
                abs_diff < 1e-7 ? 0.0 : abs_diff / std::max(std::abs(a), std::abs(numeric));
            if (rel > rep.max_rel_err) {
                rep = {rel, p, i, a, numeric};
            }
        }
    }
    return rep;
}

// Convenience wrapper asserting the spec tolerance.
inline bool fd_ok(const std::function<ppf::Tensor()>& make_loss, std::vector<ppf::Tensor> leaves,
                  double tol = 1e-4, double h = 1e-5) {
    return fd_compare(make_loss, std::move(leaves), h).max_rel_err < tol;
}

}  // namespace ppftest

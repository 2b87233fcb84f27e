#pragma once

// Dense f64 tensor with reverse-mode automatic differentiation.
//
// Tensors are cheap handles onto shared storage. Ops executed while a Tape is
// active (see TapeScope) record a backward closure when any input requires
// gradients; backward(loss) replays the tape in reverse and accumulates
// d(loss)/d(leaf) into every requires-grad tensor.
//
// Broadcasting is deliberately narrow: (matrix op row-vector), (anything op
// one-element tensor) and (anything op double). Every other shape mismatch
// throws.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ppf/errors.hpp"

namespace ppf {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << "x";
        os << s[i];
    }
    os << "]";
    return os.str();
}

namespace detail {

inline void check_finite(const std::vector<double>& v) {
#ifndef NDEBUG
    for (double x : v) assert(std::isfinite(x) && "tensor holds NaN/Inf");
#else
    (void)v;
#endif
}

struct TensorData {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // empty until first accumulation

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

}  // namespace detail

class Tensor {
public:
    Tensor() : d_(std::make_shared<detail::TensorData>()) {}

    explicit Tensor(Shape shape, double fill = 0.0)
        : d_(std::make_shared<detail::TensorData>()) {
        d_->shape = std::move(shape);
        d_->data.assign(numel_of(d_->shape), fill);
    }

    Tensor(Shape shape, std::vector<double> values)
        : d_(std::make_shared<detail::TensorData>()) {
        if (numel_of(shape) != values.size()) {
            throw shape_error("tensor data length " + std::to_string(values.size()) +
                              " does not match shape " + shape_str(shape));
        }
        detail::check_finite(values);
        d_->shape = std::move(shape);
        d_->data = std::move(values);
    }

    static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

    const Shape& shape() const { return d_->shape; }
    std::size_t rank() const { return d_->shape.size(); }
    std::size_t numel() const { return d_->data.size(); }
    std::size_t dim(std::size_t i) const { return d_->shape.at(i); }

    std::size_t rows() const { return rank() == 2 ? d_->shape[0] : (rank() == 1 ? 1 : 0); }
    std::size_t cols() const { return rank() == 2 ? d_->shape[1] : (rank() == 1 ? d_->shape[0] : 0); }

    double& operator[](std::size_t i) { return d_->data[i]; }
    double operator[](std::size_t i) const { return d_->data[i]; }
    double& at(std::size_t r, std::size_t c) { return d_->data[r * d_->shape[1] + c]; }
    double at(std::size_t r, std::size_t c) const { return d_->data[r * d_->shape[1] + c]; }

    std::vector<double>& data() { return d_->data; }
    const std::vector<double>& data() const { return d_->data; }

    double value() const {
        if (numel() != 1) {
            throw contract_error("value() requires a one-element tensor, got shape " +
                                 shape_str(shape()));
        }
        return d_->data[0];
    }

    bool requires_grad() const { return d_->requires_grad; }
    Tensor& set_requires_grad(bool rg = true) {
        d_->requires_grad = rg;
        return *this;
    }

    bool has_grad() const { return !d_->grad.empty(); }
    std::vector<double>& grad() {
        d_->ensure_grad();
        return d_->grad;
    }
    const std::vector<double>& grad() const {
        if (d_->grad.empty()) {
            throw contract_error("gradient not computed for this tensor");
        }
        return d_->grad;
    }
    void zero_grad() { d_->grad.clear(); }

    // Value copy that does not participate in any graph.
    Tensor detach() const {
        Tensor t;
        t.d_->shape = d_->shape;
        t.d_->data = d_->data;
        return t;
    }

    bool same_storage(const Tensor& o) const { return d_ == o.d_; }

    std::shared_ptr<detail::TensorData> ptr() const { return d_; }

private:
    std::shared_ptr<detail::TensorData> d_;
};

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* current() { return current_; }

    void record(std::function<void()> backward_rule) {
        ops_.push_back(std::move(backward_rule));
    }

    std::size_t size() const { return ops_.size(); }

    // Reverse replay. Ops were appended in forward execution order, which is a
    // topological order of the graph, so one reverse pass settles every node.
    void run_backward() {
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    }

    void clear() { ops_.clear(); }

private:
    friend struct TapeScope;
    static thread_local Tape* current_;
    std::vector<std::function<void()>> ops_;
};

inline thread_local Tape* Tape::current_ = nullptr;

struct TapeScope {
    explicit TapeScope(Tape& t) : prev_(Tape::current_) { Tape::current_ = &t; }
    ~TapeScope() { Tape::current_ = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* prev_;
};

// Seeds d(loss)/d(loss) = 1 and replays the active tape in reverse. The tape
// is cleared afterwards; a fresh forward pass is needed for another backward.
inline void backward(Tensor& loss) {
    if (loss.numel() != 1) {
        throw contract_error("backward() requires a scalar loss, got shape " +
                             shape_str(loss.shape()));
    }
    Tape* t = Tape::current();
    if (!t) throw contract_error("backward() called with no active tape");
    loss.grad()[0] += 1.0;
    t->run_backward();
    t->clear();
}

// ---------------------------------------------------------------------------
// Op helpers
// ---------------------------------------------------------------------------

namespace detail {

using DataPtr = std::shared_ptr<TensorData>;

inline bool tracing(const Tensor& a) { return Tape::current() && a.requires_grad(); }
inline bool tracing(const Tensor& a, const Tensor& b) {
    return Tape::current() && (a.requires_grad() || b.requires_grad());
}

inline void mark_and_record(Tensor& out, std::function<void()> rule) {
    out.set_requires_grad(true);
    Tape::current()->record(std::move(rule));
}

// Dispatch for the supported binary broadcast forms.
enum class Bcast { same, row, scalar };

inline Bcast classify_bcast(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() == b.shape()) return Bcast::same;
    if (b.numel() == 1) return Bcast::scalar;
    if (a.rank() == 2 && b.rank() == 1 && b.numel() == a.dim(1)) return Bcast::row;
    throw shape_error(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) +
                      " and " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    // Commutative: let the larger operand lead.
    if (a.numel() == 1 && b.numel() > 1) return add(b, a);
    auto form = detail::classify_bcast(a, b, "add");
    Tensor out(a.shape());
    const std::size_t n = a.numel();
    const std::size_t c = form == detail::Bcast::row ? a.dim(1) : 0;
    for (std::size_t i = 0; i < n; ++i) {
        double bv = form == detail::Bcast::same   ? b[i]
                    : form == detail::Bcast::row  ? b[i % c]
                                                  : b[0];
        out[i] = a[i] + bv;
    }
    if (detail::tracing(a, b)) {
        auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
        detail::mark_and_record(out, [ad, bd, od, form, c] {
            if (od->grad.empty()) return;
            if (ad->requires_grad) {
                ad->ensure_grad();
                for (std::size_t i = 0; i < od->grad.size(); ++i) ad->grad[i] += od->grad[i];
            }
            if (bd->requires_grad) {
                bd->ensure_grad();
                for (std::size_t i = 0; i < od->grad.size(); ++i) {
                    std::size_t j = form == detail::Bcast::same  ? i
                                    : form == detail::Bcast::row ? i % c
                                                                 : 0;
                    bd->grad[j] += od->grad[i];
                }
            }
        });
    }
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    auto form = detail::classify_bcast(a, b, "sub");
    Tensor out(a.shape());
    const std::size_t n = a.numel();
    const std::size_t c = form == detail::Bcast::row ? a.dim(1) : 0;
    for (std::size_t i = 0; i < n; ++i) {
        double bv = form == detail::Bcast::same   ? b[i]
                    : form == detail::Bcast::row  ? b[i % c]
                                                  : b[0];
        out[i] = a[i] - bv;
    }
    if (detail::tracing(a, b)) {
        auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
        detail::mark_and_record(out, [ad, bd, od, form, c] {
            if (od->grad.empty()) return;
            if (ad->requires_grad) {
                ad->ensure_grad();
                for (std::size_t i = 0; i < od->grad.size(); ++i) ad->grad[i] += od->grad[i];
            }
            if (bd->requires_grad) {
                bd->ensure_grad();
                for (std::size_t i = 0; i < od->grad.size(); ++i) {
                    std::size_t j = form == detail::Bcast::same  ? i
                                    : form == detail::Bcast::row ? i % c
                                                                 : 0;
                    bd->grad[j] -= od->grad[i];
                }
            }
        });
    }
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.numel() == 1 && b.numel() > 1) return mul(b, a);
    auto form = detail::classify_bcast(a, b, "mul");
    Tensor out(a.shape());
    const std::size_t n = a.numel();
    const std::size_t c = form == detail::Bcast::row ? a.dim(1) : 0;
    for (std::size_t i = 0; i < n; ++i) {
        double bv = form == detail::Bcast::same   ? b[i]
                    : form == detail::Bcast::row  ? b[i % c]
                                                  : b[0];
        out[i] = a[i] * bv;
    }
    if (detail::tracing(a, b)) {
        auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
        detail::mark_and_record(out, [ad, bd, od, form, c] {
            if (od->grad.empty()) return;
            if (ad->requires_grad) {
                ad->ensure_grad();
                for (std::size_t i = 0; i < od->grad.size(); ++i) {
                    std::size_t j = form == detail::Bcast::same  ? i
                                    : form == detail::Bcast::row ? i % c
                                                                 : 0;
                    ad->grad[i] += od->grad[i] * bd->data[j];
                }
            }
            if (bd->requires_grad) {
                bd->ensure_grad();
                for (std::size_t i = 0; i < od->grad.size(); ++i) {
                    std::size_t j = form == detail::Bcast::same  ? i
                                    : form == detail::Bcast::row ? i % c
                                                                 : 0;
                    bd->grad[j] += od->grad[i] * ad->data[i];
                }
            }
        });
    }
    return out;
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    auto form = detail::classify_bcast(a, b, "div");
    Tensor out(a.shape());
    const std::size_t n = a.numel();
    const std::size_t c = form == detail::Bcast::row ? a.dim(1) : 0;
    for (std::size_t i = 0; i < n; ++i) {
        double bv = form == detail::Bcast::same   ? b[i]
                    : form == detail::Bcast::row  ? b[i % c]
                                                  : b[0];
        out[i] = a[i] / bv;
    }
    if (detail::tracing(a, b)) {
        auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
        detail::mark_and_record(out, [ad, bd, od, form, c] {
            if (od->grad.empty()) return;
            for (std::size_t i = 0; i < od->grad.size(); ++i) {
                std::size_t j = form == detail::Bcast::same  ? i
                                : form == detail::Bcast::row ? i % c
                                                             : 0;
                double bv = bd->data[j];
                if (ad->requires_grad) {
                    ad->ensure_grad();
                    ad->grad[i] += od->grad[i] / bv;
                }
                if (bd->requires_grad) {
                    bd->ensure_grad();
                    bd->grad[j] -= od->grad[i] * ad->data[i] / (bv * bv);
                }
            }
        });
    }
    return out;
}

inline Tensor add(const Tensor& a, double c) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] + c;
    if (detail::tracing(a)) {
        auto ad = a.ptr(), od = out.ptr();
        detail::mark_and_record(out, [ad, od] {
            if (od->grad.empty()) return;
            ad->ensure_grad();
            for (std::size_t i = 0; i < od->grad.size(); ++i) ad->grad[i] += od->grad[i];
        });
    }
    return out;
}

inline Tensor mul(const Tensor& a, double c) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * c;
    if (detail::tracing(a)) {
        auto ad = a.ptr(), od = out.ptr();
        detail::mark_and_record(out, [ad, od, c] {
            if (od->grad.empty()) return;
            ad->ensure_grad();
            for (std::size_t i = 0; i < od->grad.size(); ++i) ad->grad[i] += od->grad[i] * c;
        });
    }
    return out;
}

inline Tensor sub(const Tensor& a, double c) { return add(a, -c); }
inline Tensor neg(const Tensor& a) { return mul(a, -1.0); }
inline Tensor div(const Tensor& a, double c) { return mul(a, 1.0 / c); }

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw shape_error("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                          shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out(Shape{m, n});
    const double* ap = a.data().data();
    const double* bp = b.data().data();
    double* op = out.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ap[i * k + p];
            if (av == 0.0) continue;
            const double* brow = bp + p * n;
            double* orow = op + i * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    if (detail::tracing(a, b)) {
        auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
        detail::mark_and_record(out, [ad, bd, od, m, k, n] {
            if (od->grad.empty()) return;
            const double* g = od->grad.data();
            if (ad->requires_grad) {
                ad->ensure_grad();
                // dA = G * B^T
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t p = 0; p < k; ++p) {
                        double acc = 0.0;
                        const double* grow = g + i * n;
                        const double* brow = bd->data.data() + p * n;
                        for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        ad->grad[i * k + p] += acc;
                    }
                }
            }
            if (bd->requires_grad) {
                bd->ensure_grad();
                // dB = A^T * G
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t p = 0; p < k; ++p) {
                        const double av = ad->data[i * k + p];
                        if (av == 0.0) continue;
                        const double* grow = g + i * n;
                        double* brow = bd->grad.data() + p * n;
                        for (std::size_t j = 0; j < n; ++j) brow[j] += av * grow[j];
                    }
                }
            }
        });
    }
    return out;
}

inline Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw shape_error("transpose: rank-2 tensor required, got " + shape_str(a.shape()));
    const std::size_t r = a.dim(0), c = a.dim(1);
    Tensor out(Shape{c, r});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out.at(j, i) = a.at(i, j);
    if (detail::tracing(a)) {
        auto ad = a.ptr(), od = out.ptr();
        detail::mark_and_record(out, [ad, od, r, c] {
            if (od->grad.empty()) return;
            ad->ensure_grad();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) ad->grad[i * c + j] += od->grad[j * r + i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) s += a[i];
    Tensor out = Tensor::scalar(s);
    if (detail::tracing(a)) {
        auto ad = a.ptr(), od = out.ptr();
        detail::mark_and_record(out, [ad, od] {
            if (od->grad.empty()) return;
            ad->ensure_grad();
            for (double& g : ad->grad) g += od->grad[0];
        });
    }
    return out;
}

inline Tensor mean(const Tensor& a) {
    if (a.numel() == 0) throw contract_error("mean of empty tensor");
    return div(sum(a), static_cast<double>(a.numel()));
}

// Per-row sums of a matrix: [r x c] -> [r].
inline Tensor sum_rows(const Tensor& a) {
    if (a.rank() != 2) throw shape_error("sum_rows: rank-2 tensor required, got " + shape_str(a.shape()));
    const std::size_t r = a.dim(0), c = a.dim(1);
    Tensor out(Shape{r});
    for (std::size_t i = 0; i < r; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += a.at(i, j);
        out[i] = s;
    }
    if (detail::tracing(a)) {
        auto ad = a.ptr(), od = out.ptr();
        detail::mark_and_record(out, [ad, od, r, c] {
            if (od->grad.empty()) return;
            ad->ensure_grad();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) ad->grad[i * c + j] += od->grad[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

inline Tensor log(const Tensor& a) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) {
        if (a[i] <= 0.0) throw param_error("log: non-positive input " + std::to_string(a[i]));
        out[i] = std::log(a[i]);
    }
    if (detail::tracing(a)) {
        auto ad = a.ptr(), od = out.ptr();
        detail::mark_and_record(out, [ad, od] {
            if (od->grad.empty()) return;
            ad->ensure_grad();
            for (std::size_t i = 0; i < od->grad.size(); ++i)
                ad->grad[i] += od->grad[i] / ad->data[i];
        });
    }
    return out;
}

inline Tensor exp(const Tensor& a) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = std::exp(a[i]);
    if (detail::tracing(a)) {
        auto ad = a.ptr(), od = out.ptr();
        detail::mark_and_record(out, [ad, od] {
            if (od->grad.empty()) return;
            ad->ensure_grad();
            for (std::size_t i = 0; i < od->grad.size(); ++i)
                ad->grad[i] += od->grad[i] * od->data[i];
        });
    }
    return out;
}

inline Tensor relu(const Tensor& a) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
    if (detail::tracing(a)) {
        auto ad = a.ptr(), od = out.ptr();
        detail::mark_and_record(out, [ad, od] {
            if (od->grad.empty()) return;
            ad->ensure_grad();
            for (std::size_t i = 0; i < od->grad.size(); ++i)
                if (ad->data[i] > 0.0) ad->grad[i] += od->grad[i];
        });
    }
    return out;
}

inline Tensor gelu(const Tensor& a) {
    constexpr double inv_sqrt2 = 0.7071067811865475;
    constexpr double inv_sqrt2pi = 0.3989422804014327;
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) {
        out[i] = 0.5 * a[i] * (1.0 + std::erf(a[i] * inv_sqrt2));
    }
    if (detail::tracing(a)) {
        auto ad = a.ptr(), od = out.ptr();
        detail::mark_and_record(out, [ad, od] {
            if (od->grad.empty()) return;
            ad->ensure_grad();
            for (std::size_t i = 0; i < od->grad.size(); ++i) {
                const double x = ad->data[i];
                const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
                const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
                ad->grad[i] += od->grad[i] * (cdf + x * pdf);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Softmax family (rank-1 input treated as a single row)
// ---------------------------------------------------------------------------

namespace detail {

inline std::pair<std::size_t, std::size_t> row_view(const Tensor& x, const char* op) {
    if (x.rank() == 1) return {1, x.dim(0)};
    if (x.rank() == 2) return {x.dim(0), x.dim(1)};
    throw shape_error(std::string(op) + ": rank-1 or rank-2 tensor required, got " +
                      shape_str(x.shape()));
}

}  // namespace detail

// Row-wise softmax with max subtraction.
inline Tensor softmax_rows(const Tensor& x) {
    auto [r, c] = detail::row_view(x, "softmax_rows");
    if (c == 0) throw shape_error("softmax_rows: empty rows");
    Tensor out(x.shape());
    for (std::size_t i = 0; i < r; ++i) {
        const double* xi = x.data().data() + i * c;
        double* oi = out.data().data() + i * c;
        double m = xi[0];
        for (std::size_t j = 1; j < c; ++j) m = std::max(m, xi[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            oi[j] = std::exp(xi[j] - m);
            z += oi[j];
        }
        for (std::size_t j = 0; j < c; ++j) oi[j] /= z;
    }
    if (detail::tracing(x)) {
        auto xd = x.ptr(), od = out.ptr();
        detail::mark_and_record(out, [xd, od, r, c] {
            if (od->grad.empty()) return;
            xd->ensure_grad();
            for (std::size_t i = 0; i < r; ++i) {
                const double* y = od->data.data() + i * c;
                const double* g = od->grad.data() + i * c;
                double dot = 0.0;
                for (std::size_t j = 0; j < c; ++j) dot += g[j] * y[j];
                double* dx = xd->grad.data() + i * c;
                for (std::size_t j = 0; j < c; ++j) dx[j] += y[j] * (g[j] - dot);
            }
        });
    }
    return out;
}

// Row-wise softmax restricted to columns with keep[j] == 1. Dropped columns
// are exactly zero; surviving columns renormalize to sum 1.
inline Tensor masked_softmax_rows(const Tensor& x, const std::vector<std::uint8_t>& keep) {
    auto [r, c] = detail::row_view(x, "masked_softmax_rows");
    if (keep.size() != c) {
        throw contract_error("masked_softmax_rows: mask length " + std::to_string(keep.size()) +
                             " does not match column count " + std::to_string(c));
    }
    bool any = false;
    for (auto k : keep) any = any || (k != 0);
    if (!any) throw contract_error("masked_softmax_rows: mask keeps no columns");

    Tensor out(x.shape());
    for (std::size_t i = 0; i < r; ++i) {
        const double* xi = x.data().data() + i * c;
        double* oi = out.data().data() + i * c;
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < c; ++j)
            if (keep[j]) m = std::max(m, xi[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            oi[j] = keep[j] ? std::exp(xi[j] - m) : 0.0;
            z += oi[j];
        }
        for (std::size_t j = 0; j < c; ++j) oi[j] /= z;
    }
    if (detail::tracing(x)) {
        auto xd = x.ptr(), od = out.ptr();
        detail::mark_and_record(out, [xd, od, r, c] {
            if (od->grad.empty()) return;
            xd->ensure_grad();
            for (std::size_t i = 0; i < r; ++i) {
                const double* y = od->data.data() + i * c;
                const double* g = od->grad.data() + i * c;
                double dot = 0.0;
                for (std::size_t j = 0; j < c; ++j) dot += g[j] * y[j];
                double* dx = xd->grad.data() + i * c;
                for (std::size_t j = 0; j < c; ++j) dx[j] += y[j] * (g[j] - dot);
            }
        });
    }
    return out;
}

inline Tensor log_softmax_rows(const Tensor& x) {
    auto [r, c] = detail::row_view(x, "log_softmax_rows");
    if (c == 0) throw shape_error("log_softmax_rows: empty rows");
    Tensor out(x.shape());
    for (std::size_t i = 0; i < r; ++i) {
        const double* xi = x.data().data() + i * c;
        double* oi = out.data().data() + i * c;
        double m = xi[0];
        for (std::size_t j = 1; j < c; ++j) m = std::max(m, xi[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) z += std::exp(xi[j] - m);
        const double lz = m + std::log(z);
        for (std::size_t j = 0; j < c; ++j) oi[j] = xi[j] - lz;
    }
    if (detail::tracing(x)) {
        auto xd = x.ptr(), od = out.ptr();
        detail::mark_and_record(out, [xd, od, r, c] {
            if (od->grad.empty()) return;
            xd->ensure_grad();
            for (std::size_t i = 0; i < r; ++i) {
                const double* y = od->data.data() + i * c;
                const double* g = od->grad.data() + i * c;
                double gs = 0.0;
                for (std::size_t j = 0; j < c; ++j) gs += g[j];
                double* dx = xd->grad.data() + i * c;
                for (std::size_t j = 0; j < c; ++j) dx[j] += g[j] - std::exp(y[j]) * gs;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Row-wise layer normalization with learnable affine
// ---------------------------------------------------------------------------

inline Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                              double eps = 1e-5) {
    if (x.rank() != 2) throw shape_error("layer_norm_rows: rank-2 input required");
    const std::size_t r = x.dim(0), c = x.dim(1);
    if (gamma.numel() != c || beta.numel() != c) {
        throw shape_error("layer_norm_rows: affine params must have length " + std::to_string(c));
    }
    Tensor out(x.shape());
    std::vector<double> rstd(r), xhat(r * c);
    for (std::size_t i = 0; i < r; ++i) {
        const double* xi = x.data().data() + i * c;
        double mu = 0.0;
        for (std::size_t j = 0; j < c; ++j) mu += xi[j];
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) var += (xi[j] - mu) * (xi[j] - mu);
        var /= static_cast<double>(c);
        rstd[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < c; ++j) {
            xhat[i * c + j] = (xi[j] - mu) * rstd[i];
            out.at(i, j) = xhat[i * c + j] * gamma[j] + beta[j];
        }
    }
    if (Tape::current() &&
        (x.requires_grad() || gamma.requires_grad() || beta.requires_grad())) {
        auto xd = x.ptr(), gd = gamma.ptr(), bd = beta.ptr(), od = out.ptr();
        auto rs = std::make_shared<std::vector<double>>(std::move(rstd));
        auto xh = std::make_shared<std::vector<double>>(std::move(xhat));
        detail::mark_and_record(out, [xd, gd, bd, od, rs, xh, r, c] {
            if (od->grad.empty()) return;
            const double* g = od->grad.data();
            if (bd->requires_grad) {
                bd->ensure_grad();
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) bd->grad[j] += g[i * c + j];
            }
            if (gd->requires_grad) {
                gd->ensure_grad();
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j)
                        gd->grad[j] += g[i * c + j] * (*xh)[i * c + j];
            }
            if (xd->requires_grad) {
                xd->ensure_grad();
                const double cn = static_cast<double>(c);
                std::vector<double> dxh(c);
                for (std::size_t i = 0; i < r; ++i) {
                    double s1 = 0.0, s2 = 0.0;
                    for (std::size_t j = 0; j < c; ++j) {
                        dxh[j] = g[i * c + j] * gd->data[j];
                        s1 += dxh[j];
                        s2 += dxh[j] * (*xh)[i * c + j];
                    }
                    for (std::size_t j = 0; j < c; ++j) {
                        xd->grad[i * c + j] +=
                            (*rs)[i] * (dxh[j] - s1 / cn - (*xh)[i * c + j] * s2 / cn);
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Slicing, stacking, reshaping
// ---------------------------------------------------------------------------

inline Tensor rows(const Tensor& a, std::size_t start, std::size_t count) {
    if (a.rank() != 2) throw shape_error("rows: rank-2 tensor required");
    const std::size_t r = a.dim(0), c = a.dim(1);
    if (start + count > r) {
        throw param_error("rows: slice [" + std::to_string(start) + ", " +
                          std::to_string(start + count) + ") exceeds " + std::to_string(r) +
                          " rows");
    }
    Tensor out(Shape{count, c});
    std::copy(a.data().begin() + start * c, a.data().begin() + (start + count) * c,
              out.data().begin());
    if (detail::tracing(a)) {
        auto ad = a.ptr(), od = out.ptr();
        detail::mark_and_record(out, [ad, od, start, count, c] {
            if (od->grad.empty()) return;
            ad->ensure_grad();
            for (std::size_t i = 0; i < count * c; ++i) ad->grad[start * c + i] += od->grad[i];
        });
    }
    return out;
}

inline Tensor cols(const Tensor& a, std::size_t start, std::size_t count) {
    if (a.rank() != 2) throw shape_error("cols: rank-2 tensor required");
    const std::size_t r = a.dim(0), c = a.dim(1);
    if (start + count > c) {
        throw param_error("cols: slice [" + std::to_string(start) + ", " +
                          std::to_string(start + count) + ") exceeds " + std::to_string(c) +
                          " columns");
    }
    Tensor out(Shape{r, count});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < count; ++j) out.at(i, j) = a.at(i, start + j);
    if (detail::tracing(a)) {
        auto ad = a.ptr(), od = out.ptr();
        detail::mark_and_record(out, [ad, od, r, c, start, count] {
            if (od->grad.empty()) return;
            ad->ensure_grad();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < count; ++j)
                    ad->grad[i * c + start + j] += od->grad[i * count + j];
        });
    }
    return out;
}

inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
        throw shape_error("concat_rows: incompatible shapes " + shape_str(a.shape()) + " and " +
                          shape_str(b.shape()));
    }
    const std::size_t c = a.dim(1), ra = a.dim(0), rb = b.dim(0);
    Tensor out(Shape{ra + rb, c});
    std::copy(a.data().begin(), a.data().end(), out.data().begin());
    std::copy(b.data().begin(), b.data().end(), out.data().begin() + ra * c);
    if (detail::tracing(a, b)) {
        auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
        detail::mark_and_record(out, [ad, bd, od, ra, rb, c] {
            if (od->grad.empty()) return;
            if (ad->requires_grad) {
                ad->ensure_grad();
                for (std::size_t i = 0; i < ra * c; ++i) ad->grad[i] += od->grad[i];
            }
            if (bd->requires_grad) {
                bd->ensure_grad();
                for (std::size_t i = 0; i < rb * c; ++i) bd->grad[i] += od->grad[ra * c + i];
            }
        });
    }
    return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw contract_error("concat_cols: no parts");
    const std::size_t r = parts[0].dim(0);
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(0) != r) {
            throw shape_error("concat_cols: incompatible part shape " + shape_str(p.shape()));
        }
        total += p.dim(1);
    }
    Tensor out(Shape{r, total});
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t pc = p.dim(1);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < pc; ++j) out.at(i, off + j) = p.at(i, j);
        off += pc;
    }
    bool any_grad = false;
    for (const auto& p : parts) any_grad = any_grad || p.requires_grad();
    if (Tape::current() && any_grad) {
        std::vector<detail::DataPtr> pds;
        pds.reserve(parts.size());
        for (const auto& p : parts) pds.push_back(p.ptr());
        auto od = out.ptr();
        detail::mark_and_record(out, [pds, od, r, total] {
            if (od->grad.empty()) return;
            std::size_t off2 = 0;
            for (const auto& pd : pds) {
                const std::size_t pc = pd->shape[1];
                if (pd->requires_grad) {
                    pd->ensure_grad();
                    for (std::size_t i = 0; i < r; ++i)
                        for (std::size_t j = 0; j < pc; ++j)
                            pd->grad[i * pc + j] += od->grad[i * total + off2 + j];
                }
                off2 += pc;
            }
        });
    }
    return out;
}

inline Tensor reshape(const Tensor& a, Shape new_shape) {
    if (numel_of(new_shape) != a.numel()) {
        throw shape_error("reshape: cannot view " + shape_str(a.shape()) + " as " +
                          shape_str(new_shape));
    }
    Tensor out(std::move(new_shape));
    out.data() = a.data();
    if (detail::tracing(a)) {
        auto ad = a.ptr(), od = out.ptr();
        detail::mark_and_record(out, [ad, od] {
            if (od->grad.empty()) return;
            ad->ensure_grad();
            for (std::size_t i = 0; i < od->grad.size(); ++i) ad->grad[i] += od->grad[i];
        });
    }
    return out;
}

inline Tensor pick(const Tensor& a, std::size_t flat_index) {
    if (flat_index >= a.numel()) {
        throw param_error("pick: index " + std::to_string(flat_index) + " out of range for " +
                          std::to_string(a.numel()) + " elements");
    }
    Tensor out = Tensor::scalar(a[flat_index]);
    if (detail::tracing(a)) {
        auto ad = a.ptr(), od = out.ptr();
        detail::mark_and_record(out, [ad, od, flat_index] {
            if (od->grad.empty()) return;
            ad->ensure_grad();
            ad->grad[flat_index] += od->grad[0];
        });
    }
    return out;
}

inline Tensor stack_scalars(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw contract_error("stack_scalars: no inputs");
    Tensor out(Shape{xs.size()});
    bool any_grad = false;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (xs[i].numel() != 1) {
            throw shape_error("stack_scalars: input " + std::to_string(i) + " has shape " +
                              shape_str(xs[i].shape()));
        }
        out[i] = xs[i][0];
        any_grad = any_grad || xs[i].requires_grad();
    }
    if (Tape::current() && any_grad) {
        std::vector<detail::DataPtr> pds;
        pds.reserve(xs.size());
        for (const auto& x : xs) pds.push_back(x.ptr());
        auto od = out.ptr();
        detail::mark_and_record(out, [pds, od] {
            if (od->grad.empty()) return;
            for (std::size_t i = 0; i < pds.size(); ++i) {
                if (!pds[i]->requires_grad) continue;
                pds[i]->ensure_grad();
                pds[i]->grad[0] += od->grad[i];
            }
        });
    }
    return out;
}

// Max over positions with keep[i] == 1 of a rank-1 tensor. Ties resolve to the
// lowest index; the gradient routes there.
inline Tensor masked_max(const Tensor& a, const std::vector<std::uint8_t>& keep) {
    if (a.rank() != 1) throw shape_error("masked_max: rank-1 tensor required");
    if (keep.size() != a.numel()) {
        throw contract_error("masked_max: mask length " + std::to_string(keep.size()) +
                             " does not match tensor length " + std::to_string(a.numel()));
    }
    std::size_t best = keep.size();
    for (std::size_t i = 0; i < keep.size(); ++i) {
        if (!keep[i]) continue;
        if (best == keep.size() || a[i] > a[best]) best = i;
    }
    if (best == keep.size()) throw contract_error("masked_max: mask keeps no positions");
    Tensor out = Tensor::scalar(a[best]);
    if (detail::tracing(a)) {
        auto ad = a.ptr(), od = out.ptr();
        detail::mark_and_record(out, [ad, od, best] {
            if (od->grad.empty()) return;
            ad->ensure_grad();
            ad->grad[best] += od->grad[0];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Operator sugar
// ---------------------------------------------------------------------------

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator+(const Tensor& a, double c) { return add(a, c); }
inline Tensor operator-(const Tensor& a, double c) { return add(a, -c); }
inline Tensor operator*(const Tensor& a, double c) { return mul(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return mul(a, c); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

}  // namespace ppf

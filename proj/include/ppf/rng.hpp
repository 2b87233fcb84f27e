#pragma once

// Seeded RNG wrapper. All distributions are derived from raw engine draws so
// that results are identical across platforms and the full state round-trips
// through a string (needed for resumable checkpoints).

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "ppf/errors.hpp"

namespace ppf {

class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller; consumes two draws per value, no spare
    // is cached so state stays a pure function of the engine.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    // Normal(0, sigma) resampled until within +/- 2 sigma.
    double trunc_normal(double sigma) {
        for (;;) {
            const double x = normal() * sigma;
            if (std::abs(x) <= 2.0 * sigma) return x;
        }
    }

    // Uniform integer in [0, n).
    std::size_t index(std::size_t n) {
        if (n == 0) throw param_error("Rng::index: empty range");
        return static_cast<std::size_t>(eng_() % n);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[index(i)]);
        }
    }

    std::string state() const {
        std::ostringstream os;
        os << eng_;
        return os.str();
    }

    void set_state(const std::string& s) {
        std::istringstream is(s);
        is >> eng_;
        if (is.fail()) throw param_error("Rng::set_state: malformed state string");
    }

private:
    std::mt19937_64 eng_;
};

}  // namespace ppf

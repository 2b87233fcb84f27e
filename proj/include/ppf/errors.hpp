#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ppf {

// Base class for everything thrown by this library.
struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Operand shapes do not line up (matmul inner dims, elementwise mismatch, ...).
struct shape_error : error {
    using error::error;
};

// A caller broke an API contract (non-scalar loss, empty mask, bad state).
struct contract_error : error {
    using error::error;
};

// An argument value is out of its documented range.
struct param_error : error {
    using error::error;
};

// A binary file does not match its expected layout. Carries the byte offset
// at which parsing failed.
struct format_error : error {
    std::size_t offset;

    format_error(const std::string& msg, std::size_t byte_offset)
        : error(msg + " (at byte offset " + std::to_string(byte_offset) + ")"),
          offset(byte_offset) {}
};

// Weighted Gaussian fit got a non-positive total weight. Carries the weight sum.
struct degenerate_fit_error : error {
    double weight_sum;

    explicit degenerate_fit_error(double w)
        : error("degenerate gaussian fit: total weight " + std::to_string(w) +
                " is not positive"),
          weight_sum(w) {}
};

// Filesystem / stream failure.
struct io_error : error {
    using error::error;
};

}  // namespace ppf

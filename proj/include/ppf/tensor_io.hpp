#pragma once

// Little-endian binary tensor records and the low-level readers/writers shared
// by checkpoint files.
//
// Tensor record layout:
//   magic "PTNS" | u32 version=1 | u32 rank | u64 dims[rank] | f64 data[prod]

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "ppf/errors.hpp"
#include "ppf/tensor.hpp"

namespace ppf {

namespace io {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline void put_f64(std::ostream& os, double v) {
    put_u64(os, std::bit_cast<std::uint64_t>(v));
}

inline void put_string(std::ostream& os, const std::string& s) {
    put_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

// Tracks the byte offset of every read so format errors can point at it.
class Reader {
public:
    explicit Reader(std::istream& in) : in_(in) {}

    std::size_t offset() const { return offset_; }

    void read_exact(void* dst, std::size_t n, const char* what) {
        in_.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n) {
            throw format_error(std::string("truncated file while reading ") + what, offset_);
        }
        offset_ += n;
    }

    std::uint32_t u32(const char* what) {
        unsigned char b[4];
        read_exact(b, 4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
        return v;
    }

    std::uint64_t u64(const char* what) {
        unsigned char b[8];
        read_exact(b, 8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
        return v;
    }

    double f64(const char* what) { return std::bit_cast<double>(u64(what)); }

    std::string string(const char* what) {
        const std::size_t start = offset_;
        const std::uint32_t len = u32(what);
        if (len > (1u << 30)) {
            throw format_error(std::string("implausible string length for ") + what, start);
        }
        std::string s(len, '\0');
        if (len) read_exact(s.data(), len, what);
        return s;
    }

    void expect_magic(const char magic[4], const char* what) {
        const std::size_t start = offset_;
        char got[4];
        read_exact(got, 4, what);
        if (std::memcmp(got, magic, 4) != 0) {
            throw format_error(std::string("bad magic for ") + what + ": expected '" +
                                   std::string(magic, 4) + "', got '" + std::string(got, 4) + "'",
                               start);
        }
    }

private:
    std::istream& in_;
    std::size_t offset_ = 0;
};

}  // namespace io

inline void write_tensor(std::ostream& os, const Tensor& t) {
    os.write("PTNS", 4);
    io::put_u32(os, 1);
    io::put_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) io::put_u64(os, d);
    for (double v : t.data()) io::put_f64(os, v);
}

inline Tensor read_tensor(io::Reader& r) {
    r.expect_magic("PTNS", "tensor record");
    const std::size_t vpos = r.offset();
    const std::uint32_t version = r.u32("tensor version");
    if (version != 1) {
        throw format_error("unsupported tensor version " + std::to_string(version), vpos);
    }
    const std::size_t rpos = r.offset();
    const std::uint32_t rank = r.u32("tensor rank");
    if (rank > 8) throw format_error("implausible tensor rank " + std::to_string(rank), rpos);
    Shape shape(rank);
    for (std::uint32_t i = 0; i < rank; ++i) {
        const std::size_t dpos = r.offset();
        const std::uint64_t d = r.u64("tensor dim");
        if (d > (1ull << 32)) throw format_error("implausible tensor dimension", dpos);
        shape[i] = static_cast<std::size_t>(d);
    }
    const std::size_t n = numel_of(shape);
    if (n > (1ull << 28)) {
        throw format_error("implausible tensor element count " + std::to_string(n), rpos);
    }
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i) data[i] = r.f64("tensor data");
    return Tensor(std::move(shape), std::move(data));
}

inline Tensor read_tensor(std::istream& in) {
    io::Reader r(in);
    return read_tensor(r);
}

}  // namespace ppf

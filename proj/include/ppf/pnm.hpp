#pragma once

// Binary PGM (P5) / PPM (P6) reading and writing, maxval 255 only. Header
// comments (# ...) are accepted. Parse failures throw format_error carrying
// the byte offset.

#include <cctype>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "ppf/errors.hpp"
#include "ppf/tensor.hpp"

namespace ppf {

namespace pnm_detail {

struct Cursor {
    const std::string& bytes;
    std::size_t pos = 0;

    bool eof() const { return pos >= bytes.size(); }
    char peek() const { return bytes[pos]; }

    void skip_space_and_comments(const char* what) {
        for (;;) {
            while (!eof() && std::isspace(static_cast<unsigned char>(peek()))) ++pos;
            if (!eof() && peek() == '#') {
                while (!eof() && peek() != '\n') ++pos;
                continue;
            }
            break;
        }
        if (eof()) throw format_error(std::string("truncated header before ") + what, pos);
    }

    std::size_t integer(const char* what) {
        skip_space_and_comments(what);
        const std::size_t start = pos;
        std::size_t v = 0;
        bool any = false;
        while (!eof() && std::isdigit(static_cast<unsigned char>(peek()))) {
            v = v * 10 + static_cast<std::size_t>(peek() - '0');
            ++pos;
            any = true;
            if (v > 1000000) throw format_error(std::string("implausible ") + what, start);
        }
        if (!any) throw format_error(std::string("expected integer ") + what, start);
        return v;
    }
};

}  // namespace pnm_detail

// Reads a P5/P6 file into an [H x W x C] tensor with values in [0, 1],
// C = 1 for P5 and 3 for P6.
inline Tensor read_pnm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    pnm_detail::Cursor cur{bytes};
    if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
        throw format_error("bad magic: expected P5 or P6", 0);
    }
    const std::size_t channels = bytes[1] == '6' ? 3 : 1;
    cur.pos = 2;

    const std::size_t w = cur.integer("width");
    const std::size_t h = cur.integer("height");
    const std::size_t maxval_pos = cur.pos;
    const std::size_t maxval = cur.integer("maxval");
    if (maxval != 255) {
        throw format_error("unsupported maxval " + std::to_string(maxval), maxval_pos);
    }
    if (cur.eof() || !std::isspace(static_cast<unsigned char>(cur.peek()))) {
        throw format_error("expected single whitespace after maxval", cur.pos);
    }
    ++cur.pos;

    const std::size_t need = w * h * channels;
    if (bytes.size() - cur.pos < need) {
        throw format_error("truncated raster: need " + std::to_string(need) + " bytes, have " +
                               std::to_string(bytes.size() - cur.pos),
                           cur.pos);
    }
    Tensor img(Shape{h, w, channels});
    for (std::size_t i = 0; i < need; ++i) {
        img[i] = static_cast<double>(static_cast<unsigned char>(bytes[cur.pos + i])) / 255.0;
    }
    return img;
}

inline void write_ppm(const std::string& path, const Tensor& image) {
    if (image.rank() != 3 || image.dim(2) != 3) {
        throw shape_error("write_ppm: expected [H x W x 3], got " + shape_str(image.shape()));
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot write " + path);
    out << "P6\n" << image.dim(1) << " " << image.dim(0) << "\n255\n";
    for (std::size_t i = 0; i < image.numel(); ++i) {
        double v = image[i];
        v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
        out.put(static_cast<char>(static_cast<int>(v * 255.0 + 0.5)));
    }
    if (!out) throw io_error("write failed for " + path);
}

inline void write_pgm(const std::string& path, const Tensor& gray) {
    if (gray.rank() != 2) {
        throw shape_error("write_pgm: expected [H x W], got " + shape_str(gray.shape()));
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot write " + path);
    out << "P5\n" << gray.dim(1) << " " << gray.dim(0) << "\n255\n";
    for (std::size_t i = 0; i < gray.numel(); ++i) {
        double v = gray[i];
        v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
        out.put(static_cast<char>(static_cast<int>(v * 255.0 + 0.5)));
    }
    if (!out) throw io_error("write failed for " + path);
}

}  // namespace ppf

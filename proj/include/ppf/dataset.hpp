#pragma once

// Synthetic multi-class shape dataset with exact foreground masks, plus the
// on-disk dataset directory layout (images/NNNNN.ppm, masks/NNNNN.pgm,
// labels.txt).
//
// Each of the 8 class templates places a distinct geometry at a random
// position and scale on a structured-noise background. Every shape carries
// two differently textured sub-parts so part-level prototypes have at least
// two things to learn. The foreground mask is the exact painted footprint,
// covering 10-60% of the image by construction.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "ppf/errors.hpp"
#include "ppf/pnm.hpp"
#include "ppf/rng.hpp"
#include "ppf/tensor.hpp"

namespace ppf {

struct Sample {
    Tensor image;                     // [H x W x 3] in [0, 1]
    std::size_t label = 0;
    std::vector<std::uint8_t> fg_mask;  // H*W, 1 = foreground; empty for external images

    bool has_fg_mask() const { return !fg_mask.empty(); }
};

namespace dataset_detail {

struct Rgb {
    double r, g, b;
};

enum class Pattern { solid, checker, hstripes, vstripes, dots };

struct PartStyle {
    Pattern pattern;
    Rgb primary;
    Rgb secondary;
};

inline Rgb style_color(const PartStyle& st, std::size_t r, std::size_t c) {
    switch (st.pattern) {
        case Pattern::solid:
            return st.primary;
        case Pattern::checker:
            return ((r / 2 + c / 2) % 2 == 0) ? st.primary : st.secondary;
        case Pattern::hstripes:
            return (r / 2 % 2 == 0) ? st.primary : st.secondary;
        case Pattern::vstripes:
            return (c / 2 % 2 == 0) ? st.primary : st.secondary;
        case Pattern::dots:
            return (r % 3 == 1 && c % 3 == 1) ? st.primary : st.secondary;
    }
    return st.primary;
}

struct ClassTemplate {
    PartStyle part_a;
    PartStyle part_b;
};

inline const std::vector<ClassTemplate>& class_templates() {
    static const std::vector<ClassTemplate> t = {
        // 0: disk, solid red | yellow/black checker
        {{Pattern::solid, {0.85, 0.15, 0.15}, {}},
         {Pattern::checker, {0.90, 0.85, 0.10}, {0.15, 0.15, 0.10}}},
        // 1: square, solid blue | cyan stripes
        {{Pattern::solid, {0.15, 0.20, 0.85}, {}},
         {Pattern::hstripes, {0.10, 0.80, 0.85}, {0.05, 0.30, 0.40}}},
        // 2: triangle, solid green | magenta dots
        {{Pattern::solid, {0.10, 0.75, 0.20}, {}},
         {Pattern::dots, {0.85, 0.10, 0.85}, {0.30, 0.05, 0.30}}},
        // 3: cross, solid orange | purple stripes
        {{Pattern::solid, {0.95, 0.55, 0.10}, {}},
         {Pattern::vstripes, {0.55, 0.15, 0.75}, {0.25, 0.05, 0.35}}},
        // 4: ring, teal annulus | bright core
        {{Pattern::solid, {0.10, 0.60, 0.60}, {}}, {Pattern::solid, {0.95, 0.95, 0.90}, {}}},
        // 5: diamond, crimson rim | gold core
        {{Pattern::solid, {0.70, 0.10, 0.30}, {}},
         {Pattern::checker, {0.95, 0.80, 0.20}, {0.60, 0.45, 0.05}}},
        // 6: two bars, lime left | navy right
        {{Pattern::solid, {0.60, 0.90, 0.20}, {}}, {Pattern::solid, {0.10, 0.15, 0.60}, {}}},
        // 7: L-shape, pink vertical arm | brown horizontal arm
        {{Pattern::solid, {0.95, 0.50, 0.70}, {}},
         {Pattern::hstripes, {0.55, 0.35, 0.15}, {0.35, 0.20, 0.05}}},
    };
    return t;
}

// Membership test: 0 outside the shape, 1 in part A, 2 in part B. Coordinates
// are relative to the shape center, h is the half-extent.
inline int shape_part(std::size_t cls, double dr, double dc, double h) {
    switch (cls) {
        case 0: {  // disk split left/right
            const double rad = 0.95 * h;
            if (dr * dr + dc * dc > rad * rad) return 0;
            return dc < 0 ? 1 : 2;
        }
        case 1: {  // square split top/bottom
            if (std::abs(dr) > h || std::abs(dc) > h) return 0;
            return dr < 0 ? 1 : 2;
        }
        case 2: {  // upward triangle, apex part A, base part B
            if (dr < -h || dr > h) return 0;
            const double half_width = (dr + h) / 2.0;
            if (std::abs(dc) > half_width) return 0;
            return dr < h / 3.0 ? 1 : 2;
        }
        case 3: {  // cross: horizontal arm A, vertical arm B
            const double w = std::max(2.5, h * 0.36);
            const bool horiz = std::abs(dr) <= w && std::abs(dc) <= h;
            const bool vert = std::abs(dc) <= w && std::abs(dr) <= h;
            if (vert) return 2;
            if (horiz) return 1;
            return 0;
        }
        case 4: {  // ring A around core B
            const double d2 = dr * dr + dc * dc;
            const double outer = h, inner = 0.55 * h;
            if (d2 > outer * outer) return 0;
            return d2 > inner * inner ? 1 : 2;
        }
        case 5: {  // diamond: rim A, core B
            const double l1 = std::abs(dr) + std::abs(dc);
            if (l1 > h) return 0;
            return l1 > h / 2.0 ? 1 : 2;
        }
        case 6: {  // two vertical bars: left A, right B
            const double w = std::max(2.0, h * 0.30);
            if (std::abs(dr) > h) return 0;
            if (std::abs(dc + 0.6 * h) <= w) return 1;
            if (std::abs(dc - 0.6 * h) <= w) return 2;
            return 0;
        }
        case 7: {  // L: vertical arm A, horizontal foot B
            const double w = std::max(2.5, h * 0.36);
            const bool vert = std::abs(dc + (h - w)) <= w && dr >= -h && dr <= h;
            const bool foot = dr >= h - 2.0 * w && dr <= h && dc >= -h && dc <= h;
            if (vert) return 1;
            if (foot) return 2;
            return 0;
        }
        default:
            return 0;
    }
}

}  // namespace dataset_detail

// Deterministic synthetic dataset; labels cycle 0..C-1 so counts are exactly
// n/C when divisible.
inline std::vector<Sample> generate_dataset(std::uint64_t seed, std::size_t n_samples,
                                            std::size_t n_classes, std::size_t image_size) {
    using namespace dataset_detail;
    if (n_classes == 0 || n_classes > class_templates().size()) {
        throw param_error("generate_dataset: class count " + std::to_string(n_classes) +
                          " outside [1, " + std::to_string(class_templates().size()) + "]");
    }
    if (image_size < 16) throw param_error("generate_dataset: image_size must be >= 16");

    Rng rng(seed);
    const std::size_t s = image_size;
    std::vector<Sample> out;
    out.reserve(n_samples);

    for (std::size_t idx = 0; idx < n_samples; ++idx) {
        const std::size_t cls = idx % n_classes;
        const ClassTemplate& tpl = class_templates()[cls];

        Sample sample;
        sample.label = cls;
        sample.image = Tensor(Shape{s, s, 3});
        sample.fg_mask.assign(s * s, 0);
        Tensor& img = sample.image;

        // Structured noise background: gray base + linear gradient + 4x4
        // blocky offsets + fine per-pixel noise.
        const double base = rng.uniform(0.40, 0.58);
        const double gx = rng.uniform(-0.14, 0.14), gy = rng.uniform(-0.14, 0.14);
        const double tint_r = rng.uniform(-0.02, 0.02), tint_g = rng.uniform(-0.02, 0.02),
                     tint_b = rng.uniform(-0.02, 0.02);
        const std::size_t cells = (s + 3) / 4;
        std::vector<double> block(cells * cells);
        for (double& v : block) v = rng.uniform(-0.06, 0.06);
        for (std::size_t r = 0; r < s; ++r) {
            for (std::size_t c = 0; c < s; ++c) {
                const double fr = static_cast<double>(r) / s, fc = static_cast<double>(c) / s;
                const double v = base + gy * (fr - 0.5) + gx * (fc - 0.5) +
                                 block[(r / 4) * cells + (c / 4)] + rng.uniform(-0.03, 0.03);
                img[(r * s + c) * 3 + 0] = std::clamp(v + tint_r, 0.0, 1.0);
                img[(r * s + c) * 3 + 1] = std::clamp(v + tint_g, 0.0, 1.0);
                img[(r * s + c) * 3 + 2] = std::clamp(v + tint_b, 0.0, 1.0);
            }
        }

        // Shape placement: half-extent and center keep the footprint inside.
        const double h = s * rng.uniform(0.235, 0.305);
        const std::size_t margin = static_cast<std::size_t>(h) + 1;
        const double cy = margin + rng.index(s - 2 * margin);
        const double cx = margin + rng.index(s - 2 * margin);
        const double jit = rng.uniform(-0.03, 0.03);

        for (std::size_t r = 0; r < s; ++r) {
            for (std::size_t c = 0; c < s; ++c) {
                const int part = shape_part(cls, static_cast<double>(r) - cy,
                                            static_cast<double>(c) - cx, h);
                if (part == 0) continue;
                const PartStyle& st = part == 1 ? tpl.part_a : tpl.part_b;
                Rgb col = style_color(st, r, c);
                img[(r * s + c) * 3 + 0] = std::clamp(col.r + jit, 0.0, 1.0);
                img[(r * s + c) * 3 + 1] = std::clamp(col.g + jit, 0.0, 1.0);
                img[(r * s + c) * 3 + 2] = std::clamp(col.b + jit, 0.0, 1.0);
                sample.fg_mask[r * s + c] = 1;
            }
        }
        out.push_back(std::move(sample));
    }
    return out;
}

// Loads a binary P5/P6 image as a 3-channel sample (grayscale replicated);
// no foreground mask, label 0.
inline Sample load_pgm_ppm(const std::string& path) {
    Tensor raw = read_pnm(path);
    Sample s;
    if (raw.dim(2) == 3) {
        s.image = raw;
    } else {
        const std::size_t h = raw.dim(0), w = raw.dim(1);
        s.image = Tensor(Shape{h, w, 3});
        for (std::size_t i = 0; i < h * w; ++i)
            for (std::size_t k = 0; k < 3; ++k) s.image[i * 3 + k] = raw[i];
    }
    return s;
}

// Directory layout: images/NNNNN.ppm, masks/NNNNN.pgm, labels.txt with one
// "index class" pair per line.
inline void save_dataset(const std::string& dir, const std::vector<Sample>& samples) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "images");
    fs::create_directories(fs::path(dir) / "masks");
    std::ofstream labels(fs::path(dir) / "labels.txt");
    if (!labels) throw io_error("cannot write labels.txt under " + dir);
    char name[16];
    for (std::size_t i = 0; i < samples.size(); ++i) {
        std::snprintf(name, sizeof(name), "%05zu", i);
        write_ppm((fs::path(dir) / "images" / (std::string(name) + ".ppm")).string(),
                  samples[i].image);
        if (samples[i].has_fg_mask()) {
            const std::size_t h = samples[i].image.dim(0), w = samples[i].image.dim(1);
            Tensor m(Shape{h, w});
            for (std::size_t p = 0; p < h * w; ++p) m[p] = samples[i].fg_mask[p] ? 1.0 : 0.0;
            write_pgm((fs::path(dir) / "masks" / (std::string(name) + ".pgm")).string(), m);
        }
        labels << i << " " << samples[i].label << "\n";
    }
}

inline std::vector<Sample> load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream labels(fs::path(dir) / "labels.txt");
    if (!labels) throw io_error("cannot open labels.txt under " + dir);
    std::vector<Sample> out;
    std::size_t idx, cls;
    char name[16];
    while (labels >> idx >> cls) {
        std::snprintf(name, sizeof(name), "%05zu", idx);
        Sample s = load_pgm_ppm((fs::path(dir) / "images" / (std::string(name) + ".ppm")).string());
        s.label = cls;
        const fs::path mask_path = fs::path(dir) / "masks" / (std::string(name) + ".pgm");
        if (fs::exists(mask_path)) {
            Tensor m = read_pnm(mask_path.string());
            s.fg_mask.resize(m.dim(0) * m.dim(1));
            for (std::size_t p = 0; p < s.fg_mask.size(); ++p) s.fg_mask[p] = m[p] > 0.5 ? 1 : 0;
        }
        out.push_back(std::move(s));
    }
    if (out.empty()) throw format_error("labels.txt holds no entries", 0);
    return out;
}

}  // namespace ppf

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <png.h>

#include "pqr/tensor.hpp"

namespace pqr {

/// 8-bit RGB raster used for PNG output and debug drawings.
struct Rgb8 {
    int h = 0;
    int w = 0;
    std::vector<uint8_t> px; // h * w * 3

    Rgb8() = default;
    Rgb8(int h_, int w_, uint8_t fill = 0) : h(h_), w(w_), px(static_cast<size_t>(h_) * w_ * 3, fill) {}

    uint8_t* at(int r, int c) { return &px[(static_cast<size_t>(r) * w + c) * 3]; }
    const uint8_t* at(int r, int c) const { return &px[(static_cast<size_t>(r) * w + c) * 3]; }

    void set(int r, int c, uint8_t R, uint8_t G, uint8_t B) {
        if (r < 0 || c < 0 || r >= h || c >= w) return;
        uint8_t* p = at(r, c);
        p[0] = R;
        p[1] = G;
        p[2] = B;
    }
};

inline uint8_t to_u8(double v) {
    return static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// Image grid (values in [0,1], clamped) to 8-bit RGB. Single-channel grids
/// are replicated to gray.
inline Rgb8 to_rgb8(const Image& img) {
    require(img.c == 1 || img.c == 3, "to_rgb8: expected 1 or 3 channels");
    Rgb8 out(img.h, img.w);
    for (int r = 0; r < img.h; ++r)
        for (int c = 0; c < img.w; ++c)
            for (int ch = 0; ch < 3; ++ch) out.at(r, c)[ch] = to_u8(img.at(r, c, img.c == 1 ? 0 : ch));
    return out;
}

inline Image from_rgb8(const Rgb8& raster) {
    Image img(raster.h, raster.w, 3, Space::pixel);
    for (int r = 0; r < raster.h; ++r)
        for (int c = 0; c < raster.w; ++c)
            for (int ch = 0; ch < 3; ++ch) img.at(r, c, ch) = raster.at(r, c)[ch] / 255.0;
    return img;
}

inline void write_png(const std::filesystem::path& path, const Rgb8& img) {
    FILE* fp = std::fopen(path.string().c_str(), "wb");
    if (!fp) throw IoError("cannot open " + path.string() + " for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        std::fclose(fp);
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng initialization failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw IoError("libpng failed while writing " + path.string());
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.w), static_cast<png_uint_32>(img.h), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int r = 0; r < img.h; ++r) png_write_row(png, const_cast<png_bytep>(img.at(r, 0)));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

inline void write_png(const std::filesystem::path& path, const Image& img) { write_png(path, to_rgb8(img)); }

inline Rgb8 read_png_rgb8(const std::filesystem::path& path) {
    FILE* fp = std::fopen(path.string().c_str(), "rb");
    if (!fp) throw IoError("cannot open " + path.string());
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        std::fclose(fp);
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("libpng initialization failed");
    }
    Rgb8 out;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw IoError("libpng failed while reading " + path.string());
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    png_set_strip_16(png);
    png_set_palette_to_rgb(png);
    png_set_expand_gray_1_2_4_to_8(png);
    png_set_gray_to_rgb(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);
    out = Rgb8(static_cast<int>(png_get_image_height(png, info)), static_cast<int>(png_get_image_width(png, info)));
    for (int r = 0; r < out.h; ++r) png_read_row(png, out.at(r, 0), nullptr);
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return out;
}

inline Image read_png(const std::filesystem::path& path) { return from_rgb8(read_png_rgb8(path)); }

/// Heatmap of an h x w scalar field normalized to its own [min, max], upscaled
/// by `scale` with nearest sampling. Blue (low) to yellow (high).
inline Rgb8 heatmap(const Mat& field, int h, int w, int scale = 8) {
    require(field.size() == static_cast<Eigen::Index>(h) * w, "heatmap: field size mismatch");
    const double lo = field.minCoeff(), hi = field.maxCoeff();
    const double span = hi > lo ? hi - lo : 1.0;
    Rgb8 out(h * scale, w * scale);
    for (int r = 0; r < out.h; ++r)
        for (int c = 0; c < out.w; ++c) {
            const double v = (field.data()[(r / scale) * w + c / scale] - lo) / span;
            out.set(r, c, to_u8(v), to_u8(0.2 + 0.6 * v), to_u8(1.0 - v));
        }
    return out;
}

inline void draw_line(Rgb8& img, int r0, int c0, int r1, int c1, uint8_t R, uint8_t G, uint8_t B) {
    int dr = std::abs(r1 - r0), dc = std::abs(c1 - c0);
    int sr = r0 < r1 ? 1 : -1, sc = c0 < c1 ? 1 : -1;
    int err = dc - dr;
    while (true) {
        img.set(r0, c0, R, G, B);
        if (r0 == r1 && c0 == c1) break;
        const int e2 = 2 * err;
        if (e2 > -dr) {
            err -= dr;
            c0 += sc;
        }
        if (e2 < dc) {
            err += dc;
            r0 += sr;
        }
    }
}

inline Rgb8 side_by_side(const Rgb8& a, const Rgb8& b) {
    Rgb8 out(std::max(a.h, b.h), a.w + b.w, 255);
    for (int r = 0; r < a.h; ++r)
        for (int c = 0; c < a.w; ++c) std::copy_n(a.at(r, c), 3, out.at(r, c));
    for (int r = 0; r < b.h; ++r)
        for (int c = 0; c < b.w; ++c) std::copy_n(b.at(r, c), 3, out.at(r, a.w + c));
    return out;
}

inline Rgb8 upscale(const Rgb8& img, int s) {
    Rgb8 out(img.h * s, img.w * s);
    for (int r = 0; r < out.h; ++r)
        for (int c = 0; c < out.w; ++c) std::copy_n(img.at(r / s, c / s), 3, out.at(r, c));
    return out;
}

} // namespace pqr

#pragma once

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include <png.h>

#include "stereoworld/tensor.hpp"

namespace stw::imgio {

// 8-bit image <-> (3, h, w) tensor in [0,1]. PPM (P6) and PNG are the two
// accepted source formats for ingestion.

inline Tensor from_rgb8(const std::vector<unsigned char>& rgb, int64_t h, int64_t w) {
    Tensor t({3, h, w});
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
            for (int64_t c = 0; c < 3; ++c)
                t.at(c, y, x) = rgb[static_cast<size_t>((y * w + x) * 3 + c)] / 255.0;
    return t;
}

inline std::vector<unsigned char> to_rgb8(const Tensor& img) {
    require(img.rank() == 3 && img.dim(0) == 3, "imgio: expected (3,h,w) tensor");
    const int64_t h = img.dim(1), w = img.dim(2);
    std::vector<unsigned char> rgb(static_cast<size_t>(3 * h * w));
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
            for (int64_t c = 0; c < 3; ++c) {
                double v = img.at(c, y, x);
                v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
                rgb[static_cast<size_t>((y * w + x) * 3 + c)] =
                    static_cast<unsigned char>(v * 255.0 + 0.5);
            }
    return rgb;
}

inline Tensor read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("imgio: cannot open " + path);
    std::string magic;
    f >> magic;
    if (magic != "P6") throw std::runtime_error("imgio: not a P6 ppm: " + path);
    auto next_int = [&]() {
        int v;
        f >> std::ws;
        while (f.peek() == '#') f.ignore(1 << 16, '\n'), f >> std::ws;
        if (!(f >> v)) throw std::runtime_error("imgio: bad ppm header: " + path);
        return v;
    };
    const int w = next_int(), h = next_int(), maxv = next_int();
    if (maxv != 255) throw std::runtime_error("imgio: only maxval 255 ppm supported: " + path);
    f.ignore(1);  // single whitespace after header
    std::vector<unsigned char> rgb(static_cast<size_t>(3 * w * h));
    f.read(reinterpret_cast<char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
    if (!f) throw std::runtime_error("imgio: truncated ppm payload: " + path);
    return from_rgb8(rgb, h, w);
}

inline void write_ppm(const std::string& path, const Tensor& img) {
    const auto rgb = to_rgb8(img);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("imgio: cannot open for write " + path);
    f << "P6\n" << img.dim(2) << " " << img.dim(1) << "\n255\n";
    f.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
    if (!f) throw std::runtime_error("imgio: ppm write failed: " + path);
}

inline Tensor read_png(const std::string& path) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw std::runtime_error("imgio: cannot open " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw std::runtime_error("imgio: libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw std::runtime_error("imgio: png decode failed: " + path);
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    // Normalize everything to 8-bit RGB.
    png_set_expand(png);
    if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
    png_set_strip_alpha(png);
    if (png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY ||
        png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY_ALPHA)
        png_set_gray_to_rgb(png);
    png_read_update_info(png, info);
    const int64_t w = png_get_image_width(png, info);
    const int64_t h = png_get_image_height(png, info);
    std::vector<unsigned char> rgb(static_cast<size_t>(3 * w * h));
    std::vector<png_bytep> rows(static_cast<size_t>(h));
    for (int64_t y = 0; y < h; ++y) rows[static_cast<size_t>(y)] = rgb.data() + 3 * w * y;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return from_rgb8(rgb, h, w);
}

inline void write_png(const std::string& path, const Tensor& img) {
    const auto rgb = to_rgb8(img);
    const int64_t h = img.dim(1), w = img.dim(2);
    FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw std::runtime_error("imgio: cannot open for write " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw std::runtime_error("imgio: libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw std::runtime_error("imgio: png encode failed: " + path);
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(static_cast<size_t>(h));
    std::vector<unsigned char> mut(rgb);
    for (int64_t y = 0; y < h; ++y) rows[static_cast<size_t>(y)] = mut.data() + 3 * w * y;
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

inline bool has_suffix(const std::string& s, const std::string& suf) {
    return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
}

inline Tensor read_image(const std::string& path) {
    if (has_suffix(path, ".ppm")) return read_ppm(path);
    if (has_suffix(path, ".png")) return read_png(path);
    throw std::runtime_error("imgio: unsupported image format: " + path);
}

}  // namespace stw::imgio

#pragma once

// PNG ingestion and output through libpng. Frames are [3,H,W] tensors with
// intensities in [0,1]; masks are [H,W] in [0,1]; disparity follows the KITTI
// 16-bit convention (value / 256, 0 = invalid).

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "svr/errors.hpp"
#include "svr/tensor.hpp"

namespace svr {

struct RawImage {
    std::size_t width = 0, height = 0, channels = 0;
    int bit_depth = 8;
    std::vector<std::uint16_t> samples;  // row-major, interleaved channels
};

namespace detail {

struct FileCloser {
    void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] inline void png_error_fn(png_structp png, png_const_charp msg) {
    auto* what = static_cast<std::string*>(png_get_error_ptr(png));
    if (what) *what = msg;
    png_longjmp(png, 1);
}
inline void png_warning_fn(png_structp, png_const_charp) {}

}  // namespace detail

/// Decode a PNG. 8-bit images keep 8-bit samples; 16-bit stay 16-bit.
/// Palette and low-bit-depth grayscale are expanded; alpha is dropped.
inline RawImage read_png(const std::string& path) {
    detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw IngestionError("cannot open image: " + path);
    unsigned char sig[8];
    if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8))
        throw IngestionError("not a PNG file: " + path);

    std::string err;
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_error_fn,
                                             detail::png_warning_fn);
    if (!png) throw IngestionError("libpng init failed");
    png_infop info = png_create_info_struct(png);
    RawImage img;
    std::vector<png_bytep> rows;
    std::vector<png_byte> buffer;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IngestionError("corrupt PNG " + path + ": " + err);
    }
    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    const auto color = png_get_color_type(png, info);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8)
        png_set_expand_gray_1_2_4_to_8(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (png_get_bit_depth(png, info) == 16) png_set_swap(png);  // host little-endian
    png_read_update_info(png, info);

    img.width = png_get_image_width(png, info);
    img.height = png_get_image_height(png, info);
    img.channels = png_get_channels(png, info);
    img.bit_depth = png_get_bit_depth(png, info);
    const std::size_t rowbytes = png_get_rowbytes(png, info);
    buffer.resize(rowbytes * img.height);
    rows.resize(img.height);
    for (std::size_t y = 0; y < img.height; ++y) rows[y] = buffer.data() + y * rowbytes;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    const std::size_t n = img.width * img.height * img.channels;
    img.samples.resize(n);
    if (img.bit_depth == 16) {
        for (std::size_t i = 0; i < n; ++i)
            img.samples[i] = static_cast<std::uint16_t>(buffer[2 * i] | (buffer[2 * i + 1] << 8));
    } else {
        for (std::size_t i = 0; i < n; ++i) img.samples[i] = buffer[i];
    }
    return img;
}

inline void write_png(const std::string& path, const RawImage& img) {
    detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IngestionError("cannot open image for writing: " + path);
    std::string err;
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_error_fn,
                                              detail::png_warning_fn);
    if (!png) throw IngestionError("libpng init failed");
    png_infop info = png_create_info_struct(png);
    const std::size_t bps = img.bit_depth == 16 ? 2 : 1;
    const std::size_t rowbytes = img.width * img.channels * bps;
    std::vector<png_byte> buffer(rowbytes * img.height);
    for (std::size_t i = 0; i < img.samples.size(); ++i) {
        if (bps == 2) {
            buffer[2 * i] = static_cast<png_byte>(img.samples[i] >> 8);  // big-endian on disk
            buffer[2 * i + 1] = static_cast<png_byte>(img.samples[i] & 0xff);
        } else {
            buffer[i] = static_cast<png_byte>(img.samples[i]);
        }
    }
    std::vector<png_bytep> rows(img.height);
    for (std::size_t y = 0; y < img.height; ++y) rows[y] = buffer.data() + y * rowbytes;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IngestionError("failed writing PNG " + path + ": " + err);
    }
    png_init_io(png, fp.get());
    const int color = img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY;
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width),
                 static_cast<png_uint_32>(img.height), img.bit_depth, color, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

inline std::uint16_t quantize(double v, double scale) {
    const double q = std::round(std::clamp(v, 0.0, 1.0) * scale);
    return static_cast<std::uint16_t>(q);
}

/// 8-bit RGB (or grayscale, replicated) PNG -> [3,H,W] in [0,1].
inline Tensor load_rgb(const std::string& path) {
    const auto img = read_png(path);
    if (img.bit_depth != 8) throw IngestionError("expected 8-bit RGB frame: " + path);
    Tensor t({3, img.height, img.width});
    const std::size_t plane = img.height * img.width;
    for (std::size_t p = 0; p < plane; ++p)
        for (std::size_t c = 0; c < 3; ++c) {
            const std::size_t src = img.channels >= 3 ? p * img.channels + c : p * img.channels;
            t[c * plane + p] = static_cast<float>(img.samples[src]) / 255.0f;
        }
    return t;
}

inline void save_rgb(const std::string& path, const Tensor& frame) {
    if (frame.rank() != 3 || frame.dim(0) != 3) throw DimensionError("save_rgb expects [3,H,W]");
    RawImage img{frame.dim(2), frame.dim(1), 3, 8, {}};
    const std::size_t plane = img.height * img.width;
    img.samples.resize(plane * 3);
    for (std::size_t p = 0; p < plane; ++p)
        for (std::size_t c = 0; c < 3; ++c) img.samples[p * 3 + c] = quantize(frame[c * plane + p], 255);
    write_png(path, img);
}

/// 8-bit grayscale PNG -> [H,W] in [0,1]. RGB input is averaged.
inline Tensor load_gray(const std::string& path) {
    const auto img = read_png(path);
    if (img.bit_depth != 8) throw IngestionError("expected 8-bit grayscale map: " + path);
    Tensor t({img.height, img.width});
    const std::size_t plane = img.height * img.width;
    for (std::size_t p = 0; p < plane; ++p) {
        double s = 0;
        const std::size_t c = std::min<std::size_t>(img.channels, 3);
        for (std::size_t k = 0; k < c; ++k) s += img.samples[p * img.channels + k];
        t[p] = static_cast<float>(s / (255.0 * static_cast<double>(c)));
    }
    return t;
}

inline void save_gray(const std::string& path, const Tensor& map) {
    if (map.rank() != 2) throw DimensionError("save_gray expects [H,W]");
    RawImage img{map.dim(1), map.dim(0), 1, 8, {}};
    img.samples.resize(map.size());
    for (std::size_t p = 0; p < map.size(); ++p) img.samples[p] = quantize(map[p], 255);
    write_png(path, img);
}

}  // namespace svr

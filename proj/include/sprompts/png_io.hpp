#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

#include <png.h>

namespace sprompts::data {

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Row-major H x W x C float image, values in [0,1], C == 3.
struct Image {
    int height = 0;
    int width = 0;
    int channels = 3;
    std::vector<float> pixels;

    float& at(int y, int x, int c) { return pixels[(y * width + x) * channels + c]; }
    float at(int y, int x, int c) const { return pixels[(y * width + x) * channels + c]; }

    static Image blank(int h, int w, float value = 0.0f) {
        Image img;
        img.height = h;
        img.width = w;
        img.pixels.assign(static_cast<std::size_t>(h) * w * 3, value);
        return img;
    }
};

inline void write_png(const std::string& path, const Image& img) {
    FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw IoError("write_png: cannot open " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw IoError("write_png: libpng init failed");
    }
    std::vector<unsigned char> bytes(static_cast<std::size_t>(img.height) * img.width * 3);
    for (std::size_t i = 0; i < bytes.size(); ++i) {
        const float v = std::clamp(img.pixels[i], 0.0f, 1.0f);
        bytes[i] = static_cast<unsigned char>(v * 255.0f + 0.5f);
    }
    std::vector<png_bytep> rows(img.height);
    for (int y = 0; y < img.height; ++y) rows[y] = bytes.data() + static_cast<std::size_t>(y) * img.width * 3;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw IoError("write_png: encode failed for " + path);
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

inline Image read_png(const std::string& path) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw IoError("read_png: cannot open " + path);
    unsigned char header[8];
    if (std::fread(header, 1, 8, fp) != 8 || png_sig_cmp(header, 0, 8)) {
        std::fclose(fp);
        throw IoError("read_png: not a PNG file: " + path);
    }
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw IoError("read_png: libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw IoError("read_png: decode failed for " + path);
    }
    png_init_io(png, fp);
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    // Normalize every color type to 8-bit RGB.
    png_set_expand(png);
    if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
    if (png_get_color_type(png, info) & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY ||
        png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY_ALPHA)
        png_set_gray_to_rgb(png);
    png_read_update_info(png, info);
    const int w = static_cast<int>(png_get_image_width(png, info));
    const int h = static_cast<int>(png_get_image_height(png, info));
    std::vector<unsigned char> bytes(static_cast<std::size_t>(h) * w * 3);
    std::vector<png_bytep> rows(h);
    for (int y = 0; y < h; ++y) rows[y] = bytes.data() + static_cast<std::size_t>(y) * w * 3;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    Image img = Image::blank(h, w);
    for (std::size_t i = 0; i < bytes.size(); ++i)
        img.pixels[i] = static_cast<float>(bytes[i]) / 255.0f;
    return img;
}

inline Image resize_bilinear(const Image& src, int h, int w) {
    if (src.height == h && src.width == w) return src;
    Image dst = Image::blank(h, w);
    const float sy = static_cast<float>(src.height) / h;
    const float sx = static_cast<float>(src.width) / w;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const float fy = std::min((y + 0.5f) * sy - 0.5f, src.height - 1.0f);
            const float fx = std::min((x + 0.5f) * sx - 0.5f, src.width - 1.0f);
            const int y0 = std::max(0, static_cast<int>(std::floor(fy)));
            const int x0 = std::max(0, static_cast<int>(std::floor(fx)));
            const int y1 = std::min(y0 + 1, src.height - 1);
            const int x1 = std::min(x0 + 1, src.width - 1);
            const float wy = std::clamp(fy - y0, 0.0f, 1.0f);
            const float wx = std::clamp(fx - x0, 0.0f, 1.0f);
            for (int c = 0; c < 3; ++c) {
                const float top = src.at(y0, x0, c) * (1 - wx) + src.at(y0, x1, c) * wx;
                const float bot = src.at(y1, x0, c) * (1 - wx) + src.at(y1, x1, c) * wx;
                dst.at(y, x, c) = top * (1 - wy) + bot * wy;
            }
        }
    return dst;
}

} // namespace sprompts::data

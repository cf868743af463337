#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include "refsr/error.hpp"

namespace refsr {

struct CorrespondenceField;

// Row-major H x W x C raster. Values live in [0,1]; arithmetic may leave the
// range transiently, encoders clamp.
struct Image {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<float> data;

    Image() = default;
    Image(int w, int h, int c, float fill = 0.0f);

    bool empty() const noexcept { return data.empty(); }
    std::size_t pixel_count() const noexcept { return std::size_t(width) * std::size_t(height); }
    std::size_t index(int x, int y, int c = 0) const noexcept {
        return (std::size_t(y) * std::size_t(width) + std::size_t(x)) * std::size_t(channels) + std::size_t(c);
    }
    float& at(int x, int y, int c = 0) noexcept { return data[index(x, y, c)]; }
    float at(int x, int y, int c = 0) const noexcept { return data[index(x, y, c)]; }

    // Edge-clamped read.
    float clamped(int x, int y, int c = 0) const noexcept;

    bool same_shape(const Image& o) const noexcept {
        return width == o.width && height == o.height && channels == o.channels;
    }
};

struct Rect {
    int x0 = 0;
    int y0 = 0;
    int w = 0;
    int h = 0;

    bool operator==(const Rect&) const = default;
    bool inside(int width, int height) const noexcept {
        return x0 >= 0 && y0 >= 0 && w > 0 && h > 0 && x0 + w <= width && y0 + h <= height;
    }
};

Image load_image(const std::filesystem::path& path);
// Format chosen from the extension: .png, .ppm, .pgm.
void save_image(const Image& img, const std::filesystem::path& path);

// [0,1] float -> 8-bit code: clamp, scale by 255, round half away from zero.
unsigned char encode_level(float v) noexcept;

// Catmull-Rom (a = -0.5), edge clamp, pixel centres at (i + 0.5).
Image resize_bicubic(const Image& img, int out_w, int out_h);

// Bilinear sample at fractional (x, y), coordinates clamped to the border.
float sample_bilinear(const Image& img, float x, float y, int c) noexcept;
Image warp_bilinear(const Image& img, const CorrespondenceField& field);

Image crop(const Image& img, const Rect& r);
void paste(Image& dst, const Image& src, int x0, int y0);
// Mirror padding (without edge repeat) out to at least min_w x min_h.
Image reflect_pad(const Image& img, int min_w, int min_h);
Image flip_horizontal(const Image& img);
// ITU-R 601 luma; grayscale inputs are returned unchanged.
Image to_luma(const Image& img);
Image clamp01(Image img);

}  // namespace refsr

#pragma once

#include <filesystem>
#include <vector>

#include "refsr/image.hpp"

namespace refsr {

// Dense mapping from an LR-aligned plane into a reference image plus a
// per-pixel certainty in [0,1].
//
// `ref_width`/`ref_height` describe the raster the mapping coordinates
// currently address; `orig_ref_width`/`orig_ref_height` the full-resolution
// reference that upscale_field rescales into.
struct CorrespondenceField {
    int width = 0;
    int height = 0;
    int ref_width = 0;
    int ref_height = 0;
    int orig_ref_width = 0;
    int orig_ref_height = 0;
    std::vector<float> mapping;    // (x, y) interleaved, width * height pairs
    std::vector<float> certainty;  // width * height

    CorrespondenceField() = default;
    CorrespondenceField(int w, int h, int ref_w, int ref_h);

    std::size_t index(int u, int v) const noexcept { return std::size_t(v) * std::size_t(width) + std::size_t(u); }
    float map_x(int u, int v) const noexcept { return mapping[2 * index(u, v)]; }
    float map_y(int u, int v) const noexcept { return mapping[2 * index(u, v) + 1]; }
    void set_map(int u, int v, float x, float y) noexcept {
        mapping[2 * index(u, v)] = x;
        mapping[2 * index(u, v) + 1] = y;
    }
    float cert(int u, int v) const noexcept { return certainty[index(u, v)]; }

    // Identity mapping over a w x h grid, certainty 1.
    static CorrespondenceField identity(int w, int h);
    // Uniform translation: mapping(u, v) = (u + dx, v + dy).
    static CorrespondenceField translation(int w, int h, float dx, float dy);

    double mean_certainty() const noexcept;
    bool valid() const noexcept;
};

// Binary sidecar: "RSRFIELD" magic, u32 version, six i32 dims, mapping
// floats then certainty floats, all little-endian.
void save_field(const CorrespondenceField& field, const std::filesystem::path& path);
CorrespondenceField load_field(const std::filesystem::path& path);

// Grayscale heat map of the certainty channel.
Image certainty_image(const CorrespondenceField& field);

}  // namespace refsr

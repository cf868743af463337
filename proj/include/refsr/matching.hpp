#pragma once

#include <utility>

#include "refsr/field.hpp"
#include "refsr/image.hpp"
#include "refsr/kvconfig.hpp"

namespace refsr {

struct MatchConfig {
    int working_size = 560;
    int patch = 15;          // odd correlation window
    int search_radius = 0;   // 0 -> working_size / 4
    double certainty_floor = 0.3;
    int stride = 2;          // match grid spacing before densification
    bool consistency_check = true;

    int resolved_radius() const noexcept { return search_radius > 0 ? search_radius : working_size / 4; }
    void validate() const;
    KeyValueConfig to_kv() const;
    static MatchConfig from_kv(const KeyValueConfig& kv);
};

// Caps working_size at half the larger image side. The query is an
// upscaled LR image, so matching above that resolution only compares
// reference detail the query does not have. An unset search radius follows
// the new working size.
MatchConfig fit_to_image(const MatchConfig& cfg, int width, int height);

// Dense correspondence at working resolution. Both inputs are resampled to
// working_size x working_size (aspect ratio is not preserved); a brute-force
// ZNCC search runs on a stride grid and the result is densified bilinearly.
// Mapping coordinates address the working-resolution reference; the
// original reference size is kept in the field metadata.
CorrespondenceField coarse_match(const Image& lr_up, const Image& ref, const MatchConfig& cfg);

// Resamples the field to out_w x out_h and rescales mapping coordinates from
// the working grid to the original reference raster.
CorrespondenceField upscale_field(const CorrespondenceField& field, int out_w, int out_h);

// C * warp(ref) + (1 - C) * mask.
Image compose_reference(const Image& ref, const CorrespondenceField& field, const Image& mask);

struct AlignedReference {
    Image image;
    CorrespondenceField field;
};

// coarse_match -> upscale_field -> compose_reference. `lr_up` is the LR
// image already bicubic-upscaled to the target resolution.
AlignedReference align_reference(const Image& lr_up, const Image& ref, const Image& mask, const MatchConfig& cfg);

// ZNCC between two equally sized windows centred at (ax, ay) and (bx, by),
// edge-clamped reads. Returns 0 when either window is flat.
double zncc(const Image& a, int ax, int ay, const Image& b, int bx, int by, int half) noexcept;

}  // namespace refsr

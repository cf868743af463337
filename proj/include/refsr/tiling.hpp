#pragma once

#include <vector>

#include "refsr/field.hpp"
#include "refsr/image.hpp"

namespace refsr {

struct TilePlan {
    int image_w = 0;
    int image_h = 0;
    int tile = 1024;
    int step = 256;
    std::vector<Rect> rects;  // row-major
};

// Starts per axis are {0, step, 2 step, ...} with the last clamped to
// dim - tile and duplicates dropped. The image must be at least tile x tile.
TilePlan plan_tiles(int w, int h, int tile, int step);

// Separable raised-cosine profile: ramps over min(tile - step, tile / 2)
// pixels at each end, 1 in between. Strictly positive everywhere.
std::vector<float> blend_profile(int tile, int step);

// Weighted average of the tiles with per-pixel renormalisation. Tiles are
// accumulated in plan order, so the result does not depend on how the tiles
// were produced.
Image blend_stitch(const TilePlan& plan, const std::vector<Image>& tiles);

enum class RefTileMode { aligned, region_resize, relative };

struct RefTile {
    Image image;
    bool fell_back = false;  // region_resize degenerated to relative
};

// Reference content for one tile of the LR-aligned plane.
//   aligned       crop of the aligned reference
//   region_resize bounding box of field.mapping over the rect, cropped from
//                 the raw reference and resized to the tile size
//   relative      rect scaled by the raw-reference / plane size ratio
// `plane_w`/`plane_h` give the LR-aligned plane size (needed for relative
// mode when no aligned reference exists).
RefTile tile_reference(const Rect& rect, RefTileMode mode, const Image& aligned_ref, const Image& raw_ref,
                       const CorrespondenceField& field, int plane_w, int plane_h);

}  // namespace refsr

#pragma once

// Whole-image inference: bicubic upscale, reference alignment, tiling,
// per-tile flow sampling and seam blending.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>

#include "refsr/flow.hpp"
#include "refsr/matching.hpp"
#include "refsr/tiling.hpp"

namespace refsr {

// How the reference reaches each tile. `none` is the SISR path.
enum class RefMode { none, relative, region_resize, aligned };
enum class MaskMode { white, sisr };

std::string_view to_string(RefMode m);
std::string_view to_string(MaskMode m);

struct SrOptions {
    RefMode mode = RefMode::aligned;
    std::optional<double> kscale;   // overrides the model config
    std::optional<int> ref_layers;  // overrides the model config
    int scale = 4;                  // LR -> output magnification
    int tile = 0;                   // 0 -> model image_size
    int step = 0;                   // 0 -> 3/4 of the tile
    std::uint64_t seed = 0;
    MaskMode mask = MaskMode::sisr;
    int threads = 1;
    MatchConfig match{};
};

struct SrResult {
    Image image;
    TilePlan plan;
    std::optional<CorrespondenceField> field;  // set when matching ran
    int fallback_tiles = 0;                    // region_resize tiles that fell back
};

// Seed of tile `index` derived from the run seed.
std::uint64_t tile_seed(std::uint64_t seed, std::size_t index);

// Super-resolves `lr` by options.scale. `ref` may be null only in RefMode
// none. Tiles are sampled independently (in parallel when threads > 1) and
// stitched in plan order. Tiles whose size differs from the model window are
// resampled to it and back.
SrResult super_resolve_image(const Image& lr, const Image* ref, const flow::ModelWeights& model,
                             const SrOptions& opts);

}  // namespace refsr

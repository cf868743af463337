#include "refsr/tiling.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace refsr {

namespace {

std::vector<int> axis_starts(int dim, int tile, int step) {
    std::vector<int> starts;
    for (int s = 0;; s += step) {
        const int clamped = std::min(s, dim - tile);
        if (starts.empty() || starts.back() != clamped) starts.push_back(clamped);
        if (clamped == dim - tile) break;
    }
    return starts;
}

}  // namespace

TilePlan plan_tiles(int w, int h, int tile, int step) {
    require(tile >= 1, ErrorCode::InvalidArgument, "tile must be >= 1");
    require(step >= 1 && step <= tile, ErrorCode::InvalidArgument, "step must be in [1, tile]");
    require(w >= tile && h >= tile, ErrorCode::DimensionMismatch,
            "image smaller than tile; pad before planning");
    TilePlan plan{w, h, tile, step, {}};
    const auto xs = axis_starts(w, tile, step);
    const auto ys = axis_starts(h, tile, step);
    for (int y : ys)
        for (int x : xs) plan.rects.push_back({x, y, tile, tile});
    return plan;
}

std::vector<float> blend_profile(int tile, int step) {
    const int ramp = std::max(1, std::min(tile - step, tile / 2));
    std::vector<float> p(std::size_t(tile), 1.0f);
    if (tile - step <= 0) return p;
    for (int i = 0; i < ramp; ++i) {
        const float w = float(0.5 - 0.5 * std::cos(std::numbers::pi * (i + 0.5) / ramp));
        p[std::size_t(i)] = std::min(p[std::size_t(i)], w);
        p[std::size_t(tile - 1 - i)] = std::min(p[std::size_t(tile - 1 - i)], w);
    }
    return p;
}

Image blend_stitch(const TilePlan& plan, const std::vector<Image>& tiles) {
    require(tiles.size() == plan.rects.size(), ErrorCode::DimensionMismatch, "tile count does not match plan");
    require(!tiles.empty(), ErrorCode::InvalidArgument, "no tiles");
    const int c = tiles.front().channels;
    for (const Image& t : tiles)
        require(t.width == plan.tile && t.height == plan.tile && t.channels == c, ErrorCode::DimensionMismatch,
                "tile size does not match plan");
    const auto prof = blend_profile(plan.tile, plan.step);

    std::vector<double> num(std::size_t(plan.image_w) * std::size_t(plan.image_h) * std::size_t(c), 0.0);
    std::vector<double> den(std::size_t(plan.image_w) * std::size_t(plan.image_h), 0.0);
    for (std::size_t k = 0; k < tiles.size(); ++k) {
        const Rect& r = plan.rects[k];
        const Image& t = tiles[k];
        for (int y = 0; y < r.h; ++y)
            for (int x = 0; x < r.w; ++x) {
                const double w = double(prof[std::size_t(x)]) * double(prof[std::size_t(y)]);
                const std::size_t p = std::size_t(r.y0 + y) * std::size_t(plan.image_w) + std::size_t(r.x0 + x);
                den[p] += w;
                for (int ch = 0; ch < c; ++ch) num[p * std::size_t(c) + std::size_t(ch)] += w * t.at(x, y, ch);
            }
    }
    Image out(plan.image_w, plan.image_h, c);
    for (std::size_t p = 0; p < den.size(); ++p)
        for (int ch = 0; ch < c; ++ch)
            out.data[p * std::size_t(c) + std::size_t(ch)] = float(num[p * std::size_t(c) + std::size_t(ch)] / den[p]);
    return out;
}

namespace {

Rect clamp_rect(int x0, int y0, int x1, int y1, int w, int h) {
    x0 = std::clamp(x0, 0, w);
    y0 = std::clamp(y0, 0, h);
    x1 = std::clamp(x1, 0, w);
    y1 = std::clamp(y1, 0, h);
    return {x0, y0, x1 - x0, y1 - y0};
}

Image relative_tile(const Rect& rect, const Image& raw_ref, int plane_w, int plane_h) {
    const double sx = double(raw_ref.width) / plane_w;
    const double sy = double(raw_ref.height) / plane_h;
    Rect r = clamp_rect(int(std::lround(rect.x0 * sx)), int(std::lround(rect.y0 * sy)),
                        int(std::lround((rect.x0 + rect.w) * sx)), int(std::lround((rect.y0 + rect.h) * sy)),
                        raw_ref.width, raw_ref.height);
    if (r.w < 1 || r.h < 1) r = {0, 0, raw_ref.width, raw_ref.height};
    return resize_bicubic(crop(raw_ref, r), rect.w, rect.h);
}

}  // namespace

RefTile tile_reference(const Rect& rect, RefTileMode mode, const Image& aligned_ref, const Image& raw_ref,
                       const CorrespondenceField& field, int plane_w, int plane_h) {
    require(rect.inside(plane_w, plane_h), ErrorCode::DimensionMismatch, "tile rect outside the LR plane");
    switch (mode) {
        case RefTileMode::aligned:
            require(aligned_ref.width == plane_w && aligned_ref.height == plane_h, ErrorCode::DimensionMismatch,
                    "aligned reference must cover the LR plane");
            return {crop(aligned_ref, rect), false};
        case RefTileMode::relative:
            return {relative_tile(rect, raw_ref, plane_w, plane_h), false};
        case RefTileMode::region_resize: {
            require(field.width == plane_w && field.height == plane_h, ErrorCode::DimensionMismatch,
                    "field must cover the LR plane");
            // Zero-certainty correspondences are ignored unless nothing else
            // is available.
            for (bool confident_only : {true, false}) {
                double xmin = std::numeric_limits<double>::max(), ymin = xmin;
                double xmax = std::numeric_limits<double>::lowest(), ymax = xmax;
                bool any = false;
                for (int v = rect.y0; v < rect.y0 + rect.h; ++v)
                    for (int u = rect.x0; u < rect.x0 + rect.w; ++u) {
                        if (confident_only && field.cert(u, v) <= 0.0f) continue;
                        any = true;
                        xmin = std::min(xmin, double(field.map_x(u, v)));
                        xmax = std::max(xmax, double(field.map_x(u, v)));
                        ymin = std::min(ymin, double(field.map_y(u, v)));
                        ymax = std::max(ymax, double(field.map_y(u, v)));
                    }
                if (!any) continue;
                const Rect r = clamp_rect(int(std::floor(xmin + 1e-4)), int(std::floor(ymin + 1e-4)),
                                          int(std::ceil(xmax - 1e-4)) + 1, int(std::ceil(ymax - 1e-4)) + 1,
                                          raw_ref.width, raw_ref.height);
                if (r.w < 2 || r.h < 2) break;
                return {resize_bicubic(crop(raw_ref, r), rect.w, rect.h), false};
            }
            return {relative_tile(rect, raw_ref, plane_w, plane_h), true};
        }
    }
    fail(ErrorCode::InvalidArgument, "unknown tile mode");
}

}  // namespace refsr

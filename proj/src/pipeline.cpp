#include "refsr/pipeline.hpp"

#include <algorithm>
#include <exception>
#include <thread>

#include "refsr/error.hpp"
#include "refsr/rng.hpp"

namespace refsr {

std::string_view to_string(RefMode m) {
    switch (m) {
        case RefMode::none: return "none";
        case RefMode::relative: return "relative";
        case RefMode::region_resize: return "region_resize";
        case RefMode::aligned: return "aligned";
    }
    return "?";
}

std::string_view to_string(MaskMode m) { return m == MaskMode::white ? "white" : "sisr"; }

std::uint64_t tile_seed(std::uint64_t seed, std::size_t index) {
    return RngState(seed, 0x711E).split(index).next_u64();
}

namespace {

// Edge-replicating extension of a field to a padded plane.
CorrespondenceField pad_field(const CorrespondenceField& f, int w, int h) {
    if (f.width == w && f.height == h) return f;
    CorrespondenceField out(w, h, f.ref_width, f.ref_height);
    out.orig_ref_width = f.orig_ref_width;
    out.orig_ref_height = f.orig_ref_height;
    for (int v = 0; v < h; ++v)
        for (int u = 0; u < w; ++u) {
            const int su = std::min(u, f.width - 1), sv = std::min(v, f.height - 1);
            out.set_map(u, v, f.map_x(su, sv), f.map_y(su, sv));
            out.certainty[out.index(u, v)] = f.cert(su, sv);
        }
    return out;
}

RefTileMode tile_mode(RefMode m) {
    switch (m) {
        case RefMode::relative: return RefTileMode::relative;
        case RefMode::region_resize: return RefTileMode::region_resize;
        default: return RefTileMode::aligned;
    }
}

}  // namespace

SrResult super_resolve_image(const Image& lr, const Image* ref, const flow::ModelWeights& model,
                             const SrOptions& opts) {
    require(!lr.empty(), ErrorCode::InvalidArgument, "empty LR image");
    require(opts.scale >= 1, ErrorCode::InvalidArgument, "scale must be >= 1");
    require(opts.threads >= 1, ErrorCode::InvalidArgument, "threads must be >= 1");
    require(opts.mode == RefMode::none || ref != nullptr, ErrorCode::InvalidArgument,
            "a reference image is required unless the no-ref mode is selected");

    flow::ModelWeights net = model;
    if (opts.kscale) net.config.kscale = *opts.kscale;
    if (opts.ref_layers) net.config.ref_layers = *opts.ref_layers;
    net.config.validate();
    const flow::ModelConfig& cfg = net.config;
    require(lr.channels == cfg.channels, ErrorCode::DimensionMismatch, "LR channel count differs from the model");
    if (ref) require(ref->channels == cfg.channels, ErrorCode::DimensionMismatch,
                     "reference channel count differs from the model");
    const bool use_ref = opts.mode != RefMode::none && cfg.ref_layers > 0;
    if (use_ref) {
        require(net.ref.has_value(), ErrorCode::MissingCheckpoint, "reference branch weights not loaded");
        require(cfg.ref_layers <= net.ref->depth(), ErrorCode::InvalidArgument,
                "ref_layers exceeds the trained reference branch depth");
    }

    const int tile = opts.tile > 0 ? opts.tile : cfg.image_size;
    const int step = opts.step > 0 ? opts.step : std::max(1, tile * 3 / 4);
    const Image lr_up = resize_bicubic(lr, lr.width * opts.scale, lr.height * opts.scale);
    const int out_w = lr_up.width, out_h = lr_up.height;
    const Image plane = reflect_pad(lr_up, tile, tile);

    SrResult result;
    result.plan = plan_tiles(plane.width, plane.height, tile, step);

    Image aligned;
    CorrespondenceField field;
    if (use_ref && opts.mode != RefMode::relative) {
        Image mask;
        if (opts.mask == MaskMode::sisr) {
            SrOptions sisr = opts;
            sisr.mode = RefMode::none;
            mask = super_resolve_image(lr, nullptr, model, sisr).image;
        } else {
            mask = Image(out_w, out_h, cfg.channels, 1.0f);
        }
        AlignedReference a = align_reference(lr_up, *ref, mask, fit_to_image(opts.match, out_w, out_h));
        result.field = a.field;
        aligned = reflect_pad(a.image, tile, tile);
        field = pad_field(a.field, plane.width, plane.height);
    }

    const flow::PatchCodec codec(cfg);
    const std::size_t n = result.plan.rects.size();
    std::vector<Image> tiles(n);
    std::vector<char> fell_back(n, 0);
    auto run_tile = [&](std::size_t k) {
        const Rect& r = result.plan.rects[k];
        Image lr_tile = crop(plane, r);
        std::optional<Image> ref_tile;
        if (use_ref) {
            RefTile rt = tile_reference(r, tile_mode(opts.mode), aligned, *ref, field, plane.width, plane.height);
            fell_back[k] = rt.fell_back ? 1 : 0;
            ref_tile = std::move(rt.image);
        }
        if (tile != cfg.image_size) {
            lr_tile = resize_bicubic(lr_tile, cfg.image_size, cfg.image_size);
            if (ref_tile) ref_tile = resize_bicubic(*ref_tile, cfg.image_size, cfg.image_size);
        }
        Image out = flow::super_resolve(lr_tile, ref_tile ? &*ref_tile : nullptr, net, codec, tile_seed(opts.seed, k));
        if (tile != cfg.image_size) out = resize_bicubic(out, tile, tile);
        tiles[k] = std::move(out);
    };

    const int workers = int(std::min<std::size_t>(std::size_t(opts.threads), n));
    if (workers <= 1) {
        for (std::size_t k = 0; k < n; ++k) run_tile(k);
    } else {
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
        for (int w = 0; w < workers; ++w)
            pool.emplace_back([&, w] {
                try {
                    for (std::size_t k = std::size_t(w); k < n; k += std::size_t(workers)) run_tile(k);
                } catch (...) {
                    errors[std::size_t(w)] = std::current_exception();
                }
            });
        for (std::thread& t : pool) t.join();
        for (const auto& e : errors)
            if (e) std::rethrow_exception(e);
    }
    for (char f : fell_back) result.fallback_tiles += f;

    Image stitched = clamp01(blend_stitch(result.plan, tiles));
    result.image = (stitched.width == out_w && stitched.height == out_h) ? std::move(stitched)
                                                                          : crop(stitched, {0, 0, out_w, out_h});
    return result;
}

}  // namespace refsr

#include "refsr/matching.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace refsr {

void MatchConfig::validate() const {
    require(working_size >= 2, ErrorCode::InvalidArgument, "working_size");
    require(patch >= 1 && patch % 2 == 1, ErrorCode::InvalidArgument, "patch must be odd");
    require(working_size >= patch, ErrorCode::InvalidArgument, "working_size must be >= patch");
    require(resolved_radius() >= 1, ErrorCode::InvalidArgument, "search_radius must be >= 1");
    require(certainty_floor >= 0.0 && certainty_floor <= 1.0, ErrorCode::InvalidArgument, "certainty_floor");
    require(stride >= 1, ErrorCode::InvalidArgument, "stride");
}

KeyValueConfig MatchConfig::to_kv() const {
    KeyValueConfig kv;
    kv.set("working_size", working_size);
    kv.set("patch", patch);
    kv.set("search_radius", search_radius);
    kv.set("certainty_floor", certainty_floor);
    kv.set("stride", stride);
    kv.set("consistency_check", consistency_check);
    return kv;
}

MatchConfig MatchConfig::from_kv(const KeyValueConfig& kv) {
    MatchConfig c;
    c.working_size = int(kv.get_int("working_size", c.working_size));
    c.patch = int(kv.get_int("patch", c.patch));
    c.search_radius = int(kv.get_int("search_radius", c.search_radius));
    c.certainty_floor = kv.get_double("certainty_floor", c.certainty_floor);
    c.stride = int(kv.get_int("stride", c.stride));
    c.consistency_check = kv.get_bool("consistency_check", c.consistency_check);
    c.validate();
    return c;
}

MatchConfig fit_to_image(const MatchConfig& cfg, int width, int height) {
    MatchConfig c = cfg;
    const int half_side = (std::max(width, height) + 1) / 2;
    c.working_size = std::min(cfg.working_size, std::max(half_side, cfg.patch));
    if (c.search_radius > c.working_size / 2) c.search_radius = c.working_size / 2;
    return c;
}

double zncc(const Image& a, int ax, int ay, const Image& b, int bx, int by, int half) noexcept {
    double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
    for (int j = -half; j <= half; ++j)
        for (int i = -half; i <= half; ++i) {
            const double va = a.clamped(ax + i, ay + j);
            const double vb = b.clamped(bx + i, by + j);
            sa += va;
            sb += vb;
            saa += va * va;
            sbb += vb * vb;
            sab += va * vb;
        }
    const double n = double((2 * half + 1) * (2 * half + 1));
    const double va = saa - sa * sa / n;
    const double vb = sbb - sb * sb / n;
    if (va <= 1e-6 * n || vb <= 1e-6 * n) return 0.0;
    return (sab - sa * sb / n) / std::sqrt(va * vb);
}

namespace {

// Square raster addressed by signed coordinates in [-margin, size + margin).
struct Padded {
    int size = 0;
    int margin = 0;
    int stride = 0;
    std::vector<double> v;

    Padded(int size_, int margin_) : size(size_), margin(margin_), stride(size_ + 2 * margin_) {
        v.assign(std::size_t(stride) * std::size_t(stride), 0.0);
    }
    double& at(int x, int y) noexcept { return v[std::size_t(y + margin) * std::size_t(stride) + std::size_t(x + margin)]; }
    double at(int x, int y) const noexcept {
        return v[std::size_t(y + margin) * std::size_t(stride) + std::size_t(x + margin)];
    }
};

Padded pad_clamped(const Image& img, int margin) {
    Padded p(img.width, margin);
    for (int y = -margin; y < img.width + margin; ++y)
        for (int x = -margin; x < img.width + margin; ++x) p.at(x, y) = img.clamped(x, y);
    return p;
}

// Box statistics for every centre in [-reach, size + reach).
struct BoxStats {
    Padded sum;
    Padded var;
    BoxStats(const Padded& img, int reach, int half) : sum(img.size, reach), var(img.size, reach) {
        const double n = double((2 * half + 1) * (2 * half + 1));
        for (int y = -reach; y < img.size + reach; ++y)
            for (int x = -reach; x < img.size + reach; ++x) {
                double s = 0, q = 0;
                for (int j = -half; j <= half; ++j)
                    for (int i = -half; i <= half; ++i) {
                        const double a = img.at(x + i, y + j);
                        s += a;
                        q += a * a;
                    }
                sum.at(x, y) = s;
                var.at(x, y) = q - s * s / n;
            }
    }
};

std::vector<int> grid_coords(int size, int stride) {
    std::vector<int> g;
    for (int i = 0; i < size; i += stride) g.push_back(i);
    if (g.back() != size - 1) g.push_back(size - 1);
    return g;
}

struct GridMatch {
    int dx = 0;
    int dy = 0;
    double score = -2.0;
};

double parabola_offset(double minus, double centre, double plus) {
    const double denom = minus - 2.0 * centre + plus;
    if (denom >= -1e-12) return 0.0;
    return std::clamp(0.5 * (minus - plus) / denom, -0.5, 0.5);
}

// Piecewise-linear interpolation weights over non-uniform grid coordinates.
struct Interp {
    int i0 = 0;
    int i1 = 0;
    double t = 0.0;
};

std::vector<Interp> interp_table(const std::vector<int>& g, int size) {
    std::vector<Interp> out(static_cast<std::size_t>(size));
    std::size_t k = 0;
    for (int x = 0; x < size; ++x) {
        while (k + 1 < g.size() && g[k + 1] < x) ++k;
        if (k + 1 >= g.size()) {
            out[std::size_t(x)] = {int(k), int(k), 0.0};
            continue;
        }
        const double t = double(x - g[k]) / double(g[k + 1] - g[k]);
        out[std::size_t(x)] = {int(k), int(k + 1), t};
    }
    return out;
}

// Bilinear sample of a scalar grid at fractional position with linear
// extrapolation past the outermost samples.
double sample_extrapolated(const std::vector<float>& values, int w, int h, double x, double y, int stride_elems,
                           int offset) {
    auto axis = [](double s, int n, int& i0, double& t) {
        if (n == 1) {
            i0 = 0;
            t = 0.0;
            return;
        }
        i0 = std::clamp(int(std::floor(s)), 0, n - 2);
        t = s - i0;
    };
    int x0, y0;
    double tx, ty;
    axis(x, w, x0, tx);
    axis(y, h, y0, ty);
    const int x1 = std::min(x0 + 1, w - 1);
    const int y1 = std::min(y0 + 1, h - 1);
    auto v = [&](int xi, int yi) {
        return double(values[(std::size_t(yi) * std::size_t(w) + std::size_t(xi)) * std::size_t(stride_elems) +
                             std::size_t(offset)]);
    };
    const double top = v(x0, y0) + tx * (v(x1, y0) - v(x0, y0));
    const double bot = v(x0, y1) + tx * (v(x1, y1) - v(x0, y1));
    return top + ty * (bot - top);
}

}  // namespace

CorrespondenceField coarse_match(const Image& lr_up, const Image& ref, const MatchConfig& cfg) {
    cfg.validate();
    require(!lr_up.empty() && !ref.empty(), ErrorCode::InvalidArgument, "empty input to coarse_match");
    const int W = cfg.working_size;
    const int R = cfg.resolved_radius();
    const int half = cfg.patch / 2;
    const double n = double(cfg.patch * cfg.patch);
    const double flat = 1e-6 * n;

    const Image a_img = to_luma(resize_bicubic(lr_up, W, W));
    const Image b_img = to_luma(resize_bicubic(ref, W, W));
    // Centres of interest span [-R, W + R); products need one more patch
    // radius and the shifted reference another R.
    const Padded A = pad_clamped(a_img, R + half + 1);
    const Padded B = pad_clamped(b_img, 2 * R + half + 1);
    const BoxStats statA(A, R, half);
    const BoxStats statB(B, R, half);

    const std::vector<int> g = grid_coords(W, cfg.stride);
    const int G = int(g.size());
    std::vector<GridMatch> fwd(std::size_t(G) * std::size_t(G));
    std::vector<GridMatch> bwd(std::size_t(G) * std::size_t(G));

    std::vector<std::pair<int, int>> disps;
    for (int dy = -R; dy <= R; ++dy)
        for (int dx = -R; dx <= R; ++dx) disps.emplace_back(dx, dy);
    // Nearest displacement wins ties.
    std::stable_sort(disps.begin(), disps.end(), [](const auto& p, const auto& q) {
        return p.first * p.first + p.second * p.second < q.first * q.first + q.second * q.second;
    });

    const int lo = -R - half;
    const int span = W + 2 * R + 2 * half;
    std::vector<double> integral(std::size_t(span + 1) * std::size_t(span + 1), 0.0);
    auto I = [&](int x, int y) -> double& {
        return integral[std::size_t(y - lo) * std::size_t(span + 1) + std::size_t(x - lo)];
    };
    // Box sum over the window centred at (cx, cy); integral holds sums over
    // [lo, x) x [lo, y).
    auto box = [&](int cx, int cy) {
        return I(cx + half + 1, cy + half + 1) - I(cx - half, cy + half + 1) - I(cx + half + 1, cy - half) +
               I(cx - half, cy - half);
    };

    constexpr double kTieEps = 1e-7;
    for (const auto& [dx, dy] : disps) {
        for (int y = lo; y < lo + span; ++y) {
            double row = 0.0;
            for (int x = lo; x < lo + span; ++x) {
                row += A.at(x, y) * B.at(x + dx, y + dy);
                I(x + 1, y + 1) = I(x + 1, y) + row;
            }
        }
        for (int j = 0; j < G; ++j)
            for (int i = 0; i < G; ++i) {
                const int px = g[std::size_t(i)], py = g[std::size_t(j)];
                // forward: lr centre p against ref centre p + d
                {
                    const double va = statA.var.at(px, py);
                    const double vb = statB.var.at(px + dx, py + dy);
                    double s = 0.0;
                    if (va > flat && vb > flat)
                        s = (box(px, py) - statA.sum.at(px, py) * statB.sum.at(px + dx, py + dy) / n) /
                            std::sqrt(va * vb);
                    GridMatch& m = fwd[std::size_t(j) * std::size_t(G) + std::size_t(i)];
                    if (s > m.score + kTieEps) m = {dx, dy, s};
                }
                // backward: ref centre q against lr centre q - d
                {
                    const int cx = px - dx, cy = py - dy;
                    const double va = statA.var.at(cx, cy);
                    const double vb = statB.var.at(px, py);
                    double s = 0.0;
                    if (va > flat && vb > flat)
                        s = (box(cx, cy) - statA.sum.at(cx, cy) * statB.sum.at(px, py) / n) / std::sqrt(va * vb);
                    GridMatch& m = bwd[std::size_t(j) * std::size_t(G) + std::size_t(i)];
                    if (s > m.score + kTieEps) m = {-dx, -dy, s};
                }
            }
    }

    auto nearest_grid = [&](double x) {
        const auto it = std::lower_bound(g.begin(), g.end(), int(std::lround(x)));
        int k = int(it - g.begin());
        if (k >= G) return G - 1;
        if (k > 0 && std::abs(g[std::size_t(k - 1)] - x) <= std::abs(g[std::size_t(k)] - x)) --k;
        return k;
    };

    // Per grid node: refined displacement (dx, dy) and certainty.
    std::vector<float> node(std::size_t(G) * std::size_t(G) * 3);
    for (int j = 0; j < G; ++j)
        for (int i = 0; i < G; ++i) {
            const int px = g[std::size_t(i)], py = g[std::size_t(j)];
            const GridMatch& m = fwd[std::size_t(j) * std::size_t(G) + std::size_t(i)];
            const int qx = px + m.dx, qy = py + m.dy;
            double ox = 0.0, oy = 0.0;
            if (m.score > 0.0) {
                ox = parabola_offset(zncc(a_img, px, py, b_img, qx - 1, qy, half), m.score,
                                     zncc(a_img, px, py, b_img, qx + 1, qy, half));
                oy = parabola_offset(zncc(a_img, px, py, b_img, qx, qy - 1, half), m.score,
                                     zncc(a_img, px, py, b_img, qx, qy + 1, half));
            }
            double cert = std::clamp(m.score, 0.0, 1.0);
            if (cert < cfg.certainty_floor) cert = 0.0;
            if (cfg.consistency_check && cert > 0.0) {
                const bool in_view = qx >= 0 && qx < W && qy >= 0 && qy < W;
                bool mutual = false;
                if (in_view) {
                    const int bi = nearest_grid(qx), bj = nearest_grid(qy);
                    const GridMatch& b = bwd[std::size_t(bj) * std::size_t(G) + std::size_t(bi)];
                    const int back_x = g[std::size_t(bi)] + b.dx, back_y = g[std::size_t(bj)] + b.dy;
                    mutual = std::abs(back_x - px) <= cfg.stride && std::abs(back_y - py) <= cfg.stride;
                }
                if (!mutual) cert = 0.0;
            }
            float* nd = &node[(std::size_t(j) * std::size_t(G) + std::size_t(i)) * 3];
            nd[0] = float(m.dx + ox);
            nd[1] = float(m.dy + oy);
            nd[2] = float(cert);
        }

    CorrespondenceField field(W, W, W, W);
    field.orig_ref_width = ref.width;
    field.orig_ref_height = ref.height;
    const auto tab = interp_table(g, W);
    for (int v = 0; v < W; ++v) {
        const Interp& iy = tab[std::size_t(v)];
        for (int u = 0; u < W; ++u) {
            const Interp& ix = tab[std::size_t(u)];
            float out[3];
            for (int k = 0; k < 3; ++k) {
                auto nv = [&](int gi, int gj) {
                    return double(node[(std::size_t(gj) * std::size_t(G) + std::size_t(gi)) * 3 + std::size_t(k)]);
                };
                const double top = nv(ix.i0, iy.i0) + ix.t * (nv(ix.i1, iy.i0) - nv(ix.i0, iy.i0));
                const double bot = nv(ix.i0, iy.i1) + ix.t * (nv(ix.i1, iy.i1) - nv(ix.i0, iy.i1));
                out[k] = float(top + iy.t * (bot - top));
            }
            field.set_map(u, v, float(u) + out[0], float(v) + out[1]);
            field.certainty[field.index(u, v)] = std::clamp(out[2], 0.0f, 1.0f);
        }
    }
    return field;
}

CorrespondenceField upscale_field(const CorrespondenceField& field, int out_w, int out_h) {
    require(out_w >= 1 && out_h >= 1, ErrorCode::InvalidArgument, "zero target dimension");
    require(field.valid(), ErrorCode::InvalidArgument, "invalid field");
    CorrespondenceField out(out_w, out_h, field.orig_ref_width, field.orig_ref_height);
    const double sx = double(field.width) / out_w;
    const double sy = double(field.height) / out_h;
    const double rx = double(field.orig_ref_width) / field.ref_width;
    const double ry = double(field.orig_ref_height) / field.ref_height;
    for (int v = 0; v < out_h; ++v) {
        const double fy = (v + 0.5) * sy - 0.5;
        for (int u = 0; u < out_w; ++u) {
            const double fx = (u + 0.5) * sx - 0.5;
            const double mx = sample_extrapolated(field.mapping, field.width, field.height, fx, fy, 2, 0);
            const double my = sample_extrapolated(field.mapping, field.width, field.height, fx, fy, 2, 1);
            const double c = sample_extrapolated(field.certainty, field.width, field.height, fx, fy, 1, 0);
            out.set_map(u, v, float((mx + 0.5) * rx - 0.5), float((my + 0.5) * ry - 0.5));
            out.certainty[out.index(u, v)] = float(std::clamp(c, 0.0, 1.0));
        }
    }
    return out;
}

Image compose_reference(const Image& ref, const CorrespondenceField& field, const Image& mask) {
    require(mask.width == field.width && mask.height == field.height, ErrorCode::DimensionMismatch,
            "mask must match the field size");
    require(mask.channels == ref.channels, ErrorCode::DimensionMismatch, "mask and reference channel counts differ");
    const Image warped = warp_bilinear(ref, field);
    Image out(field.width, field.height, ref.channels);
    for (int v = 0; v < field.height; ++v)
        for (int u = 0; u < field.width; ++u) {
            const float c = field.cert(u, v);
            for (int ch = 0; ch < ref.channels; ++ch) {
                const float w = warped.at(u, v, ch);
                const float m = mask.at(u, v, ch);
                // exact endpoints for c in {0, 1}
                out.at(u, v, ch) = c == 1.0f ? w : c == 0.0f ? m : c * w + (1.0f - c) * m;
            }
        }
    return out;
}

AlignedReference align_reference(const Image& lr_up, const Image& ref, const Image& mask, const MatchConfig& cfg) {
    const CorrespondenceField coarse = coarse_match(lr_up, ref, cfg);
    CorrespondenceField full = upscale_field(coarse, lr_up.width, lr_up.height);
    Image aligned = compose_reference(ref, full, mask);
    return {std::move(aligned), std::move(full)};
}

}  // namespace refsr

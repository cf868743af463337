#include "refsr/degrade.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <vector>

namespace refsr {

void DegradationConfig::validate() const {
    auto ok = [](const Range& r) { return std::isfinite(r.first) && std::isfinite(r.second) && r.first <= r.second; };
    require(ok(blur_sigma) && blur_sigma.first >= 0.0, ErrorCode::InvalidArgument, "blur_sigma range");
    require(ok(noise_sigma) && noise_sigma.first >= 0.0, ErrorCode::InvalidArgument, "noise_sigma range");
    require(ok(compress_quality) && compress_quality.first >= 1.0 && compress_quality.second <= 100.0,
            ErrorCode::InvalidArgument, "compress_quality range");
    require(down_scale >= 1, ErrorCode::InvalidArgument, "down_scale");
}

KeyValueConfig DegradationConfig::to_kv() const {
    KeyValueConfig kv;
    kv.set("blur_sigma", format_double(blur_sigma.first) + "," + format_double(blur_sigma.second));
    kv.set("down_scale", down_scale);
    kv.set("noise_sigma", format_double(noise_sigma.first) + "," + format_double(noise_sigma.second));
    kv.set("compress_quality", format_double(compress_quality.first) + "," + format_double(compress_quality.second));
    kv.set("second_order", second_order);
    kv.set("seed", static_cast<long long>(seed));
    return kv;
}

DegradationConfig DegradationConfig::from_kv(const KeyValueConfig& kv) {
    DegradationConfig c;
    c.blur_sigma = kv.get_range("blur_sigma", c.blur_sigma);
    c.down_scale = int(kv.get_int("down_scale", c.down_scale));
    c.noise_sigma = kv.get_range("noise_sigma", c.noise_sigma);
    c.compress_quality = kv.get_range("compress_quality", c.compress_quality);
    c.second_order = kv.get_bool("second_order", c.second_order);
    c.seed = static_cast<std::uint64_t>(kv.get_int("seed", 0));
    c.validate();
    return c;
}

Image gaussian_blur(const Image& img, double sigma) {
    require(sigma >= 0.0 && std::isfinite(sigma), ErrorCode::InvalidArgument, "blur sigma must be >= 0");
    if (sigma == 0.0) return img;
    const int radius = int(std::ceil(3.0 * sigma));
    std::vector<double> k(std::size_t(2 * radius + 1));
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        k[std::size_t(i + radius)] = std::exp(-0.5 * double(i * i) / (sigma * sigma));
        sum += k[std::size_t(i + radius)];
    }
    for (double& w : k) w /= sum;

    const int c = img.channels;
    std::vector<double> mid(img.data.size());
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int ch = 0; ch < c; ++ch) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i) acc += k[std::size_t(i + radius)] * img.clamped(x + i, y, ch);
                mid[img.index(x, y, ch)] = acc;
            }
    Image out(img.width, img.height, c);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int ch = 0; ch < c; ++ch) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i) {
                    const int sy = std::clamp(y + i, 0, img.height - 1);
                    acc += k[std::size_t(i + radius)] * mid[img.index(x, sy, ch)];
                }
                out.at(x, y, ch) = float(acc);
            }
    return out;
}

Image add_gaussian_noise(const Image& img, double sigma, RngState rng) {
    require(sigma >= 0.0 && std::isfinite(sigma), ErrorCode::InvalidArgument, "noise sigma must be >= 0");
    if (sigma == 0.0) return img;
    Image out = img;
    for (float& v : out.data) v = std::clamp(float(double(v) + sigma * rng.normal()), 0.0f, 1.0f);
    return out;
}

namespace {

constexpr std::array<int, 64> kLumaTable = {
    16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,  14, 13, 16, 24, 40,  57,
    69, 56, 14, 17, 22,  29,  51,  87,  80, 62, 18, 22, 37,  56,  68,  109, 103, 77, 24, 35, 55,  64,
    81, 104, 113, 92, 49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};

std::array<double, 64> quant_table(int quality) {
    quality = std::clamp(quality, 1, 100);
    const int scale = quality < 50 ? 5000 / quality : 200 - 2 * quality;
    std::array<double, 64> q{};
    for (std::size_t i = 0; i < 64; ++i) q[i] = std::clamp((kLumaTable[i] * scale + 50) / 100, 1, 255);
    return q;
}

// Orthonormal DCT-II basis: basis[u][x] = alpha(u) cos((2x+1) u pi / 16).
const std::array<std::array<double, 8>, 8>& dct_basis() {
    static const auto basis = [] {
        std::array<std::array<double, 8>, 8> b{};
        for (int u = 0; u < 8; ++u)
            for (int x = 0; x < 8; ++x)
                b[std::size_t(u)][std::size_t(x)] = (u == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0)) *
                                                    std::cos((2 * x + 1) * u * std::numbers::pi / 16.0);
        return b;
    }();
    return basis;
}

void dct_roundtrip_block(std::array<double, 64>& block, const std::array<double, 64>& q) {
    const auto& b = dct_basis();
    std::array<double, 64> tmp{}, coef{};
    // rows then columns
    for (int y = 0; y < 8; ++y)
        for (int u = 0; u < 8; ++u) {
            double s = 0.0;
            for (int x = 0; x < 8; ++x) s += b[std::size_t(u)][std::size_t(x)] * block[std::size_t(y * 8 + x)];
            tmp[std::size_t(y * 8 + u)] = s;
        }
    for (int v = 0; v < 8; ++v)
        for (int u = 0; u < 8; ++u) {
            double s = 0.0;
            for (int y = 0; y < 8; ++y) s += b[std::size_t(v)][std::size_t(y)] * tmp[std::size_t(y * 8 + u)];
            coef[std::size_t(v * 8 + u)] = std::round(s / q[std::size_t(v * 8 + u)]) * q[std::size_t(v * 8 + u)];
        }
    for (int y = 0; y < 8; ++y)
        for (int u = 0; u < 8; ++u) {
            double s = 0.0;
            for (int v = 0; v < 8; ++v) s += b[std::size_t(v)][std::size_t(y)] * coef[std::size_t(v * 8 + u)];
            tmp[std::size_t(y * 8 + u)] = s;
        }
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
            double s = 0.0;
            for (int u = 0; u < 8; ++u) s += b[std::size_t(u)][std::size_t(x)] * tmp[std::size_t(y * 8 + u)];
            block[std::size_t(y * 8 + x)] = s;
        }
}

}  // namespace

Image jpeg_surrogate(const Image& img, int quality) {
    require(quality >= 1 && quality <= 100, ErrorCode::InvalidArgument, "quality must be in 1..100");
    auto q = quant_table(quality);
    // The orthonormal DC term is 8x the block mean; a step of at most 8 keeps
    // every block mean within half a level, so flat regions survive intact.
    q[0] = std::min(q[0], 8.0);
    Image out(img.width, img.height, img.channels);
    std::array<double, 64> block{};
    for (int by = 0; by < img.height; by += 8)
        for (int bx = 0; bx < img.width; bx += 8)
            for (int c = 0; c < img.channels; ++c) {
                for (int y = 0; y < 8; ++y)
                    for (int x = 0; x < 8; ++x)
                        block[std::size_t(y * 8 + x)] = double(img.clamped(bx + x, by + y, c)) * 255.0 - 128.0;
                dct_roundtrip_block(block, q);
                for (int y = 0; y < 8 && by + y < img.height; ++y)
                    for (int x = 0; x < 8 && bx + x < img.width; ++x)
                        out.at(bx + x, by + y, c) =
                            std::clamp(float((block[std::size_t(y * 8 + x)] + 128.0) / 255.0), 0.0f, 1.0f);
            }
    return out;
}

Image degrade_pipeline(const Image& hr, const DegradationConfig& cfg) {
    cfg.validate();
    require(hr.width % cfg.down_scale == 0 && hr.height % cfg.down_scale == 0, ErrorCode::DimensionMismatch,
            "image dimensions must be divisible by down_scale");
    const int out_w = hr.width / cfg.down_scale;
    const int out_h = hr.height / cfg.down_scale;
    RngState rng(cfg.seed, 0);
    const int orders = cfg.second_order ? 2 : 1;

    Image img = hr;
    for (int order = 0; order < orders; ++order) {
        const bool last = order == orders - 1;
        // Parameters are drawn in a fixed order so the draw sequence does
        // not depend on which stages are no-ops.
        const double sigma = rng.uniform(cfg.blur_sigma.first, cfg.blur_sigma.second);
        const double scale = rng.uniform(1.0 / cfg.down_scale, 1.0);
        const double noise = rng.uniform(cfg.noise_sigma.first, cfg.noise_sigma.second);
        const double quality = rng.uniform(cfg.compress_quality.first, cfg.compress_quality.second);
        const RngState noise_rng = rng.split(std::uint64_t(order) + 1);

        img = gaussian_blur(img, sigma);
        int w = out_w, h = out_h;
        if (!last) {
            w = std::clamp(int(std::lround(img.width * scale)), out_w, img.width);
            h = std::clamp(int(std::lround(img.height * scale)), out_h, img.height);
        }
        if (w != img.width || h != img.height) img = resize_bicubic(img, w, h);
        img = add_gaussian_noise(img, noise, noise_rng);
        img = jpeg_surrogate(img, int(std::lround(quality)));
    }
    return img;
}

}  // namespace refsr

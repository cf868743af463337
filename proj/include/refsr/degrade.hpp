#pragma once

#include <cstdint>
#include <utility>

#include "refsr/image.hpp"
#include "refsr/kvconfig.hpp"
#include "refsr/rng.hpp"

namespace refsr {

using Range = std::pair<double, double>;

// Parameters of the synthetic real-world degradation chain. Every sampled
// quantity is drawn from `seed`.
struct DegradationConfig {
    Range blur_sigma{0.2, 1.2};
    int down_scale = 4;
    Range noise_sigma{0.0, 0.02};
    Range compress_quality{60.0, 95.0};
    bool second_order = true;
    std::uint64_t seed = 0;

    void validate() const;
    KeyValueConfig to_kv() const;
    static DegradationConfig from_kv(const KeyValueConfig& kv);
};

// Separable Gaussian, radius ceil(3 sigma), unit-sum kernel, edge clamp.
// sigma == 0 returns the input unchanged.
Image gaussian_blur(const Image& img, double sigma);

// i.i.d. additive Gaussian then clamp to [0,1]. `rng` is taken by value: the
// same state always yields the same noise field.
Image add_gaussian_noise(const Image& img, double sigma, RngState rng);

// 8x8 block DCT, quantisation with the standard luminance table scaled by
// quality (IJG scaling), inverse DCT, clamp. Applied per channel on 8-bit
// scale values; edges are padded by replication.
Image jpeg_surrogate(const Image& img, int quality);

// blur -> bicubic resize -> noise -> compress. With second_order set the
// chain runs twice: the first pass resizes to a random intermediate scale in
// [1/down_scale, 1], the second to the final size. A single pass resizes
// straight to the final size.
Image degrade_pipeline(const Image& hr, const DegradationConfig& cfg);

}  // namespace refsr

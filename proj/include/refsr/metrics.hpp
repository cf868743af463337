#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "refsr/datagen.hpp"
#include "refsr/image.hpp"

namespace refsr {

inline constexpr double kPsnrCap = 100.0;

// 10 log10(1 / MSE) on [0,1] values; identical images give kPsnrCap.
double psnr(const Image& a, const Image& b);

// Single-scale SSIM on luma: 11x11 Gaussian window (sigma 1.5),
// C1 = 0.01^2, C2 = 0.03^2, averaged over fully valid window positions.
double ssim(const Image& a, const Image& b);

struct EvalRow {
    int id = 0;
    std::string method;
    double psnr = 0.0;
    double ssim = 0.0;
};

struct EvalReport {
    std::vector<EvalRow> rows;
    double mean_psnr = 0.0;
    double mean_ssim = 0.0;
    std::string config_echo;  // key=value lines written as '#' header comments

    // CSV: '#' config lines, header `id,method,psnr,ssim`, one row per image,
    // then a `MEAN` summary row.
    void save(const std::filesystem::path& csv) const;
};

// Scores `<outputs_dir>/<id>.png` (6-digit id) against each HR image of the
// chosen split. Missing outputs are reported together by id.
EvalReport eval_run(const Manifest& manifest, const std::filesystem::path& outputs_dir, const std::string& method,
                    const std::string& split = "test");

std::string output_name(int id);

}  // namespace refsr

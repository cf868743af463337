#include "refsr/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "refsr/kvconfig.hpp"

namespace refsr {

double psnr(const Image& a, const Image& b) {
    require(a.same_shape(b), ErrorCode::DimensionMismatch, "psnr inputs differ in shape");
    require(!a.empty(), ErrorCode::InvalidArgument, "empty image");
    double se = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = double(a.data[i]) - double(b.data[i]);
        se += d * d;
    }
    const double mse = se / double(a.data.size());
    if (mse == 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

double ssim(const Image& a, const Image& b) {
    require(a.same_shape(b), ErrorCode::DimensionMismatch, "ssim inputs differ in shape");
    constexpr int kWin = 11;
    constexpr int kHalf = kWin / 2;
    constexpr double kSigma = 1.5;
    constexpr double C1 = 0.01 * 0.01;
    constexpr double C2 = 0.03 * 0.03;
    require(a.width >= kWin && a.height >= kWin, ErrorCode::InvalidArgument, "image smaller than the SSIM window");
    const Image x = to_luma(a);
    const Image y = to_luma(b);
    if (x.data == y.data) return 1.0;

    double g[kWin];
    double gs = 0.0;
    for (int i = 0; i < kWin; ++i) {
        g[i] = std::exp(-0.5 * double((i - kHalf) * (i - kHalf)) / (kSigma * kSigma));
        gs += g[i];
    }
    for (double& v : g) v /= gs;

    const int w = x.width, h = x.height;
    const int ow = w - kWin + 1, oh = h - kWin + 1;
    // Horizontal pass on the five moment images, then vertical at valid rows.
    std::vector<double> hx(std::size_t(ow) * std::size_t(h) * 5);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < ow; ++c) {
            double m[5] = {0, 0, 0, 0, 0};
            for (int k = 0; k < kWin; ++k) {
                const double p = x.at(c + k, r), q = y.at(c + k, r);
                m[0] += g[k] * p;
                m[1] += g[k] * q;
                m[2] += g[k] * p * p;
                m[3] += g[k] * q * q;
                m[4] += g[k] * p * q;
            }
            for (int j = 0; j < 5; ++j) hx[(std::size_t(r) * std::size_t(ow) + std::size_t(c)) * 5 + std::size_t(j)] = m[j];
        }
    double total = 0.0;
    for (int r = 0; r < oh; ++r)
        for (int c = 0; c < ow; ++c) {
            double m[5] = {0, 0, 0, 0, 0};
            for (int k = 0; k < kWin; ++k)
                for (int j = 0; j < 5; ++j)
                    m[j] += g[k] * hx[(std::size_t(r + k) * std::size_t(ow) + std::size_t(c)) * 5 + std::size_t(j)];
            const double mx = m[0], my = m[1];
            const double vx = m[2] - mx * mx, vy = m[3] - my * my, cxy = m[4] - mx * my;
            total += ((2 * mx * my + C1) * (2 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2));
        }
    return total / (double(ow) * double(oh));
}

std::string output_name(int id) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%06d.png", id);
    return buf;
}

void EvalReport::save(const std::filesystem::path& csv) const {
    std::ofstream out(csv);
    if (!out) fail(ErrorCode::Unwritable, csv.string());
    std::istringstream echo(config_echo);
    for (std::string line; std::getline(echo, line);)
        if (!line.empty()) out << "# " << line << '\n';
    out << "id,method,psnr,ssim\n";
    char buf[128];
    for (const EvalRow& r : rows) {
        std::snprintf(buf, sizeof(buf), "%d,%s,%.6f,%.6f\n", r.id, r.method.c_str(), r.psnr, r.ssim);
        out << buf;
    }
    std::snprintf(buf, sizeof(buf), "MEAN,%s,%.6f,%.6f\n", rows.empty() ? "" : rows.front().method.c_str(), mean_psnr,
                  mean_ssim);
    out << buf;
    if (!out) fail(ErrorCode::Unwritable, csv.string());
}

EvalReport eval_run(const Manifest& manifest, const std::filesystem::path& outputs_dir, const std::string& method,
                    const std::string& split) {
    const auto rows = manifest.split(split);
    if (rows.empty()) fail(ErrorCode::EmptySplit, "split '" + split + "' has no rows");
    std::string missing;
    for (const ManifestRow& r : rows)
        if (!std::filesystem::exists(outputs_dir / output_name(r.id)))
            missing += (missing.empty() ? "" : ",") + std::to_string(r.id);
    if (!missing.empty()) fail(ErrorCode::MissingOutput, "no output for ids " + missing);

    EvalReport report;
    for (const ManifestRow& r : rows) {
        const Image hr = load_image(manifest.root / r.hr_path);
        const Image out = load_image(outputs_dir / output_name(r.id));
        report.rows.push_back({r.id, method, psnr(out, hr), ssim(out, hr)});
    }
    for (const EvalRow& r : report.rows) {
        report.mean_psnr += r.psnr;
        report.mean_ssim += r.ssim;
    }
    report.mean_psnr /= double(report.rows.size());
    report.mean_ssim /= double(report.rows.size());
    KeyValueConfig echo;
    echo.set("metric.psnr", std::string("rgb, max=1, cap=100"));
    echo.set("metric.ssim", std::string("luma (ITU-R 601), gaussian 11x11 sigma 1.5"));
    echo.set("eval.split", split);
    echo.set("eval.method", method);
    report.config_echo = echo.to_string();
    return report;
}

}  // namespace refsr

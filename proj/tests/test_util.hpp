#pragma once

#include <doctest.h>

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

#include "refsr/error.hpp"
#include "refsr/image.hpp"
#include "refsr/rng.hpp"

namespace testutil {

// Fresh directory under the build tree's temp area, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("refsr_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

private:
    std::filesystem::path path_;
};

inline refsr::Image random_image(int w, int h, int c, std::uint64_t seed) {
    refsr::Image img(w, h, c);
    refsr::RngState rng(seed, 11);
    for (float& v : img.data) v = float(rng.uniform());
    return img;
}

// Smooth-plus-detail texture that gives ZNCC something to lock on to.
inline refsr::Image texture(int w, int h, std::uint64_t seed, int channels = 3) {
    refsr::RngState rng(seed, 12);
    double fx[6], fy[6], ph[6], amp[6];
    for (int k = 0; k < 6; ++k) {
        fx[k] = rng.uniform(-0.35, 0.35);
        fy[k] = rng.uniform(-0.35, 0.35);
        ph[k] = rng.uniform(0.0, 6.283);
        amp[k] = rng.uniform(0.04, 0.09);
    }
    refsr::Image img(w, h, channels);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double v = 0.5;
            for (int k = 0; k < 6; ++k) v += amp[k] * std::sin(fx[k] * x + fy[k] * y + ph[k]);
            for (int c = 0; c < channels; ++c) img.at(x, y, c) = float(std::clamp(v + 0.03 * c, 0.0, 1.0));
        }
    return img;
}

inline double max_abs_diff(const refsr::Image& a, const refsr::Image& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(double(a.data[i]) - double(b.data[i])));
    return m;
}

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::filesystem::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary);
    out.write(bytes.data(), std::streamsize(bytes.size()));
}

}  // namespace testutil

// Checks that `expr` throws refsr::Error with the given code.
#define CHECK_ERROR_CODE(expr, expected)                                \
    do {                                                                \
        bool thrown_ = false;                                           \
        try {                                                           \
            (void)(expr);                                               \
        } catch (const refsr::Error& e_) {                              \
            thrown_ = true;                                             \
            CHECK_MESSAGE(e_.code() == (expected), std::string(e_.what()));          \
        }                                                               \
        CHECK_MESSAGE(thrown_, "expected an exception from " #expr);    \
    } while (0)

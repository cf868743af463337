#include "refsr/image.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

#include "refsr/field.hpp"

namespace refsr {

std::string_view to_string(ErrorCode code) noexcept {
    switch (code) {
        case ErrorCode::NotFound: return "not found";
        case ErrorCode::UnsupportedFormat: return "unsupported format";
        case ErrorCode::Truncated: return "truncated stream";
        case ErrorCode::MalformedHeader: return "malformed header";
        case ErrorCode::Unwritable: return "unwritable path";
        case ErrorCode::DimensionMismatch: return "dimension mismatch";
        case ErrorCode::InvalidArgument: return "invalid argument";
        case ErrorCode::DegenerateHomography: return "degenerate homography";
        case ErrorCode::MissingCheckpoint: return "missing checkpoint";
        case ErrorCode::MissingOutput: return "missing output";
        case ErrorCode::EmptySplit: return "empty split";
        case ErrorCode::CorruptFile: return "corrupt file";
    }
    return "error";
}

Image::Image(int w, int h, int c, float fill) : width(w), height(h), channels(c) {
    require(w >= 0 && h >= 0 && (c == 1 || c == 3), ErrorCode::InvalidArgument, "image shape");
    data.assign(std::size_t(w) * std::size_t(h) * std::size_t(c), fill);
}

float Image::clamped(int x, int y, int c) const noexcept {
    x = std::clamp(x, 0, width - 1);
    y = std::clamp(y, 0, height - 1);
    return at(x, y, c);
}

unsigned char encode_level(float v) noexcept {
    const double s = std::clamp(double(v), 0.0, 1.0) * 255.0;
    // std::round rounds half away from zero.
    return static_cast<unsigned char>(std::round(s));
}

namespace {

std::vector<unsigned char> read_all(const std::filesystem::path& path) {
    std::error_code ec;
    if (!std::filesystem::is_regular_file(path, ec)) fail(ErrorCode::NotFound, path.string());
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::NotFound, path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Netpbm header token reader honouring '#' comments.
class PnmHeader {
public:
    explicit PnmHeader(const std::vector<unsigned char>& bytes) : bytes_(bytes) {}

    long next_int(const char* what) {
        skip_space_and_comments();
        if (pos_ >= bytes_.size()) fail(ErrorCode::Truncated, std::string("header ended before ") + what);
        if (!std::isdigit(bytes_[pos_])) fail(ErrorCode::MalformedHeader, std::string("expected ") + what);
        long v = 0;
        while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
            v = v * 10 + (bytes_[pos_] - '0');
            if (v > (1L << 24)) fail(ErrorCode::MalformedHeader, std::string(what) + " too large");
            ++pos_;
        }
        return v;
    }

    // Exactly one whitespace byte separates maxval from the raster.
    std::size_t raster_start() {
        if (pos_ >= bytes_.size()) fail(ErrorCode::Truncated, "no raster");
        if (!std::isspace(bytes_[pos_])) fail(ErrorCode::MalformedHeader, "missing separator");
        return pos_ + 1;
    }

private:
    void skip_space_and_comments() {
        while (pos_ < bytes_.size()) {
            if (std::isspace(bytes_[pos_])) {
                ++pos_;
            } else if (bytes_[pos_] == '#') {
                while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
            } else {
                break;
            }
        }
    }

    const std::vector<unsigned char>& bytes_;
    std::size_t pos_ = 2;
};

Image decode_pnm(const std::vector<unsigned char>& bytes, int channels) {
    PnmHeader header(bytes);
    const long w = header.next_int("width");
    const long h = header.next_int("height");
    const long maxval = header.next_int("maxval");
    if (w <= 0 || h <= 0) fail(ErrorCode::MalformedHeader, "zero dimension");
    if (maxval != 255) fail(ErrorCode::UnsupportedFormat, "only 8-bit netpbm (maxval 255) is supported");
    const std::size_t start = header.raster_start();
    const std::size_t need = std::size_t(w) * std::size_t(h) * std::size_t(channels);
    if (bytes.size() - start < need) fail(ErrorCode::Truncated, "raster shorter than header promises");
    Image img(int(w), int(h), channels);
    for (std::size_t i = 0; i < need; ++i) img.data[i] = float(bytes[start + i]) / 255.0f;
    return img;
}

Image decode_png(const std::filesystem::path& path) {
    png_image png;
    std::memset(&png, 0, sizeof(png));
    png.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&png, path.string().c_str()))
        fail(ErrorCode::Truncated, std::string("png header: ") + png.message);
    const bool gray = (png.format & PNG_FORMAT_FLAG_COLOR) == 0;
    png.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    const int channels = gray ? 1 : 3;
    if (png.width == 0 || png.height == 0) {
        png_image_free(&png);
        fail(ErrorCode::MalformedHeader, "zero dimension");
    }
    std::vector<unsigned char> buf(PNG_IMAGE_SIZE(png));
    if (!png_image_finish_read(&png, nullptr, buf.data(), 0, nullptr))
        fail(ErrorCode::Truncated, std::string("png data: ") + png.message);
    Image img(int(png.width), int(png.height), channels);
    for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = float(buf[i]) / 255.0f;
    png_image_free(&png);
    return img;
}

std::vector<unsigned char> encode_bytes(const Image& img) {
    std::vector<unsigned char> out(img.data.size());
    std::transform(img.data.begin(), img.data.end(), out.begin(), encode_level);
    return out;
}

std::string lower_ext(const std::filesystem::path& path) {
    std::string ext = path.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return char(std::tolower(c)); });
    return ext;
}

}  // namespace

Image load_image(const std::filesystem::path& path) {
    const auto bytes = read_all(path);
    if (bytes.size() >= 8) {
        static constexpr std::array<unsigned char, 8> sig = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
        if (std::equal(sig.begin(), sig.end(), bytes.begin())) return decode_png(path);
    }
    if (bytes.size() >= 2 && bytes[0] == 'P') {
        if (bytes[1] == '5') return decode_pnm(bytes, 1);
        if (bytes[1] == '6') return decode_pnm(bytes, 3);
    }
    if (bytes.size() < 2) fail(ErrorCode::Truncated, path.string());
    fail(ErrorCode::UnsupportedFormat, path.string());
}

void save_image(const Image& img, const std::filesystem::path& path) {
    require(!img.empty(), ErrorCode::InvalidArgument, "empty image");
    const auto bytes = encode_bytes(img);
    const std::string ext = lower_ext(path);
    if (ext == ".png") {
        png_image png;
        std::memset(&png, 0, sizeof(png));
        png.version = PNG_IMAGE_VERSION;
        png.width = png_uint_32(img.width);
        png.height = png_uint_32(img.height);
        png.format = img.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
        if (!png_image_write_to_file(&png, path.string().c_str(), 0, bytes.data(), 0, nullptr))
            fail(ErrorCode::Unwritable, path.string() + " (" + png.message + ")");
        return;
    }
    if (ext != ".ppm" && ext != ".pgm") fail(ErrorCode::UnsupportedFormat, "cannot encode " + path.string());
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorCode::Unwritable, path.string());
    out << (img.channels == 1 ? "P5" : "P6") << '\n' << img.width << ' ' << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!out) fail(ErrorCode::Unwritable, path.string());
}

namespace {

double cubic_weight(double x) {
    constexpr double a = -0.5;
    x = std::abs(x);
    if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
    if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
    return 0.0;
}

struct Taps {
    int first = 0;
    std::array<double, 4> w{};
};

std::vector<Taps> cubic_taps(int in, int out) {
    std::vector<Taps> taps(static_cast<std::size_t>(out));
    const double scale = double(in) / double(out);
    for (int i = 0; i < out; ++i) {
        const double src = (i + 0.5) * scale - 0.5;
        const int base = int(std::floor(src));
        const double t = src - base;
        taps[std::size_t(i)].first = base - 1;
        for (int k = 0; k < 4; ++k) taps[std::size_t(i)].w[std::size_t(k)] = cubic_weight(t - (k - 1));
    }
    return taps;
}

}  // namespace

Image resize_bicubic(const Image& img, int out_w, int out_h) {
    require(out_w >= 1 && out_h >= 1, ErrorCode::InvalidArgument, "zero target dimension");
    require(!img.empty(), ErrorCode::InvalidArgument, "empty image");
    const auto tx = cubic_taps(img.width, out_w);
    const auto ty = cubic_taps(img.height, out_h);
    const int c = img.channels;

    // Horizontal pass into a double buffer, then vertical.
    std::vector<double> mid(std::size_t(out_w) * std::size_t(img.height) * std::size_t(c));
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < out_w; ++x) {
            const Taps& t = tx[std::size_t(x)];
            for (int ch = 0; ch < c; ++ch) {
                double acc = 0.0;
                for (int k = 0; k < 4; ++k) acc += t.w[std::size_t(k)] * img.clamped(t.first + k, y, ch);
                mid[(std::size_t(y) * std::size_t(out_w) + std::size_t(x)) * std::size_t(c) + std::size_t(ch)] = acc;
            }
        }
    }
    Image out(out_w, out_h, c);
    for (int y = 0; y < out_h; ++y) {
        const Taps& t = ty[std::size_t(y)];
        for (int x = 0; x < out_w; ++x) {
            for (int ch = 0; ch < c; ++ch) {
                double acc = 0.0;
                for (int k = 0; k < 4; ++k) {
                    const int sy = std::clamp(t.first + k, 0, img.height - 1);
                    acc += t.w[std::size_t(k)] *
                           mid[(std::size_t(sy) * std::size_t(out_w) + std::size_t(x)) * std::size_t(c) + std::size_t(ch)];
                }
                out.at(x, y, ch) = float(acc);
            }
        }
    }
    return out;
}

float sample_bilinear(const Image& img, float x, float y, int c) noexcept {
    const float cx = std::clamp(x, 0.0f, float(img.width - 1));
    const float cy = std::clamp(y, 0.0f, float(img.height - 1));
    const int x0 = int(std::floor(cx));
    const int y0 = int(std::floor(cy));
    const float fx = cx - float(x0);
    const float fy = cy - float(y0);
    // Integer coordinates take the exact pixel; no 0 * value contributions.
    if (fx == 0.0f && fy == 0.0f) return img.at(x0, y0, c);
    const int x1 = std::min(x0 + 1, img.width - 1);
    const int y1 = std::min(y0 + 1, img.height - 1);
    const float top = img.at(x0, y0, c) + fx * (img.at(x1, y0, c) - img.at(x0, y0, c));
    const float bot = img.at(x0, y1, c) + fx * (img.at(x1, y1, c) - img.at(x0, y1, c));
    return top + fy * (bot - top);
}

Image warp_bilinear(const Image& img, const CorrespondenceField& field) {
    require(field.valid(), ErrorCode::InvalidArgument, "invalid field");
    require(!img.empty(), ErrorCode::InvalidArgument, "empty image");
    Image out(field.width, field.height, img.channels);
    for (int v = 0; v < field.height; ++v)
        for (int u = 0; u < field.width; ++u) {
            const float x = field.map_x(u, v);
            const float y = field.map_y(u, v);
            for (int c = 0; c < img.channels; ++c) out.at(u, v, c) = sample_bilinear(img, x, y, c);
        }
    return out;
}

Image crop(const Image& img, const Rect& r) {
    require(r.inside(img.width, img.height), ErrorCode::DimensionMismatch, "crop rect outside image");
    Image out(r.w, r.h, img.channels);
    const std::size_t row = std::size_t(r.w) * std::size_t(img.channels);
    for (int y = 0; y < r.h; ++y)
        std::copy_n(img.data.begin() + std::ptrdiff_t(img.index(r.x0, r.y0 + y)), row,
                    out.data.begin() + std::ptrdiff_t(out.index(0, y)));
    return out;
}

void paste(Image& dst, const Image& src, int x0, int y0) {
    require(dst.channels == src.channels, ErrorCode::DimensionMismatch, "paste channels");
    require(Rect{x0, y0, src.width, src.height}.inside(dst.width, dst.height), ErrorCode::DimensionMismatch,
            "paste outside image");
    const std::size_t row = std::size_t(src.width) * std::size_t(src.channels);
    for (int y = 0; y < src.height; ++y)
        std::copy_n(src.data.begin() + std::ptrdiff_t(src.index(0, y)), row,
                    dst.data.begin() + std::ptrdiff_t(dst.index(x0, y0 + y)));
}

namespace {

int reflect_index(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - i;
}

}  // namespace

Image reflect_pad(const Image& img, int min_w, int min_h) {
    const int w = std::max(img.width, min_w);
    const int h = std::max(img.height, min_h);
    if (w == img.width && h == img.height) return img;
    Image out(w, h, img.channels);
    for (int y = 0; y < h; ++y) {
        const int sy = reflect_index(y, img.height);
        for (int x = 0; x < w; ++x) {
            const int sx = reflect_index(x, img.width);
            for (int c = 0; c < img.channels; ++c) out.at(x, y, c) = img.at(sx, sy, c);
        }
    }
    return out;
}

Image flip_horizontal(const Image& img) {
    Image out(img.width, img.height, img.channels);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < img.channels; ++c) out.at(img.width - 1 - x, y, c) = img.at(x, y, c);
    return out;
}

Image to_luma(const Image& img) {
    if (img.channels == 1) return img;
    Image out(img.width, img.height, 1);
    for (std::size_t i = 0; i < img.pixel_count(); ++i) {
        const float* p = &img.data[3 * i];
        out.data[i] = 0.299f * p[0] + 0.587f * p[1] + 0.114f * p[2];
    }
    return out;
}

Image clamp01(Image img) {
    for (float& v : img.data) v = std::clamp(v, 0.0f, 1.0f);
    return img;
}

}  // namespace refsr

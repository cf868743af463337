#include "refsr/field.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>

#include "refsr/binio.hpp"

namespace refsr {

CorrespondenceField::CorrespondenceField(int w, int h, int ref_w, int ref_h)
    : width(w), height(h), ref_width(ref_w), ref_height(ref_h), orig_ref_width(ref_w), orig_ref_height(ref_h) {
    require(w > 0 && h > 0 && ref_w > 0 && ref_h > 0, ErrorCode::InvalidArgument, "field shape");
    mapping.assign(2 * std::size_t(w) * std::size_t(h), 0.0f);
    certainty.assign(std::size_t(w) * std::size_t(h), 0.0f);
}

CorrespondenceField CorrespondenceField::identity(int w, int h) { return translation(w, h, 0.0f, 0.0f); }

CorrespondenceField CorrespondenceField::translation(int w, int h, float dx, float dy) {
    CorrespondenceField f(w, h, w, h);
    for (int v = 0; v < h; ++v)
        for (int u = 0; u < w; ++u) f.set_map(u, v, float(u) + dx, float(v) + dy);
    std::fill(f.certainty.begin(), f.certainty.end(), 1.0f);
    return f;
}

double CorrespondenceField::mean_certainty() const noexcept {
    if (certainty.empty()) return 0.0;
    return std::accumulate(certainty.begin(), certainty.end(), 0.0) / double(certainty.size());
}

bool CorrespondenceField::valid() const noexcept {
    if (width <= 0 || height <= 0) return false;
    const std::size_t n = std::size_t(width) * std::size_t(height);
    if (mapping.size() != 2 * n || certainty.size() != n) return false;
    return std::all_of(mapping.begin(), mapping.end(), [](float v) { return std::isfinite(v); }) &&
           std::all_of(certainty.begin(), certainty.end(), [](float c) { return c >= 0.0f && c <= 1.0f; });
}

namespace {
constexpr char kFieldMagic[8] = {'R', 'S', 'R', 'F', 'I', 'E', 'L', 'D'};
constexpr std::uint32_t kFieldVersion = 1;
}  // namespace

void save_field(const CorrespondenceField& field, const std::filesystem::path& path) {
    require(field.valid(), ErrorCode::InvalidArgument, "invalid field");
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorCode::Unwritable, path.string());
    out.write(kFieldMagic, sizeof(kFieldMagic));
    binio::put_u32(out, kFieldVersion);
    for (int v : {field.width, field.height, field.ref_width, field.ref_height, field.orig_ref_width,
                  field.orig_ref_height})
        binio::put_i32(out, v);
    binio::put_floats(out, field.mapping);
    binio::put_floats(out, field.certainty);
    if (!out) fail(ErrorCode::Unwritable, path.string());
}

CorrespondenceField load_field(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::NotFound, path.string());
    char magic[8];
    binio::read_exact(in, magic, sizeof(magic));
    if (std::memcmp(magic, kFieldMagic, sizeof(magic)) != 0) fail(ErrorCode::UnsupportedFormat, "not a field file");
    if (binio::get_u32(in) != kFieldVersion) fail(ErrorCode::UnsupportedFormat, "field version");
    int dims[6];
    for (int& d : dims) d = binio::get_i32(in);
    if (dims[0] <= 0 || dims[1] <= 0 || dims[2] <= 0 || dims[3] <= 0 || dims[4] <= 0 || dims[5] <= 0)
        fail(ErrorCode::MalformedHeader, "field dimensions");
    CorrespondenceField f(dims[0], dims[1], dims[2], dims[3]);
    f.orig_ref_width = dims[4];
    f.orig_ref_height = dims[5];
    binio::get_floats(in, f.mapping);
    binio::get_floats(in, f.certainty);
    return f;
}

Image certainty_image(const CorrespondenceField& field) {
    Image img(field.width, field.height, 1);
    std::copy(field.certainty.begin(), field.certainty.end(), img.data.begin());
    return img;
}

}  // namespace refsr

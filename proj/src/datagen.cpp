#include "refsr/datagen.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <complex>
#include <fstream>
#include <numbers>
#include <sstream>

#include "refsr/kvconfig.hpp"
#include "refsr/rng.hpp"

namespace refsr {

Homography identity_homography() noexcept { return {1, 0, 0, 0, 1, 0, 0, 0, 1}; }

Homography invert(const Homography& h) {
    Eigen::Matrix3d m;
    m << h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8];
    const double det = m.determinant();
    if (!std::isfinite(det) || std::abs(det) < 1e-12) fail(ErrorCode::DegenerateHomography, "singular homography");
    Eigen::Matrix3d inv = m.inverse();
    inv /= inv(2, 2);
    return {inv(0, 0), inv(0, 1), inv(0, 2), inv(1, 0), inv(1, 1), inv(1, 2), inv(2, 0), inv(2, 1), inv(2, 2)};
}

std::array<double, 2> apply(const Homography& h, double x, double y) noexcept {
    const double w = h[6] * x + h[7] * y + h[8];
    return {(h[0] * x + h[1] * y + h[2]) / w, (h[3] * x + h[4] * y + h[5]) / w};
}

Homography homography_from_points(const std::array<std::array<double, 2>, 4>& src,
                                  const std::array<std::array<double, 2>, 4>& dst) {
    Eigen::Matrix<double, 8, 8> a;
    Eigen::Matrix<double, 8, 1> b;
    for (int i = 0; i < 4; ++i) {
        const double x = src[std::size_t(i)][0], y = src[std::size_t(i)][1];
        const double u = dst[std::size_t(i)][0], v = dst[std::size_t(i)][1];
        a.row(2 * i) << x, y, 1, 0, 0, 0, -u * x, -u * y;
        a.row(2 * i + 1) << 0, 0, 0, x, y, 1, -v * x, -v * y;
        b(2 * i) = u;
        b(2 * i + 1) = v;
    }
    Eigen::FullPivLU<Eigen::Matrix<double, 8, 8>> lu(a);
    if (!lu.isInvertible()) fail(ErrorCode::DegenerateHomography, "collinear control points");
    const Eigen::Matrix<double, 8, 1> h = lu.solve(b);
    return {h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), 1.0};
}

CorrespondenceField field_from_homography(const Homography& h, int w, int height, int ref_w, int ref_h) {
    CorrespondenceField f(w, height, ref_w, ref_h);
    for (int v = 0; v < height; ++v)
        for (int u = 0; u < w; ++u) {
            const auto p = apply(h, u, v);
            f.set_map(u, v, float(p[0]), float(p[1]));
        }
    std::fill(f.certainty.begin(), f.certainty.end(), 1.0f);
    return f;
}

void SceneSpec::validate() const {
    require(canvas >= 16, ErrorCode::InvalidArgument, "canvas too small");
    require(corner_perturbation >= 0.0, ErrorCode::InvalidArgument, "corner_perturbation must be >= 0");
    require(corner_perturbation < canvas / 4.0, ErrorCode::DegenerateHomography,
            "corner perturbation must stay below canvas / 4");
    require(photometric >= 0.0 && photometric < 0.5, ErrorCode::InvalidArgument, "photometric");
    degradation.validate();
}

namespace {

// Smooth procedural scene; every component is C2 so point sampling at any
// sub-pixel position is well defined.
class SceneTexture {
public:
    SceneTexture(std::uint64_t seed, int canvas) : seed_(seed), size_(canvas) {
        RngState rng(seed, 1);
        for (double& c : base_) c = rng.uniform(0.3, 0.7);
        for (auto& g : grad_) g = {rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2)};

        const int blobs = 6 + int(rng.below(5));
        for (int i = 0; i < blobs; ++i) {
            Blob b;
            b.cx = rng.uniform(0, canvas);
            b.cy = rng.uniform(0, canvas);
            b.r = rng.uniform(0.06, 0.2) * canvas;
            for (double& c : b.color) c = rng.uniform(-0.25, 0.25);
            blobs_.push_back(b);
        }
        const int patches = 4 + int(rng.below(3));
        for (int i = 0; i < patches; ++i) {
            Stripes s;
            s.cx = rng.uniform(0, canvas);
            s.cy = rng.uniform(0, canvas);
            s.r = rng.uniform(0.12, 0.3) * canvas;
            const double angle = rng.uniform(0, std::numbers::pi);
            const double period = rng.uniform(9.0, 16.0);
            s.kx = 2 * std::numbers::pi * std::cos(angle) / period;
            s.ky = 2 * std::numbers::pi * std::sin(angle) / period;
            s.phase = rng.uniform(0, 2 * std::numbers::pi);
            s.amp = rng.uniform(0.04, 0.08);
            for (double& c : s.tint) c = rng.uniform(0.6, 1.0);
            stripes_.push_back(s);
        }
        for (double& c : noise_tint_) c = rng.uniform(0.7, 1.0);
    }

    std::array<double, 3> color(double x, double y) const {
        std::array<double, 3> out{};
        const double nx = x / size_ - 0.5, ny = y / size_ - 0.5;
        for (int c = 0; c < 3; ++c) out[std::size_t(c)] = base_[std::size_t(c)] + grad_[std::size_t(c)][0] * nx +
                                                           grad_[std::size_t(c)][1] * ny;
        for (const Blob& b : blobs_) {
            const double d2 = (x - b.cx) * (x - b.cx) + (y - b.cy) * (y - b.cy);
            const double w = std::exp(-0.5 * d2 / (b.r * b.r));
            for (int c = 0; c < 3; ++c) out[std::size_t(c)] += w * b.color[std::size_t(c)];
        }
        for (const Stripes& s : stripes_) {
            const double d2 = (x - s.cx) * (x - s.cx) + (y - s.cy) * (y - s.cy);
            const double w = std::exp(-0.5 * d2 / (s.r * s.r)) * s.amp * std::sin(s.kx * x + s.ky * y + s.phase);
            for (int c = 0; c < 3; ++c) out[std::size_t(c)] += w * s.tint[std::size_t(c)];
        }
        const double detail = 0.09 * value_noise(x, y, 9.0, 11) + 0.07 * value_noise(x, y, 17.0, 12);
        for (int c = 0; c < 3; ++c) {
            const double v = out[std::size_t(c)] + detail * noise_tint_[std::size_t(c)];
            // Smooth squash into (0.08, 0.92), leaving headroom for the
            // photometric shift of the second view.
            out[std::size_t(c)] = 0.5 + 0.42 * std::tanh((v - 0.5) / 0.42);
        }
        return out;
    }

private:
    struct Blob {
        double cx, cy, r;
        std::array<double, 3> color;
    };
    struct Stripes {
        double cx, cy, r, kx, ky, phase, amp;
        std::array<double, 3> tint;
    };

    // Lattice value noise in [-1, 1] with quintic (C2) interpolation.
    double value_noise(double x, double y, double spacing, std::uint64_t layer) const {
        const double gx = x / spacing, gy = y / spacing;
        const double fx = std::floor(gx), fy = std::floor(gy);
        const double tx = gx - fx, ty = gy - fy;
        auto fade = [](double t) { return t * t * t * (t * (t * 6 - 15) + 10); };
        auto lattice = [&](long long ix, long long iy) {
            const std::uint64_t h = RngState::mix(seed_ ^ RngState::mix(layer * 0x9E3779B97F4A7C15ull +
                                                                         std::uint64_t(ix) * 0xC2B2AE3D27D4EB4Full +
                                                                         std::uint64_t(iy)));
            return double(h >> 11) * 0x1.0p-53 * 2.0 - 1.0;
        };
        const long long ix = (long long)fx, iy = (long long)fy;
        const double sx = fade(tx), sy = fade(ty);
        const double top = lattice(ix, iy) + sx * (lattice(ix + 1, iy) - lattice(ix, iy));
        const double bot = lattice(ix, iy + 1) + sx * (lattice(ix + 1, iy + 1) - lattice(ix, iy + 1));
        return top + sy * (bot - top);
    }

    std::uint64_t seed_;
    double size_;
    std::array<double, 3> base_{};
    std::array<std::array<double, 2>, 3> grad_{};
    std::vector<Blob> blobs_;
    std::vector<Stripes> stripes_;
    std::array<double, 3> noise_tint_{};
};

}  // namespace

double high_frequency_fraction(const Image& img, double cutoff) {
    const Image y = to_luma(img);
    const int w = y.width, h = y.height;
    double mean = 0.0;
    for (float v : y.data) mean += v;
    mean /= double(y.data.size());
    // Separable DFT: rows then columns.
    std::vector<std::complex<double>> rows(std::size_t(w) * std::size_t(h));
    for (int r = 0; r < h; ++r)
        for (int k = 0; k < w; ++k) {
            std::complex<double> acc = 0.0;
            for (int x = 0; x < w; ++x)
                acc += (double(y.at(x, r)) - mean) * std::polar(1.0, -2.0 * std::numbers::pi * k * x / w);
            rows[std::size_t(r) * std::size_t(w) + std::size_t(k)] = acc;
        }
    double total = 0.0, high = 0.0;
    for (int k = 0; k < w; ++k) {
        const double fx = double(std::min(k, w - k)) / w;
        for (int l = 0; l < h; ++l) {
            std::complex<double> acc = 0.0;
            for (int r = 0; r < h; ++r)
                acc += rows[std::size_t(r) * std::size_t(w) + std::size_t(k)] *
                       std::polar(1.0, -2.0 * std::numbers::pi * l * r / h);
            const double fy = double(std::min(l, h - l)) / h;
            const double e = std::norm(acc);
            total += e;
            if (std::hypot(fx, fy) > cutoff) high += e;
        }
    }
    return total > 0.0 ? high / total : 0.0;
}

PairSample generate_scene(const SceneSpec& spec) {
    spec.validate();
    const int n = spec.canvas;
    const SceneTexture tex(spec.seed, n);
    RngState rng(spec.seed, 2);

    PairSample s;
    const std::array<std::array<double, 2>, 4> corners = {{{0, 0}, {double(n - 1), 0}, {double(n - 1), double(n - 1)},
                                                          {0, double(n - 1)}}};
    auto moved = corners;
    for (auto& p : moved)
        for (double& c : p) c += rng.uniform(-spec.corner_perturbation, spec.corner_perturbation);
    s.truth_homography = homography_from_points(corners, moved);
    (void)invert(s.truth_homography);
    for (int c = 0; c < 3; ++c) {
        s.gain[std::size_t(c)] = 1.0 + rng.uniform(-spec.photometric, spec.photometric);
        s.offset[std::size_t(c)] = rng.uniform(-spec.photometric, spec.photometric) * 0.5;
    }

    s.hr = Image(n, n, 3);
    s.ref_hr = Image(n, n, 3);
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            const auto c = tex.color(x, y);
            const auto p = apply(s.truth_homography, x, y);
            const auto r = tex.color(p[0], p[1]);
            for (int ch = 0; ch < 3; ++ch) {
                s.hr.at(x, y, ch) = float(c[std::size_t(ch)]);
                s.ref_hr.at(x, y, ch) = std::clamp(
                    float(0.5 + s.gain[std::size_t(ch)] * (r[std::size_t(ch)] - 0.5) + s.offset[std::size_t(ch)]),
                    0.0f, 1.0f);
            }
        }
    const double cutoff = 0.5 / spec.degradation.down_scale / 4.0;
    if (high_frequency_fraction(s.hr, cutoff) < spec.detail_floor)
        fail(ErrorCode::InvalidArgument, "scene " + std::to_string(spec.seed) + " lacks high-frequency detail");
    s.lr = degrade_pipeline(s.hr, spec.degradation);
    return s;
}

std::string split_for_id(int id) {
    const std::uint64_t h = RngState::mix(0x5EEDull ^ std::uint64_t(id)) % 10;
    return h < 8 ? "train" : h == 8 ? "val" : "test";
}

namespace {

std::uint64_t derive_seed(std::uint64_t base, int id, std::uint64_t salt) {
    return RngState::mix(RngState::mix(base) ^ (std::uint64_t(id) * 0x9E3779B97F4A7C15ull + salt)) >> 1;
}

std::string id_name(int id) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%06d", id);
    return buf;
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

SceneSpec spec_for(const ManifestRow& row, const DatasetOptions& opts) {
    SceneSpec spec;
    spec.seed = row.scene_seed;
    spec.canvas = opts.canvas;
    spec.corner_perturbation = opts.corner_perturbation;
    spec.photometric = opts.photometric;
    spec.degradation = opts.degradation;
    spec.degradation.seed = row.degrade_seed;
    return spec;
}

}  // namespace

PairSample regenerate(const ManifestRow& row, const DatasetOptions& opts) {
    PairSample s = generate_scene(spec_for(row, opts));
    s.id = row.id;
    return s;
}

Manifest build_dataset(int n, std::uint64_t base_seed, const std::filesystem::path& out_dir,
                       const DatasetOptions& opts) {
    require(n >= 1, ErrorCode::InvalidArgument, "n must be >= 1");
    std::error_code ec;
    for (const char* sub : {"hr", "ref", "lr"}) {
        std::filesystem::create_directories(out_dir / sub, ec);
        if (ec) fail(ErrorCode::Unwritable, (out_dir / sub).string() + ": " + ec.message());
    }
    Manifest m;
    m.root = out_dir;
    for (int id = 0; id < n; ++id) {
        ManifestRow row;
        row.id = id;
        row.split = split_for_id(id);
        row.scene_seed = derive_seed(base_seed, id, 1);
        row.degrade_seed = derive_seed(base_seed, id, 2);
        const PairSample s = regenerate(row, opts);
        row.homography = s.truth_homography;
        row.hr_path = "hr/" + id_name(id) + ".png";
        row.ref_path = "ref/" + id_name(id) + ".png";
        row.lr_path = "lr/" + id_name(id) + ".png";
        save_image(s.hr, out_dir / row.hr_path);
        save_image(s.ref_hr, out_dir / row.ref_path);
        save_image(s.lr, out_dir / row.lr_path);
        m.rows.push_back(row);
    }
    KeyValueConfig cfg;
    cfg.set("n", n);
    cfg.set("base_seed", static_cast<long long>(base_seed));
    cfg.set("canvas", opts.canvas);
    cfg.set("corner_perturbation", opts.corner_perturbation);
    cfg.set("photometric", opts.photometric);
    cfg.merge(opts.degradation.to_kv(), "degrade");
    cfg.save(out_dir / "dataset.cfg");
    m.save(out_dir / "manifest.csv");
    return m;
}

void Manifest::save(const std::filesystem::path& csv) const {
    std::ofstream out(csv);
    if (!out) fail(ErrorCode::Unwritable, csv.string());
    out << "id,split,scene_seed,degrade_seed";
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) out << ",h" << i << j;
    out << ",hr_path,ref_path,lr_path\n";
    for (const ManifestRow& r : rows) {
        out << r.id << ',' << r.split << ',' << r.scene_seed << ',' << r.degrade_seed;
        for (double v : r.homography) out << ',' << format_double(v);
        out << ',' << r.hr_path << ',' << r.ref_path << ',' << r.lr_path << '\n';
    }
    if (!out) fail(ErrorCode::Unwritable, csv.string());
}

Manifest Manifest::load(const std::filesystem::path& csv) {
    std::ifstream in(csv);
    if (!in) fail(ErrorCode::NotFound, csv.string());
    Manifest m;
    m.root = csv.parent_path();
    std::string line;
    if (!std::getline(in, line)) fail(ErrorCode::Truncated, "empty manifest");
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto cells = split_csv(line);
        if (cells.size() != 16) fail(ErrorCode::CorruptFile, "manifest line " + std::to_string(lineno));
        KeyValueConfig kv;
        for (std::size_t i = 0; i < 16; ++i) kv.set("c" + std::to_string(i), cells[i]);
        ManifestRow r;
        r.id = int(kv.get_int("c0", 0));
        r.split = cells[1];
        r.scene_seed = std::stoull(cells[2]);
        r.degrade_seed = std::stoull(cells[3]);
        for (std::size_t i = 0; i < 9; ++i) r.homography[i] = kv.get_double("c" + std::to_string(4 + i), 0.0);
        r.hr_path = cells[13];
        r.ref_path = cells[14];
        r.lr_path = cells[15];
        m.rows.push_back(r);
    }
    return m;
}

std::vector<ManifestRow> Manifest::split(const std::string& name) const {
    if (name == "all") return rows;
    std::vector<ManifestRow> out;
    std::copy_if(rows.begin(), rows.end(), std::back_inserter(out),
                 [&](const ManifestRow& r) { return r.split == name; });
    return out;
}

}  // namespace refsr

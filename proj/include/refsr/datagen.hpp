#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "refsr/degrade.hpp"
#include "refsr/field.hpp"
#include "refsr/image.hpp"

namespace refsr {

// Row-major 3x3 projective transform.
using Homography = std::array<double, 9>;

Homography identity_homography() noexcept;
Homography invert(const Homography& h);
std::array<double, 2> apply(const Homography& h, double x, double y) noexcept;
// Homography taking the four `src` points onto `dst` (DLT, h22 = 1).
Homography homography_from_points(const std::array<std::array<double, 2>, 4>& src,
                                  const std::array<std::array<double, 2>, 4>& dst);
// mapping(u, v) = h(u, v) over a w x h grid, certainty 1.
CorrespondenceField field_from_homography(const Homography& h, int w, int height, int ref_w, int ref_h);

struct SceneSpec {
    std::uint64_t seed = 0;
    int canvas = 128;
    double corner_perturbation = 8.0;  // pixels, each corner independently
    double photometric = 0.08;         // per-channel gain 1 +- p about mid-grey, offset +- p / 2
    double detail_floor = 0.05;        // min spectral energy share above LR Nyquist / 4
    DegradationConfig degradation{};

    void validate() const;
};

struct PairSample {
    Image hr;
    Image ref_hr;
    Image lr;
    // Maps reference coordinates to HR coordinates: ref_hr(x) shows hr(H x)
    // up to the photometric shift ref = 0.5 + gain (v - 0.5) + offset.
    Homography truth_homography{};
    std::array<double, 3> gain{1.0, 1.0, 1.0};
    std::array<double, 3> offset{0.0, 0.0, 0.0};
    int id = 0;
};

// Renders the scene, its second view and the degraded LR input. Throws
// DegenerateHomography when the sampled view transform is not invertible.
PairSample generate_scene(const SceneSpec& spec);

// Share of (non-DC) luma spectral energy at spatial frequencies above
// `cutoff` cycles per pixel.
double high_frequency_fraction(const Image& img, double cutoff);

struct ManifestRow {
    int id = 0;
    std::string split;
    std::uint64_t scene_seed = 0;
    std::uint64_t degrade_seed = 0;
    Homography homography{};
    std::string hr_path;
    std::string ref_path;
    std::string lr_path;
};

struct Manifest {
    std::filesystem::path root;  // directory the row paths are relative to
    std::vector<ManifestRow> rows;

    static Manifest load(const std::filesystem::path& csv);
    void save(const std::filesystem::path& csv) const;
    // "all" selects every row.
    std::vector<ManifestRow> split(const std::string& name) const;
};

// 80/10/10 train/val/test assignment from a hash of the id.
std::string split_for_id(int id);

struct DatasetOptions {
    int canvas = 128;
    double corner_perturbation = 8.0;
    double photometric = 0.08;
    DegradationConfig degradation{};
};

// Writes hr/, ref/, lr/ PNG triplets, manifest.csv and dataset.cfg under
// out_dir. Per-sample seeds derive from base_seed and the id.
Manifest build_dataset(int n, std::uint64_t base_seed, const std::filesystem::path& out_dir,
                       const DatasetOptions& opts = {});

// Regenerates the sample described by one manifest row.
PairSample regenerate(const ManifestRow& row, const DatasetOptions& opts);

}  // namespace refsr

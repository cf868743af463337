#include "test_util.hpp"

#include <map>

#include "refsr/datagen.hpp"

using namespace refsr;
namespace fs = std::filesystem;

namespace {

std::map<std::string, std::string> tree_bytes(const fs::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = testutil::read_file(e.path());
    return out;
}

}  // namespace

TEST_CASE("identity view transform reproduces the HR view") {
    SceneSpec spec;
    spec.seed = 3;
    spec.corner_perturbation = 0.0;
    spec.photometric = 0.0;
    const PairSample s = generate_scene(spec);
    CHECK(testutil::max_abs_diff(s.ref_hr, s.hr) <= 1e-6);
    CHECK(s.lr.width == spec.canvas / 4);
}

TEST_CASE("scene generation is deterministic") {
    SceneSpec spec;
    spec.seed = 12;
    const PairSample a = generate_scene(spec), b = generate_scene(spec);
    CHECK(a.hr.data == b.hr.data);
    CHECK(a.ref_hr.data == b.ref_hr.data);
    CHECK(a.lr.data == b.lr.data);
    CHECK(a.truth_homography == b.truth_homography);
    spec.seed = 13;
    CHECK(generate_scene(spec).hr.data != a.hr.data);
}

TEST_CASE("the inverse homography warps the reference back onto the HR view") {
    for (std::uint64_t seed : {0, 5, 9, 21, 40}) {
        SceneSpec spec;
        spec.seed = seed;
        const PairSample s = generate_scene(spec);
        // Undo the photometric shift, then resample at H^-1.
        Image ref = s.ref_hr;
        for (int y = 0; y < ref.height; ++y)
            for (int x = 0; x < ref.width; ++x)
                for (int c = 0; c < 3; ++c)
                    ref.at(x, y, c) = float((ref.at(x, y, c) - 0.5 - s.offset[std::size_t(c)]) / s.gain[std::size_t(c)] + 0.5);
        const Image back = warp_bilinear(ref, field_from_homography(invert(s.truth_homography), spec.canvas,
                                                                    spec.canvas, spec.canvas, spec.canvas));
        const int m = spec.canvas / 8;
        double worst = 0;
        for (int y = m; y < spec.canvas - m; ++y)
            for (int x = m; x < spec.canvas - m; ++x)
                for (int c = 0; c < 3; ++c) worst = std::max(worst, double(std::abs(back.at(x, y, c) - s.hr.at(x, y, c))));
        CAPTURE(seed);
        CHECK(worst <= 2.0 / 255.0);
    }
}

TEST_CASE("scenes carry detail above a quarter of the LR Nyquist rate") {
    SceneSpec spec;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        spec.seed = seed;
        CHECK(high_frequency_fraction(generate_scene(spec).hr, 0.5 / 4 / 4) >= spec.detail_floor);
    }
    CHECK(high_frequency_fraction(Image(32, 32, 3, 0.4f), 0.1) == 0.0);
}

TEST_CASE("homography helpers") {
    const std::array<std::array<double, 2>, 4> src{{{0, 0}, {10, 0}, {10, 10}, {0, 10}}};
    const std::array<std::array<double, 2>, 4> dst{{{1, 2}, {12, 1}, {11, 13}, {-1, 9}}};
    const Homography h = homography_from_points(src, dst);
    for (int i = 0; i < 4; ++i) {
        const auto p = apply(h, src[std::size_t(i)][0], src[std::size_t(i)][1]);
        CHECK(p[0] == doctest::Approx(dst[std::size_t(i)][0]).epsilon(1e-9));
        CHECK(p[1] == doctest::Approx(dst[std::size_t(i)][1]).epsilon(1e-9));
    }
    const Homography inv = invert(h);
    const auto q = apply(inv, apply(h, 3.5, 7.25)[0], apply(h, 3.5, 7.25)[1]);
    CHECK(q[0] == doctest::Approx(3.5).epsilon(1e-9));
    CHECK(q[1] == doctest::Approx(7.25).epsilon(1e-9));
    CHECK_ERROR_CODE(invert(Homography{1, 2, 3, 2, 4, 6, 0, 0, 1}), ErrorCode::DegenerateHomography);
}

TEST_CASE("build_dataset writes a reproducible tree") {
    testutil::TempDir a("dsa"), b("dsb");
    const Manifest m = build_dataset(10, 7, a.path());
    REQUIRE(m.rows.size() == 10);
    int files = 0;
    for (const char* sub : {"hr", "ref", "lr"})
        for (const auto& e : fs::directory_iterator(a / sub)) files += e.path().extension() == ".png";
    CHECK(files == 30);

    const Manifest loaded = Manifest::load(a / "manifest.csv");
    REQUIRE(loaded.rows.size() == 10);
    for (std::size_t i = 0; i < 10; ++i) {
        CHECK(loaded.rows[i].id == m.rows[i].id);
        CHECK(loaded.rows[i].split == split_for_id(m.rows[i].id));
        CHECK(loaded.rows[i].scene_seed == m.rows[i].scene_seed);
        for (int k = 0; k < 9; ++k)
            CHECK(loaded.rows[i].homography[std::size_t(k)] ==
                  doctest::Approx(m.rows[i].homography[std::size_t(k)]).epsilon(1e-12));
    }
    const std::string header = testutil::read_file(a / "manifest.csv").substr(0, 80);
    CHECK(header.rfind("id,split,scene_seed,degrade_seed,h00,h01,h02", 0) == 0);

    // Every row regenerates to the stored images (8-bit PNG round trip).
    const PairSample s = regenerate(loaded.rows[3], DatasetOptions{});
    CHECK(testutil::max_abs_diff(load_image(loaded.root / loaded.rows[3].hr_path), s.hr) <= 0.5 / 255.0 + 1e-6);
    CHECK(testutil::max_abs_diff(load_image(loaded.root / loaded.rows[3].lr_path), s.lr) <= 0.5 / 255.0 + 1e-6);

    build_dataset(10, 7, b.path());
    CHECK(tree_bytes(a.path()) == tree_bytes(b.path()));

    CHECK_ERROR_CODE(build_dataset(0, 7, b / "x"), ErrorCode::InvalidArgument);
    CHECK_ERROR_CODE(build_dataset(1, 7, "/proc/refsr_nope"), ErrorCode::Unwritable);
}

TEST_CASE("id-hash split proportions") {
    std::map<std::string, int> count;
    for (int id = 0; id < 1000; ++id) ++count[split_for_id(id)];
    CHECK(count.size() == 3);
    CHECK(std::abs(count["train"] / 1000.0 - 0.8) <= 0.03);
    CHECK(std::abs(count["val"] / 1000.0 - 0.1) <= 0.03);
    CHECK(std::abs(count["test"] / 1000.0 - 0.1) <= 0.03);
}

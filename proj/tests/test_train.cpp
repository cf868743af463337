#include "test_util.hpp"

#include "refsr/train.hpp"

using namespace refsr;
using namespace refsr::train;

namespace {

using Md = flow::Matrix<double>;

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.image_size = 8;
    cfg.patch = 4;
    cfg.dim = 48;
    cfg.heads = 4;
    cfg.layers = 2;
    cfg.ref_layers = 2;
    cfg.sample_steps = 2;
    return cfg;
}

ModelConfig mini_config() {
    ModelConfig cfg;
    cfg.image_size = 8;
    cfg.patch = 4;
    cfg.channels = 3;
    cfg.dim = 8;
    cfg.heads = 2;
    cfg.layers = 2;
    cfg.ref_layers = 2;
    cfg.ff_mult = 2;
    return cfg;
}

std::vector<Triplet> tiny_data(int n, int size) {
    std::vector<Triplet> out;
    for (int i = 0; i < n; ++i) {
        Triplet t;
        t.hr = testutil::texture(size, size, 100 + std::uint64_t(i));
        t.lr_up = resize_bicubic(resize_bicubic(t.hr, size / 4, size / 4), size, size);
        t.ref = testutil::texture(size, size, 200 + std::uint64_t(i));
        out.push_back(std::move(t));
    }
    return out;
}

TrainConfig quick(int stage, int steps) {
    TrainConfig cfg;
    cfg.stage = stage;
    cfg.steps = steps;
    cfg.batch = 3;
    cfg.learning_rate = 1e-3;
    cfg.warmup_steps = 2;
    cfg.seed = 4;
    return cfg;
}

}  // namespace

TEST_CASE("velocity loss of the perfect and the zero stub") {
    const Md z = flow::gaussian_latent<double>(6, 5, 1, 1), eps = flow::gaussian_latent<double>(6, 5, 1, 2);
    CHECK(velocity_loss<double>(eps - z, z, eps) == 0.0);

    double expect = 0;
    for (Eigen::Index i = 0; i < z.size(); ++i) {
        const double d = eps.data()[i] - z.data()[i];
        expect += d * d;
    }
    expect /= double(z.size());
    Md dv;
    CHECK(velocity_loss<double>(Md::Zero(6, 5), z, eps, &dv) == doctest::Approx(expect).epsilon(1e-12));
    CHECK((dv - 2.0 * (z - eps) / double(z.size())).cwiseAbs().maxCoeff() <= 1e-15);
}

TEST_CASE("flow loss with a zero-output SR branch is the target energy") {
    const ModelConfig cfg = tiny_config();
    ModelState<double> m;
    m.config = cfg;
    m.sr = flow::init_branch<double>(cfg, flow::BranchKind::sr, cfg.layers, 1, true);
    m.lr = flow::init_branch<double>(cfg, flow::BranchKind::lr, cfg.layers, 2, false);
    m.ref = flow::init_branch<double>(cfg, flow::BranchKind::ref, cfg.layers, 3, false);
    FlowSample<double> s;
    s.grid_w = s.grid_h = 2;
    s.z_hr = flow::gaussian_latent<double>(4, cfg.dim, 9, 1);
    s.z_lr = flow::gaussian_latent<double>(4, cfg.dim, 9, 2);
    s.z_ref = flow::gaussian_latent<double>(4, cfg.dim, 9, 3);
    s.eps = flow::gaussian_latent<double>(4, cfg.dim, 9, 4);
    double expect = 0;
    for (Eigen::Index i = 0; i < s.eps.size(); ++i) expect += std::pow(s.eps.data()[i] - s.z_hr.data()[i], 2);
    expect /= double(s.eps.size());
    for (double t : {0.0, 0.3, 1.0}) {
        s.t = t;
        for (int stage : {0, 1, 2}) CHECK(flow_loss<double>(s, m, stage, nullptr) == doctest::Approx(expect).epsilon(1e-6));
    }
}

TEST_CASE("frozen branches receive exactly zero gradient") {
    const ModelConfig cfg = tiny_config();
    ModelState<double> m;
    m.config = cfg;
    m.sr = flow::init_branch<double>(cfg, flow::BranchKind::sr, cfg.layers, 1, false);
    m.lr = flow::init_branch<double>(cfg, flow::BranchKind::lr, cfg.layers, 2, false);
    m.ref = flow::init_branch<double>(cfg, flow::BranchKind::ref, cfg.layers, 3, false);
    FlowSample<double> s{2, 2, flow::gaussian_latent<double>(4, cfg.dim, 5, 1),
                         flow::gaussian_latent<double>(4, cfg.dim, 5, 2), flow::gaussian_latent<double>(4, cfg.dim, 5, 3),
                         flow::gaussian_latent<double>(4, cfg.dim, 5, 4), 0.6};
    auto max_abs = [](const BranchWeights<double>& w) {
        double v = 0;
        w.for_each([&](const std::string&, const Md& x) { v = std::max(v, x.cwiseAbs().maxCoeff()); });
        return v;
    };
    for (int stage : {0, 1, 2}) {
        GradSet<double> g = GradSet<double>::zeros_like(m);
        flow_loss<double>(s, m, stage, &g);
        for (int k = 0; k < 3; ++k) {
            if (k == stage)
                CHECK(max_abs(g.trainable(k)) > 0.0);
            else
                CHECK(max_abs(g.trainable(k)) == 0.0);
        }
    }
}

TEST_CASE("gradient check on miniature configs") {
    const ModelConfig cfg = mini_config();
    for (int stage : {0, 1, 2})
        for (std::uint64_t seed : {1, 2, 3}) {
            const GradCheckResult r = grad_check(cfg, stage, seed);
            CAPTURE(stage);
            CAPTURE(seed);
            CHECK(r.compared > 0);
            CHECK(r.max_rel_error < 1e-3);
            CHECK(r.frozen_grad_max == 0.0);
        }
    for (int stage : {0, 1, 2}) {
        const GradCheckResult z = grad_check(cfg, stage, 7, 2, 2, true);
        CHECK(z.max_abs_analytic < 1e-8);
        CHECK(z.max_abs_numeric < 1e-8);
    }
}

TEST_CASE("augment: identity flags, flip involution, identity homography") {
    Triplet t{testutil::random_image(12, 10, 3, 1), testutil::random_image(12, 10, 3, 2),
              testutil::random_image(12, 10, 3, 3)};
    const AugmentFlags off{false, false, false, false};
    for (std::uint64_t s = 0; s < 5; ++s) {
        const Triplet o = augment(t, off, 8, RngState(s, 1));
        CHECK(o.hr.data == t.hr.data);
        CHECK(o.lr_up.data == t.lr_up.data);
        CHECK(o.ref.data == t.ref.data);
    }

    const AugmentFlags flip_only{true, false, false, false};
    int flipped = 0;
    for (std::uint64_t s = 0; s < 8; ++s) {
        const Triplet once = augment(t, flip_only, 0, RngState(s, 1));
        flipped += once.hr.data != t.hr.data;
        const Triplet twice = augment(once, flip_only, 0, RngState(s, 1));
        CHECK(twice.hr.data == t.hr.data);
        CHECK(twice.ref.data == t.ref.data);
        // Flip is joint.
        CHECK((once.hr.data != t.hr.data) == (once.ref.data != t.ref.data));
    }
    CHECK(flipped > 0);

    CHECK(testutil::max_abs_diff(warp_homography(t.ref, identity_homography()), t.ref) <= 1e-6);
    CHECK(color_jitter(t.ref, {1, 1, 1}, {0, 0, 0}).data == t.ref.data);

    // Crop is joint; jitter and homography touch the reference only.
    const AugmentFlags all{};
    const Triplet a = augment(t, all, 8, RngState(3, 1), 1.0);
    CHECK(a.hr.width == 8);
    CHECK(a.ref.height == 8);
    bool found = false;
    for (int y = 0; y + 8 <= 10 && !found; ++y)
        for (int x = 0; x + 8 <= 12 && !found; ++x)
            for (bool f : {false, true}) {
                Image hr = crop(t.hr, {x, y, 8, 8}), lr = crop(t.lr_up, {x, y, 8, 8});
                if (f) hr = flip_horizontal(hr), lr = flip_horizontal(lr);
                if (hr.data == a.hr.data && lr.data == a.lr_up.data) found = true;
            }
    CHECK(found);
    CHECK_ERROR_CODE(augment(t, all, 11, RngState(1, 1)), ErrorCode::InvalidArgument);
}

TEST_CASE("train config validation") {
    TrainConfig cfg;
    cfg.validate();
    cfg.grad_clip = 0.0;
    CHECK_ERROR_CODE(cfg.validate(), ErrorCode::InvalidArgument);
    cfg = {};
    cfg.steps = 0;
    CHECK_ERROR_CODE(cfg.validate(), ErrorCode::InvalidArgument);
    cfg = {};
    cfg.learning_rate = 0.0;
    CHECK_ERROR_CODE(cfg.validate(), ErrorCode::InvalidArgument);

    cfg = {};
    cfg.learning_rate = 2e-4;
    cfg.warmup_steps = 4;
    CHECK(scheduled_lr(cfg, 0) == doctest::Approx(0.5e-4));
    CHECK(scheduled_lr(cfg, 3) == doctest::Approx(2e-4));
    CHECK(scheduled_lr(cfg, 50) == doctest::Approx(2e-4));
}

TEST_CASE("AdamW first step moves each weight by lr against the gradient sign") {
    const ModelConfig cfg = mini_config();
    BranchWeights<float> p = flow::init_branch<float>(cfg, flow::BranchKind::sr, 1, 3, false);
    BranchWeights<float> g = p.zeros_like();
    RngState rng(2, 2);
    g.for_each([&](const std::string&, flow::Matrix<float>& m) {
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = float(rng.normal());
    });
    const BranchWeights<float> before = p;
    AdamW opt(p);
    opt.step(p, g, 0.01);
    std::vector<const flow::Matrix<float>*> pb, pa, gg;
    before.for_each([&](const std::string&, const flow::Matrix<float>& m) { pb.push_back(&m); });
    p.for_each([&](const std::string&, const flow::Matrix<float>& m) { pa.push_back(&m); });
    g.for_each([&](const std::string&, const flow::Matrix<float>& m) { gg.push_back(&m); });
    for (std::size_t k = 0; k < pa.size(); ++k)
        for (Eigen::Index i = 0; i < pa[k]->size(); ++i) {
            // Bias-corrected first step: m_hat / sqrt(v_hat) = sign(g) up to eps.
            const double gi = gg[k]->data()[i];
            const double expect = pb[k]->data()[i] - 0.01 * gi / (std::abs(gi) + 1e-8);
            CHECK(pa[k]->data()[i] == doctest::Approx(expect).epsilon(1e-5));
        }
    CHECK(opt.steps() == 1);
}

TEST_CASE("run_stage: prerequisites, determinism, thread independence, frozen checkpoints") {
    testutil::TempDir dir("stage");
    const ModelConfig mc = tiny_config();
    const std::vector<Triplet> data = tiny_data(3, 16);

    CHECK_ERROR_CODE(run_stage(data, quick(1, 2), mc, dir / "empty", {}), ErrorCode::MissingCheckpoint);
    CHECK_ERROR_CODE(run_stage({}, quick(0, 2), mc, dir / "a", {}), ErrorCode::EmptySplit);

    const StageResult a = run_stage(data, quick(0, 6), mc, dir / "a", dir / "a.csv");
    const StageResult b = run_stage(data, quick(0, 6), mc, dir / "b", dir / "b.csv");
    TrainConfig threaded = quick(0, 6);
    threaded.threads = 3;
    const StageResult c = run_stage(data, threaded, mc, dir / "c", {});
    REQUIRE(a.trace.size() == 6);
    for (std::size_t i = 0; i < a.trace.size(); ++i) {
        CHECK(std::abs(a.trace[i].loss - b.trace[i].loss) <= 1e-6);
        CHECK(a.trace[i].loss == c.trace[i].loss);
    }
    CHECK(testutil::read_file(dir / "a.csv") == testutil::read_file(dir / "b.csv"));
    CHECK(testutil::read_file(dir / "a" / "sr.ckpt") == testutil::read_file(dir / "c" / "sr.ckpt"));

    CHECK_ERROR_CODE(run_stage(data, quick(2, 2), mc, dir / "a", {}), ErrorCode::MissingCheckpoint);
    run_stage(data, quick(1, 4), mc, dir / "a", {});
    const std::string sr_bytes = testutil::read_file(dir / "a" / "sr.ckpt");
    const std::string lr_bytes = testutil::read_file(dir / "a" / "lr.ckpt");
    const StageResult s2 = run_stage(data, quick(2, 4), mc, dir / "a", {});
    CHECK(s2.frozen_grad_max == 0.0);
    CHECK(testutil::read_file(dir / "a" / "sr.ckpt") == sr_bytes);
    CHECK(testutil::read_file(dir / "a" / "lr.ckpt") == lr_bytes);
    const flow::ModelWeights m = load_model(dir / "a");
    CHECK(m.ref.has_value());
    CHECK(m.ref->depth() == mc.ref_layers);
}

TEST_CASE("conditioning branches start from the SR weights unless disabled") {
    testutil::TempDir dir("init");
    const ModelConfig mc = tiny_config();
    const std::vector<Triplet> data = tiny_data(2, 16);
    run_stage(data, quick(0, 3), mc, dir.path(), {});
    const flow::BranchWeights<float> sr = flow::load_checkpoint(dir / "sr.ckpt");

    // A vanishing step size leaves the trained branch at its initial value.
    TrainConfig still = quick(1, 1);
    still.learning_rate = 1e-12;
    run_stage(data, still, mc, dir.path(), {});
    still.stage = 2;
    run_stage(data, still, mc, dir.path(), {});
    const flow::ModelWeights m = load_model(dir.path());
    CHECK(m.lr.kind == flow::BranchKind::lr);
    CHECK((m.lr.embed_w - sr.embed_w).cwiseAbs().maxCoeff() <= 1e-6f);
    CHECK((m.lr.layers.back().wk - sr.layers.back().wk).cwiseAbs().maxCoeff() <= 1e-6f);
    REQUIRE(m.ref.has_value());
    CHECK(m.ref->depth() == mc.ref_layers);
    CHECK((m.ref->layers.front().wv - sr.layers.front().wv).cwiseAbs().maxCoeff() <= 1e-6f);

    still.stage = 1;
    still.init_from_sr = false;
    run_stage(data, still, mc, dir.path(), {});
    CHECK((flow::load_checkpoint(dir / "lr.ckpt").embed_w - sr.embed_w).cwiseAbs().maxCoeff() > 1e-3f);
}

TEST_CASE("loss csv layout") {
    testutil::TempDir dir("csv");
    save_loss_csv({{0, 2, 0.5, 1.25, 1e-4}, {1, 2, 0.25, 0.5, 2e-4}}, dir / "l.csv", "seed=1\n");
    CHECK(testutil::read_file(dir / "l.csv") ==
          "# seed=1\nstep,stage,loss,grad_norm,lr\n0,2,0.5,1.25,0.0001\n1,2,0.25,0.5,0.0002\n");
}

#include "refsr/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <exception>
#include <thread>

#include "refsr/error.hpp"

namespace refsr::train {

using flow::BranchKind;

// ---------------------------------------------------------------------------
// configuration

void TrainConfig::validate() const {
    require(stage >= 0 && stage <= 2, ErrorCode::InvalidArgument, "stage must be 0, 1 or 2");
    require(steps >= 1, ErrorCode::InvalidArgument, "steps must be >= 1");
    require(batch >= 1, ErrorCode::InvalidArgument, "batch must be >= 1");
    require(learning_rate > 0.0 && std::isfinite(learning_rate), ErrorCode::InvalidArgument,
            "learning_rate must be > 0");
    require(warmup_steps >= 0, ErrorCode::InvalidArgument, "warmup_steps must be >= 0");
    require(grad_clip > 0.0 && std::isfinite(grad_clip), ErrorCode::InvalidArgument, "grad_clip must be > 0");
    require(homography_px >= 0.0, ErrorCode::InvalidArgument, "homography_px must be >= 0");
    require(threads >= 1, ErrorCode::InvalidArgument, "threads must be >= 1");
}

KeyValueConfig TrainConfig::to_kv() const {
    KeyValueConfig kv;
    kv.set("stage", stage);
    kv.set("steps", steps);
    kv.set("batch", batch);
    kv.set("learning_rate", learning_rate);
    kv.set("warmup_steps", warmup_steps);
    kv.set("grad_clip", grad_clip);
    kv.set("seed", static_cast<long long>(seed));
    kv.set("augment.flip", augment.flip);
    kv.set("augment.crop", augment.crop);
    kv.set("augment.color_jitter", augment.color_jitter);
    kv.set("augment.homography", augment.homography);
    kv.set("homography_px", homography_px);
    kv.set("multi_res", multi_res);
    kv.set("init_from_sr", init_from_sr);
    return kv;
}

TrainConfig TrainConfig::from_kv(const KeyValueConfig& kv) {
    TrainConfig c;
    c.stage = int(kv.get_int("stage", c.stage));
    c.steps = int(kv.get_int("steps", c.steps));
    c.batch = int(kv.get_int("batch", c.batch));
    c.learning_rate = kv.get_double("learning_rate", c.learning_rate);
    c.warmup_steps = int(kv.get_int("warmup_steps", c.warmup_steps));
    c.grad_clip = kv.get_double("grad_clip", c.grad_clip);
    c.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<long long>(c.seed)));
    c.augment.flip = kv.get_bool("augment.flip", c.augment.flip);
    c.augment.crop = kv.get_bool("augment.crop", c.augment.crop);
    c.augment.color_jitter = kv.get_bool("augment.color_jitter", c.augment.color_jitter);
    c.augment.homography = kv.get_bool("augment.homography", c.augment.homography);
    c.homography_px = kv.get_double("homography_px", c.homography_px);
    c.multi_res = kv.get_bool("multi_res", c.multi_res);
    c.init_from_sr = kv.get_bool("init_from_sr", c.init_from_sr);
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// augmentation

Image color_jitter(const Image& img, const std::array<double, 3>& gain, const std::array<double, 3>& offset) {
    Image out = img;
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        const std::size_t c = std::min<std::size_t>(i % std::size_t(img.channels), 2);
        if (gain[c] == 1.0 && offset[c] == 0.0) continue;
        out.data[i] = std::clamp(float(gain[c] * img.data[i] + offset[c]), 0.0f, 1.0f);
    }
    return out;
}

Image warp_homography(const Image& img, const Homography& h) {
    return warp_bilinear(img, field_from_homography(h, img.width, img.height, img.width, img.height));
}

Triplet augment(const Triplet& in, const AugmentFlags& flags, int crop_size, RngState rng, double homography_px) {
    require(in.hr.same_shape(in.lr_up) && in.hr.same_shape(in.ref), ErrorCode::DimensionMismatch,
            "triplet images differ in shape");
    require(crop_size >= 0 && crop_size <= std::min(in.hr.width, in.hr.height), ErrorCode::InvalidArgument,
            "crop larger than the image");
    // Every draw happens regardless of the flags, so toggling one
    // augmentation never shifts the others.
    const int cw = crop_size > 0 ? crop_size : in.hr.width;
    const int ch = crop_size > 0 ? crop_size : in.hr.height;
    const int cx = int(rng.below(std::uint64_t(in.hr.width - cw + 1)));
    const int cy = int(rng.below(std::uint64_t(in.hr.height - ch + 1)));
    const bool flip = rng.uniform() < 0.5;
    std::array<double, 3> gain{}, offset{};
    for (double& g : gain) g = rng.uniform(0.9, 1.1);
    for (double& o : offset) o = rng.uniform(-0.05, 0.05);
    std::array<std::array<double, 2>, 4> jitter{};
    for (auto& p : jitter) {
        p[0] = rng.uniform(-1.0, 1.0) * homography_px;
        p[1] = rng.uniform(-1.0, 1.0) * homography_px;
    }

    Triplet out = in;
    if (flags.crop && crop_size > 0 && (cw != in.hr.width || ch != in.hr.height)) {
        const Rect r{cx, cy, cw, ch};
        out.hr = crop(in.hr, r);
        out.lr_up = crop(in.lr_up, r);
        out.ref = crop(in.ref, r);
    }
    if (flags.flip && flip) {
        out.hr = flip_horizontal(out.hr);
        out.lr_up = flip_horizontal(out.lr_up);
        out.ref = flip_horizontal(out.ref);
    }
    if (flags.color_jitter) out.ref = color_jitter(out.ref, gain, offset);
    if (flags.homography && homography_px > 0.0) {
        const double w = out.ref.width - 1, h = out.ref.height - 1;
        const std::array<std::array<double, 2>, 4> src{{{0, 0}, {w, 0}, {w, h}, {0, h}}};
        std::array<std::array<double, 2>, 4> dst = src;
        for (int i = 0; i < 4; ++i) {
            dst[std::size_t(i)][0] += jitter[std::size_t(i)][0];
            dst[std::size_t(i)][1] += jitter[std::size_t(i)][1];
        }
        out.ref = warp_homography(out.ref, homography_from_points(src, dst));
    }
    return out;
}

// ---------------------------------------------------------------------------
// loss

template <typename T>
GradSet<T> GradSet<T>::zeros_like(const ModelState<T>& m) {
    return {m.sr.zeros_like(), m.lr.zeros_like(), m.ref.zeros_like()};
}

template <typename T>
BranchWeights<T>& GradSet<T>::trainable(int stage) {
    return stage == 0 ? sr : stage == 1 ? lr : ref;
}

template <typename T>
T velocity_loss(const Matrix<T>& velocity, const Matrix<T>& z_hr, const Matrix<T>& eps, Matrix<T>* d_velocity) {
    require(velocity.rows() == z_hr.rows() && velocity.cols() == z_hr.cols() && eps.rows() == z_hr.rows() &&
                eps.cols() == z_hr.cols(),
            ErrorCode::DimensionMismatch, "loss operands differ in shape");
    const Matrix<T> diff = velocity - (eps - z_hr);
    const T n = T(diff.size());
    if (d_velocity) *d_velocity = diff * (T(2) / n);
    return diff.squaredNorm() / n;
}

template <typename T>
T flow_loss(const FlowSample<T>& s, const ModelState<T>& model, int stage, GradSet<T>* grads, T weight) {
    require(stage >= 0 && stage <= 2, ErrorCode::InvalidArgument, "stage must be 0, 1 or 2");
    const ModelConfig& cfg = model.config;
    const T kscale = T(cfg.kscale);
    const Matrix<T> z_t = (T(1) - s.t) * s.z_hr + s.t * s.eps;
    Matrix<T> dv;
    T loss{};
    if (stage == 0) {
        const auto fwd = flow::velocity_forward_taped<T>(z_t, s.grid_w, s.grid_h, s.t, nullptr, nullptr, model.sr,
                                                         cfg, 0, kscale);
        loss = velocity_loss<T>(fwd.velocity, s.z_hr, s.eps, grads ? &dv : nullptr);
        if (grads) flow::velocity_backward<T>(fwd, dv * weight, model.sr, cfg, &grads->sr, nullptr, nullptr);
    } else if (stage == 1) {
        const auto lr_fwd = flow::branch_forward_cache_taped<T>(s.z_lr, s.grid_w, s.grid_h, model.lr, cfg);
        const auto fwd = flow::velocity_forward_taped<T>(z_t, s.grid_w, s.grid_h, s.t, &lr_fwd.cache, nullptr,
                                                         model.sr, cfg, 0, kscale);
        loss = velocity_loss<T>(fwd.velocity, s.z_hr, s.eps, grads ? &dv : nullptr);
        if (grads) {
            flow::CacheGrad<T> lg;
            flow::velocity_backward<T>(fwd, dv * weight, model.sr, cfg, nullptr, &lg, nullptr);
            flow::branch_cache_backward<T>(lr_fwd, lg, model.lr, cfg, grads->lr);
        }
    } else {
        require(s.z_ref.size() > 0, ErrorCode::InvalidArgument, "stage 2 needs a reference latent");
        const auto lr_cache = flow::branch_forward_cache<T>(s.z_lr, s.grid_w, s.grid_h, model.lr, cfg);
        const int ref_depth = std::min(cfg.ref_layers, model.ref.depth());
        const auto ref_fwd =
            flow::branch_forward_cache_taped<T>(s.z_ref, s.grid_w, s.grid_h, model.ref, cfg, ref_depth);
        const auto fwd = flow::velocity_forward_taped<T>(z_t, s.grid_w, s.grid_h, s.t, &lr_cache, &ref_fwd.cache,
                                                         model.sr, cfg, ref_depth, kscale);
        loss = velocity_loss<T>(fwd.velocity, s.z_hr, s.eps, grads ? &dv : nullptr);
        if (grads) {
            flow::CacheGrad<T> rg;
            flow::velocity_backward<T>(fwd, dv * weight, model.sr, cfg, nullptr, nullptr, &rg);
            flow::branch_cache_backward<T>(ref_fwd, rg, model.ref, cfg, grads->ref);
        }
    }
    return loss;
}

// ---------------------------------------------------------------------------
// optimiser

namespace {

template <typename T>
std::vector<Matrix<T>*> tensors(BranchWeights<T>& w) {
    std::vector<Matrix<T>*> out;
    w.for_each([&](const std::string&, Matrix<T>& m) { out.push_back(&m); });
    return out;
}

template <typename T>
std::vector<const Matrix<T>*> tensors(const BranchWeights<T>& w) {
    std::vector<const Matrix<T>*> out;
    w.for_each([&](const std::string&, const Matrix<T>& m) { out.push_back(&m); });
    return out;
}

template <typename T>
double max_abs(const BranchWeights<T>& w) {
    double m = 0.0;
    w.for_each([&](const std::string&, const Matrix<T>& t) {
        if (t.size()) m = std::max(m, double(t.cwiseAbs().maxCoeff()));
    });
    return m;
}

template <typename T>
void add_into(BranchWeights<T>& acc, const BranchWeights<T>& g) {
    auto a = tensors(acc);
    const auto b = tensors(g);
    for (std::size_t i = 0; i < a.size(); ++i) *a[i] += *b[i];
}

template <typename T>
void set_zero(BranchWeights<T>& w) {
    w.for_each([](const std::string&, Matrix<T>& m) { m.setZero(); });
}

}  // namespace

AdamW::AdamW(const BranchWeights<float>& params, double weight_decay)
    : m_(params.zeros_like()), v_(params.zeros_like()), weight_decay_(weight_decay) {}

void AdamW::step(BranchWeights<float>& params, const BranchWeights<float>& grads, double lr) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    ++t_;
    const double c1 = 1.0 - std::pow(b1, double(t_));
    const double c2 = 1.0 - std::pow(b2, double(t_));
    auto p = tensors(params);
    const auto g = tensors(grads);
    auto m = tensors(m_);
    auto v = tensors(v_);
    require(p.size() == g.size() && p.size() == m.size(), ErrorCode::DimensionMismatch, "optimizer shape mismatch");
    for (std::size_t i = 0; i < p.size(); ++i) {
        float* pd = p[i]->data();
        const float* gd = g[i]->data();
        float* md = m[i]->data();
        float* vd = v[i]->data();
        for (Eigen::Index k = 0; k < p[i]->size(); ++k) {
            md[k] = float(b1 * md[k] + (1.0 - b1) * gd[k]);
            vd[k] = float(b2 * vd[k] + (1.0 - b2) * double(gd[k]) * gd[k]);
            const double upd = (md[k] / c1) / (std::sqrt(vd[k] / c2) + eps);
            pd[k] = float(pd[k] - lr * (upd + weight_decay_ * pd[k]));
        }
    }
}

double grad_norm(const BranchWeights<float>& g) {
    double s = 0.0;
    g.for_each([&](const std::string&, const Matrix<float>& m) { s += m.template cast<double>().squaredNorm(); });
    return std::sqrt(s);
}

double scheduled_lr(const TrainConfig& cfg, int step) {
    if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
        return cfg.learning_rate * double(step + 1) / double(cfg.warmup_steps);
    return cfg.learning_rate;
}

// ---------------------------------------------------------------------------
// data

std::vector<Triplet> prepare_triplets(const Manifest& manifest, const std::string& split, const MatchConfig& match,
                                      bool align) {
    std::vector<Triplet> out;
    for (const ManifestRow& row : manifest.split(split)) {
        Triplet t;
        t.hr = load_image(manifest.root / row.hr_path);
        const Image lr = load_image(manifest.root / row.lr_path);
        t.lr_up = resize_bicubic(lr, t.hr.width, t.hr.height);
        if (align) {
            const Image ref = load_image(manifest.root / row.ref_path);
            t.ref = align_reference(t.lr_up, ref, t.lr_up, fit_to_image(match, t.hr.width, t.hr.height)).image;
        } else {
            t.ref = t.lr_up;
        }
        out.push_back(std::move(t));
    }
    if (out.empty()) fail(ErrorCode::EmptySplit, "split '" + split + "' has no rows");
    return out;
}

std::filesystem::path checkpoint_path(const std::filesystem::path& dir, BranchKind kind) {
    return dir / (std::string(flow::to_string(kind)) + ".ckpt");
}

namespace {

BranchWeights<float> require_checkpoint(const std::filesystem::path& dir, BranchKind kind, int producing_stage,
                                        ModelConfig* cfg) {
    const auto path = checkpoint_path(dir, kind);
    if (!std::filesystem::exists(path))
        fail(ErrorCode::MissingCheckpoint, "missing " + path.string() + "; run `train --stage " +
                                               std::to_string(producing_stage) + "` first");
    return flow::load_checkpoint(path, cfg);
}

// The conditioning branches read clean latents at t = 0 and only expose
// keys/values, so starting from the SR weights puts their keys in the space
// the frozen SR queries already use.
BranchWeights<float> copy_of(const BranchWeights<float>& sr, BranchKind kind, int depth) {
    BranchWeights<float> w = sr;
    w.kind = kind;
    w.layers.resize(std::size_t(depth));
    return w;
}

Triplet crop_triplet_corner(const Triplet& t, int size) {
    const Rect r{0, 0, size, size};
    return {crop(t.hr, r), crop(t.lr_up, r), crop(t.ref, r)};
}

}  // namespace

flow::ModelWeights load_model(const std::filesystem::path& dir) {
    flow::ModelWeights m;
    m.sr = require_checkpoint(dir, BranchKind::sr, 0, &m.config);
    m.lr = require_checkpoint(dir, BranchKind::lr, 1, nullptr);
    require(m.lr.depth() == m.sr.depth(), ErrorCode::CorruptFile, "LR and SR checkpoints differ in depth");
    const auto ref_path = checkpoint_path(dir, BranchKind::ref);
    if (std::filesystem::exists(ref_path)) m.ref = flow::load_checkpoint(ref_path);
    return m;
}

void save_loss_csv(const std::vector<LossRecord>& trace, const std::filesystem::path& path, const std::string& echo) {
    std::ofstream out(path);
    if (!out) fail(ErrorCode::Unwritable, path.string());
    std::istringstream lines(echo);
    for (std::string line; std::getline(lines, line);)
        if (!line.empty()) out << "# " << line << '\n';
    out << "step,stage,loss,grad_norm,lr\n";
    char buf[160];
    for (const LossRecord& r : trace) {
        std::snprintf(buf, sizeof(buf), "%d,%d,%.9g,%.9g,%.9g\n", r.step, r.stage, r.loss, r.grad_norm, r.lr);
        out << buf;
    }
    if (!out) fail(ErrorCode::Unwritable, path.string());
}

StageResult run_stage(const std::vector<Triplet>& data, const TrainConfig& cfg, const ModelConfig& model_cfg,
                      const std::filesystem::path& ckpt_dir, const std::filesystem::path& loss_csv,
                      const std::string& echo) {
    cfg.validate();
    model_cfg.validate();
    require(!data.empty(), ErrorCode::EmptySplit, "no training data");

    ModelState<float> model;
    model.config = model_cfg;
    if (cfg.stage == 0) {
        model.sr = flow::init_branch<float>(model_cfg, BranchKind::sr, model_cfg.layers, cfg.seed);
    } else {
        // Architecture comes from the frozen SR checkpoint.
        model.sr = require_checkpoint(ckpt_dir, BranchKind::sr, 0, &model.config);
        model.config.kscale = model_cfg.kscale;
        model.config.ref_layers = std::min(model_cfg.ref_layers, model.config.layers);
        if (cfg.stage == 1) {
            model.lr = cfg.init_from_sr ? copy_of(model.sr, BranchKind::lr, model.config.layers)
                                        : flow::init_branch<float>(model.config, BranchKind::lr, model.config.layers,
                                                                   cfg.seed);
        } else {
            model.lr = require_checkpoint(ckpt_dir, BranchKind::lr, 1, nullptr);
            model.ref = cfg.init_from_sr ? copy_of(model.sr, BranchKind::ref, model.config.ref_layers)
                                         : flow::init_branch<float>(model.config, BranchKind::ref,
                                                                    model.config.ref_layers, cfg.seed);
        }
    }
    const ModelConfig& mc = model.config;
    const flow::PatchCodec codec(mc);
    for (const Triplet& t : data)
        require(t.hr.width >= mc.image_size && t.hr.height >= mc.image_size && t.hr.channels == mc.channels,
                ErrorCode::DimensionMismatch, "training images smaller than the model window");

    const int batch = cfg.batch;
    std::vector<GradSet<float>> grads(std::size_t(batch), GradSet<float>::zeros_like(model));
    std::vector<double> losses(static_cast<std::size_t>(batch));
    BranchWeights<float>& params = cfg.stage == 0 ? model.sr : cfg.stage == 1 ? model.lr : model.ref;
    AdamW opt(params);
    BranchWeights<float> total = params.zeros_like();
    StageResult result;
    const RngState base(cfg.seed, 0x7A1 + std::uint64_t(cfg.stage));

    auto run_sample = [&](int step, int b) {
        RngState rng = base.split(std::uint64_t(step) * std::uint64_t(batch) + std::uint64_t(b));
        const Triplet& src = data[std::size_t(rng.below(data.size()))];
        int crop = mc.image_size;
        const bool half = rng.uniform() < 0.5;
        if (cfg.multi_res && half && (mc.image_size / 2) % mc.patch == 0) crop = mc.image_size / 2;
        const RngState aug_rng = rng.split(1);
        const double t = rng.uniform();
        const std::uint64_t eps_seed = rng.next_u64();
        // Without the crop flag the window is the top-left corner.
        Triplet tr = cfg.augment.crop ? augment(src, cfg.augment, crop, aug_rng, cfg.homography_px)
                                      : augment(crop_triplet_corner(src, crop), cfg.augment, 0, aug_rng,
                                                cfg.homography_px);
        FlowSample<float> s;
        const flow::LatentGrid zh = codec.encode(tr.hr);
        s.grid_w = zh.grid_w;
        s.grid_h = zh.grid_h;
        s.z_hr = zh.tokens;
        if (cfg.stage >= 1) s.z_lr = codec.encode(tr.lr_up).tokens;
        if (cfg.stage == 2) s.z_ref = codec.encode(tr.ref).tokens;
        s.eps = flow::gaussian_latent<float>(int(s.z_hr.rows()), int(s.z_hr.cols()), eps_seed);
        s.t = float(t);
        GradSet<float>& g = grads[std::size_t(b)];
        set_zero(g.sr);
        set_zero(g.lr);
        set_zero(g.ref);
        losses[std::size_t(b)] = flow_loss<float>(s, model, cfg.stage, &g, 1.0f / float(batch));
    };

    for (int step = 0; step < cfg.steps; ++step) {
        const int workers = std::min(cfg.threads, batch);
        if (workers <= 1) {
            for (int b = 0; b < batch; ++b) run_sample(step, b);
        } else {
            std::vector<std::thread> pool;
            std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
            for (int w = 0; w < workers; ++w)
                pool.emplace_back([&, w] {
                    try {
                        for (int b = w; b < batch; b += workers) run_sample(step, b);
                    } catch (...) {
                        errors[std::size_t(w)] = std::current_exception();
                    }
                });
            for (std::thread& th : pool) th.join();
            for (const auto& e : errors)
                if (e) std::rethrow_exception(e);
        }
        // Fixed-order reduction keeps the result independent of threading.
        set_zero(total);
        double loss = 0.0;
        for (int b = 0; b < batch; ++b) {
            GradSet<float>& g = grads[std::size_t(b)];
            add_into(total, g.trainable(cfg.stage));
            loss += losses[std::size_t(b)];
            for (int s = 0; s < 3; ++s)
                if (s != cfg.stage) result.frozen_grad_max = std::max(result.frozen_grad_max, max_abs(g.trainable(s)));
        }
        loss /= batch;
        const double norm = grad_norm(total);
        if (norm > cfg.grad_clip) {
            const float scale = float(cfg.grad_clip / norm);
            total.for_each([&](const std::string&, Matrix<float>& m) { m *= scale; });
        }
        const double lr = scheduled_lr(cfg, step);
        opt.step(params, total, lr);
        result.trace.push_back({step, cfg.stage, loss, norm, lr});
    }

    std::filesystem::create_directories(ckpt_dir);
    const BranchKind kind = cfg.stage == 0 ? BranchKind::sr : cfg.stage == 1 ? BranchKind::lr : BranchKind::ref;
    flow::save_checkpoint(params, mc, checkpoint_path(ckpt_dir, kind), echo);
    if (!loss_csv.empty()) save_loss_csv(result.trace, loss_csv, echo);
    return result;
}

// ---------------------------------------------------------------------------
// gradient check

GradCheckResult grad_check(const ModelConfig& cfg, int stage, std::uint64_t seed, int grid_w, int grid_h,
                           bool zero_loss_stub) {
    cfg.validate();
    require(stage >= 0 && stage <= 2, ErrorCode::InvalidArgument, "stage must be 0, 1 or 2");
    ModelState<double> m;
    m.config = cfg;
    m.sr = flow::init_branch<double>(cfg, BranchKind::sr, cfg.layers, seed, false);
    m.lr = flow::init_branch<double>(cfg, BranchKind::lr, cfg.layers, seed + 1, false);
    m.ref = flow::init_branch<double>(cfg, BranchKind::ref, cfg.ref_layers, seed + 2, false);
    // Perturb gains and biases away from 1 / 0 so every term is exercised.
    RngState rng(seed, 0x6C);
    for (BranchWeights<double>* w : {&m.sr, &m.lr, &m.ref})
        w->for_each([&](const std::string& name, Matrix<double>& t) {
            if (t.rows() != 1) return;
            for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] += 0.2 * rng.normal();
            (void)name;
        });

    const int n = grid_w * grid_h;
    FlowSample<double> s;
    s.grid_w = grid_w;
    s.grid_h = grid_h;
    s.z_hr = flow::gaussian_latent<double>(n, cfg.dim, seed, 1);
    s.z_lr = flow::gaussian_latent<double>(n, cfg.dim, seed, 2);
    s.z_ref = flow::gaussian_latent<double>(n, cfg.dim, seed, 3);
    s.eps = flow::gaussian_latent<double>(n, cfg.dim, seed, 4);
    s.t = 0.37;
    if (zero_loss_stub) {
        // Zero velocity against a zero target: the loss surface is flat at 0.
        m.sr.unembed_w.setZero();
        m.sr.unembed_b.setZero();
        s.z_hr.setZero();
        s.eps.setZero();
    }

    GradSet<double> g = GradSet<double>::zeros_like(m);
    flow_loss<double>(s, m, stage, &g);

    GradCheckResult res;
    for (int k = 0; k < 3; ++k)
        if (k != stage) res.frozen_grad_max = std::max(res.frozen_grad_max, max_abs(g.trainable(k)));

    constexpr double h = 1e-3;
    BranchWeights<double>& p = stage == 0 ? m.sr : stage == 1 ? m.lr : m.ref;
    auto pt = tensors(p);
    const auto gt = tensors(std::as_const(g.trainable(stage)));
    for (std::size_t i = 0; i < pt.size(); ++i)
        for (Eigen::Index k = 0; k < pt[i]->size(); ++k) {
            double& v = pt[i]->data()[k];
            const double keep = v;
            v = keep + h;
            const double lp = flow_loss<double>(s, m, stage, nullptr);
            v = keep - h;
            const double lm = flow_loss<double>(s, m, stage, nullptr);
            v = keep;
            const double fd = (lp - lm) / (2 * h);
            const double an = gt[i]->data()[k];
            const double denom = std::max({std::abs(an), std::abs(fd), 1e-6});
            res.max_rel_error = std::max(res.max_rel_error, std::abs(an - fd) / denom);
            res.max_abs_analytic = std::max(res.max_abs_analytic, std::abs(an));
            res.max_abs_numeric = std::max(res.max_abs_numeric, std::abs(fd));
            ++res.compared;
        }
    return res;
}

// ---------------------------------------------------------------------------
// explicit instantiations

template struct GradSet<float>;
template struct GradSet<double>;
template float velocity_loss<float>(const Matrix<float>&, const Matrix<float>&, const Matrix<float>&, Matrix<float>*);
template double velocity_loss<double>(const Matrix<double>&, const Matrix<double>&, const Matrix<double>&,
                                      Matrix<double>*);
template float flow_loss<float>(const FlowSample<float>&, const ModelState<float>&, int, GradSet<float>*, float);
template double flow_loss<double>(const FlowSample<double>&, const ModelState<double>&, int, GradSet<double>*,
                                  double);

}  // namespace refsr::train

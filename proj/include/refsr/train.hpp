#pragma once

// Three-stage training of the tri-branch flow model: stage 0 fits the SR
// branch unconditionally, stage 1 the LR branch with SR frozen, stage 2 the
// reference branch with SR and LR frozen.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "refsr/datagen.hpp"
#include "refsr/flow.hpp"
#include "refsr/kvconfig.hpp"
#include "refsr/matching.hpp"
#include "refsr/rng.hpp"

namespace refsr::train {

using flow::BranchWeights;
using flow::Matrix;
using flow::ModelConfig;

struct AugmentFlags {
    bool flip = true;
    bool crop = true;
    bool color_jitter = true;
    bool homography = true;
};

struct TrainConfig {
    int stage = 0;
    int steps = 3000;
    int batch = 8;
    double learning_rate = 5e-5;
    int warmup_steps = 100;
    double grad_clip = 1.0;
    std::uint64_t seed = 0;
    AugmentFlags augment{};
    double homography_px = 1.0;  // max corner displacement of the ref warp
    bool multi_res = false;      // crops drawn from {image_size / 2, image_size}
    bool init_from_sr = true;    // stage 1/2 branches start as copies of the SR branch
    int threads = 1;

    void validate() const;
    KeyValueConfig to_kv() const;
    static TrainConfig from_kv(const KeyValueConfig& kv);
};

// One training example at full canvas size: HR target, bicubic-upscaled LR
// and the aligned reference.
struct Triplet {
    Image hr;
    Image lr_up;
    Image ref;
};

// Random flip / crop applied jointly, colour jitter and a small perspective
// warp applied to the reference only. crop_size 0 keeps the full frame.
Triplet augment(const Triplet& in, const AugmentFlags& flags, int crop_size, RngState rng, double homography_px = 1.0);

// Per-channel gain and offset; identity at gain 1, offset 0.
Image color_jitter(const Image& img, const std::array<double, 3>& gain, const std::array<double, 3>& offset);
// Resamples `img` at h(x) for every pixel x.
Image warp_homography(const Image& img, const Homography& h);

template <typename T>
struct ModelState {
    ModelConfig config;
    BranchWeights<T> sr;
    BranchWeights<T> lr;
    BranchWeights<T> ref;
};

// Latent-space training example.
template <typename T>
struct FlowSample {
    int grid_w = 0;
    int grid_h = 0;
    Matrix<T> z_hr;
    Matrix<T> z_lr;
    Matrix<T> z_ref;  // empty when absent
    Matrix<T> eps;
    T t{};
};

// Gradients for all three branches; only the stage's trainable branch is
// ever written.
template <typename T>
struct GradSet {
    BranchWeights<T> sr;
    BranchWeights<T> lr;
    BranchWeights<T> ref;

    static GradSet zeros_like(const ModelState<T>& m);
    BranchWeights<T>& trainable(int stage);
};

// mean((v - (eps - z0))^2) over tokens and channels. `d_velocity`, when
// non-null, receives d(loss)/d(v).
template <typename T>
T velocity_loss(const Matrix<T>& velocity, const Matrix<T>& z_hr, const Matrix<T>& eps,
                Matrix<T>* d_velocity = nullptr);

// Rectified-flow loss of the model at (t, eps). Stage 0 ignores the LR and
// reference latents, stage 1 the reference. Gradients are accumulated into
// the stage's trainable branch of `grads` (scaled by `weight`).
template <typename T>
T flow_loss(const FlowSample<T>& sample, const ModelState<T>& model, int stage, GradSet<T>* grads, T weight = T(1));

// AdamW (beta 0.9 / 0.999, eps 1e-8, decoupled weight decay).
class AdamW {
public:
    explicit AdamW(const BranchWeights<float>& params, double weight_decay = 0.0);
    void step(BranchWeights<float>& params, const BranchWeights<float>& grads, double lr);
    long long steps() const noexcept { return t_; }

private:
    BranchWeights<float> m_;
    BranchWeights<float> v_;
    double weight_decay_;
    long long t_ = 0;
};

// Global L2 norm over every tensor.
double grad_norm(const BranchWeights<float>& g);
// Learning rate with linear warmup over the first warmup_steps steps.
double scheduled_lr(const TrainConfig& cfg, int step);

// Loads the split, bicubic-upscales every LR image and aligns each reference
// (mask = the upscaled LR). Without `align` the reference slot holds the
// upscaled LR (stages 0 and 1 never read it).
std::vector<Triplet> prepare_triplets(const Manifest& manifest, const std::string& split, const MatchConfig& match,
                                      bool align = true);

struct LossRecord {
    int step = 0;
    int stage = 0;
    double loss = 0.0;
    double grad_norm = 0.0;
    double lr = 0.0;
};

struct StageResult {
    std::vector<LossRecord> trace;
    double frozen_grad_max = 0.0;  // largest |gradient| seen on frozen branches
};

// Checkpoint names inside a checkpoint directory.
std::filesystem::path checkpoint_path(const std::filesystem::path& dir, flow::BranchKind kind);

// Runs one stage on `data`. Earlier-stage checkpoints are read from
// `ckpt_dir`; the trained branch is written back there and the loss trace
// to `loss_csv` (skipped when empty). `echo` is written as '#' lines.
StageResult run_stage(const std::vector<Triplet>& data, const TrainConfig& cfg, const ModelConfig& model_cfg,
                      const std::filesystem::path& ckpt_dir, const std::filesystem::path& loss_csv,
                      const std::string& echo = {});

void save_loss_csv(const std::vector<LossRecord>& trace, const std::filesystem::path& path,
                   const std::string& echo = {});

// Loads every checkpoint present in `dir` (ref optional).
flow::ModelWeights load_model(const std::filesystem::path& dir);

// Largest relative error between analytic and central-difference parameter
// gradients of flow_loss (double precision, h = 1e-3) for one stage on a
// random miniature model. Frozen branches are not compared. With
// `zero_loss_stub` the SR output and the flow target are both zeroed, so
// every gradient should vanish.
struct GradCheckResult {
    double max_rel_error = 0.0;
    int compared = 0;
    double frozen_grad_max = 0.0;
    double max_abs_analytic = 0.0;
    double max_abs_numeric = 0.0;
};
GradCheckResult grad_check(const ModelConfig& cfg, int stage, std::uint64_t seed, int grid_w = 2, int grid_h = 2,
                           bool zero_loss_stub = false);

}  // namespace refsr::train

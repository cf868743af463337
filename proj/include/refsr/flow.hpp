#pragma once

// Tri-branch rectified-flow denoiser at desk scale.
//
// Three transformer branches share one architecture: the SR branch denoises
// the HR latent; the LR and reference branches run once on clean latents and
// expose per-layer keys/values that the SR branch's attention concatenates
// with its own (patch-ref attention).

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "refsr/image.hpp"
#include "refsr/kvconfig.hpp"
#include "refsr/rng.hpp"

namespace refsr::flow {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ModelConfig {
    int image_size = 64;
    int patch = 4;
    int channels = 3;
    int dim = 64;
    int heads = 4;
    int layers = 6;
    int ref_layers = 6;
    double kscale = 1.0;
    int sample_steps = 20;
    int ff_mult = 4;
    double latent_scale = 2.0;
    std::uint64_t codec_seed = 0xC0DEC;

    int head_dim() const noexcept { return dim / heads; }
    int patch_values() const noexcept { return patch * patch * channels; }
    void validate() const;
    KeyValueConfig to_kv() const;
    static ModelConfig from_kv(const KeyValueConfig& kv);
};

// Token grid standing in for the autoencoder latent: one row per patch,
// row-major over the patch grid.
struct LatentGrid {
    int grid_w = 0;
    int grid_h = 0;
    Matrix<float> tokens;

    int count() const noexcept { return grid_w * grid_h; }
};

// Fixed linear patch codec (the frozen "VAE"). Encoding multiplies each
// flattened patch by `projection` (dim x patch_values) and latent_scale;
// decoding applies the transpose. The projection has orthonormal columns
// when dim >= patch_values, so decode(encode(x)) == x up to rounding.
class PatchCodec {
public:
    explicit PatchCodec(const ModelConfig& cfg);
    // Places patch value i on latent channel i (requires dim >= patch_values).
    static PatchCodec identity(const ModelConfig& cfg);

    LatentGrid encode(const Image& img) const;
    Image decode(const LatentGrid& z) const;

    const Matrix<float>& projection() const noexcept { return proj_; }

private:
    PatchCodec(const ModelConfig& cfg, Matrix<float> proj);
    ModelConfig cfg_;
    Matrix<float> proj_;
};

LatentGrid patchify(const Image& img, const PatchCodec& codec);
Image unpatchify(const LatentGrid& z, const PatchCodec& codec);

// (1 - t) z0 + t eps.
LatentGrid forward_interpolate(const LatentGrid& z0, const LatentGrid& eps, double t);

enum class BranchKind { sr, lr, ref };
std::string_view to_string(BranchKind kind);

template <typename T>
struct LayerWeights {
    Matrix<T> ln1_g, ln1_b;
    Matrix<T> wq, wk, wv, wo, bo;
    Matrix<T> ln2_g, ln2_b;
    Matrix<T> w1, b1, w2, b2;
};

// Parameters of one branch. Row vectors are stored as 1 x n matrices so a
// single visitor covers every tensor.
template <typename T>
struct BranchWeights {
    BranchKind kind = BranchKind::sr;
    Matrix<T> embed_w, embed_b;
    Matrix<T> time_w, time_b;
    std::vector<LayerWeights<T>> layers;
    Matrix<T> lnf_g, lnf_b;
    Matrix<T> unembed_w, unembed_b;

    int depth() const noexcept { return int(layers.size()); }

    template <typename F>
    void for_each(F&& f) {
        f("embed_w", embed_w);
        f("embed_b", embed_b);
        f("time_w", time_w);
        f("time_b", time_b);
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const std::string p = "layer" + std::to_string(l) + ".";
            LayerWeights<T>& L = layers[l];
            f(p + "ln1_g", L.ln1_g);
            f(p + "ln1_b", L.ln1_b);
            f(p + "wq", L.wq);
            f(p + "wk", L.wk);
            f(p + "wv", L.wv);
            f(p + "wo", L.wo);
            f(p + "bo", L.bo);
            f(p + "ln2_g", L.ln2_g);
            f(p + "ln2_b", L.ln2_b);
            f(p + "w1", L.w1);
            f(p + "b1", L.b1);
            f(p + "w2", L.w2);
            f(p + "b2", L.b2);
        }
        f("lnf_g", lnf_g);
        f("lnf_b", lnf_b);
        f("unembed_w", unembed_w);
        f("unembed_b", unembed_b);
    }
    template <typename F>
    void for_each(F&& f) const {
        const_cast<BranchWeights*>(this)->for_each([&](const std::string& n, Matrix<T>& m) { f(n, std::as_const(m)); });
    }

    // Same shapes, all zeros.
    BranchWeights zeros_like() const {
        BranchWeights out = *this;
        out.for_each([](const std::string&, Matrix<T>& m) { m.setZero(); });
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for_each([&](const std::string&, const Matrix<T>& m) { n += std::size_t(m.size()); });
        return n;
    }

    template <typename U>
    BranchWeights<U> cast() const {
        BranchWeights<U> out;
        out.kind = kind;
        out.layers.resize(layers.size());
        std::vector<const Matrix<T>*> src;
        for_each([&](const std::string&, const Matrix<T>& m) { src.push_back(&m); });
        std::size_t i = 0;
        out.for_each([&](const std::string&, Matrix<U>& m) { m = src[i++]->template cast<U>(); });
        return out;
    }
};

// Seeded initialisation: N(0, 1/fan_in) projections, unit layer-norm gains,
// zero biases. `zero_output` zero-initialises the unembedding.
template <typename T>
BranchWeights<T> init_branch(const ModelConfig& cfg, BranchKind kind, int depth, std::uint64_t seed,
                             bool zero_output = true);

// Per-layer keys and values of an LR or reference branch.
template <typename T>
struct BranchCache {
    std::vector<Matrix<T>> keys;
    std::vector<Matrix<T>> values;
    int depth() const noexcept { return int(keys.size()); }
};

// One key/value source in the concatenated attention.
template <typename T>
struct KVSource {
    const Matrix<T>* keys = nullptr;
    const Matrix<T>* values = nullptr;
    T key_scale = T(1);
};

template <typename T>
struct AttentionTape {
    Matrix<T> keys;    // concatenated, key_scale applied
    Matrix<T> values;  // concatenated
    std::vector<Matrix<T>> probs;  // per head, queries x keys
    std::vector<int> offsets;      // row offset of each source
    std::vector<T> scales;         // key scale of each source
};

// Multi-head attention of `q` over the row-concatenation of every source.
// Per head: softmax(q_h [k_1 s_1; k_2 s_2; ...]_h^T / sqrt(d_k)) [v_1; v_2; ...]_h.
template <typename T>
Matrix<T> multi_source_attention(const Matrix<T>& q, std::span<const KVSource<T>> sources, int heads,
                                 AttentionTape<T>* tape = nullptr);

// Patch-ref attention: SR queries over [SR, LR, kscale * Ref] keys and
// [SR, LR, Ref] values. Absent sources are left out of the concatenation.
template <typename T>
Matrix<T> patch_ref_attention(const Matrix<T>& q_sr, const Matrix<T>& k_sr, const Matrix<T>& v_sr,
                              const Matrix<T>* k_lr, const Matrix<T>* v_lr, const Matrix<T>* k_ref,
                              const Matrix<T>* v_ref, T kscale, int heads);

// Runs an LR/reference branch on a clean latent with the time embedding
// fixed at t = 0 and records every layer's key and value projections.
// `depth` < 0 caches all layers.
template <typename T>
BranchCache<T> branch_forward_cache(const Matrix<T>& z, int grid_w, int grid_h, const BranchWeights<T>& weights,
                                    const ModelConfig& cfg, int depth = -1);

// Predicted velocity of the SR branch. The LR cache must match the SR depth;
// the reference cache feeds only the first `ref_layers` layers and must be at
// least that deep.
template <typename T>
Matrix<T> velocity_forward(const Matrix<T>& z_t, int grid_w, int grid_h, T t, const BranchCache<T>* lr_cache,
                           const BranchCache<T>* ref_cache, const BranchWeights<T>& sr, const ModelConfig& cfg,
                           int ref_layers, T kscale);

// Fixed-step Euler from t = 1 to t = 0: z <- z - (1/steps) v(z, k/steps).
template <typename T>
Matrix<T> euler_integrate(Matrix<T> z, int steps, const std::function<Matrix<T>(const Matrix<T>&, T)>& velocity);

// Standard-normal latent for a seed (stream 0x5A).
template <typename T>
Matrix<T> gaussian_latent(int rows, int cols, std::uint64_t seed, std::uint64_t stream = 0x5A);

// Samples the SR latent from noise drawn from `seed`.
LatentGrid euler_sample(const BranchCache<float>& lr_cache, const BranchCache<float>* ref_cache,
                        const BranchWeights<float>& sr, const ModelConfig& cfg, int grid_w, int grid_h,
                        std::uint64_t seed);

struct ModelWeights {
    ModelConfig config;
    BranchWeights<float> sr;
    BranchWeights<float> lr;
    std::optional<BranchWeights<float>> ref;
};

// Full single-window inference. `lr_up` is the bicubic-upscaled LR image;
// without `aligned_ref` (or with cfg.ref_layers == 0) the reference branch is
// skipped entirely.
Image super_resolve(const Image& lr_up, const Image* aligned_ref, const ModelWeights& model, const PatchCodec& codec,
                    std::uint64_t seed);

// Checkpoint: "RSRCKPT1" magic, u32 version, config text, branch kind, then
// named float32 tensors (name, rows, cols, data), little-endian. `run_echo`
// (key=value text) is stored in the config text under "run.".
void save_checkpoint(const BranchWeights<float>& w, const ModelConfig& cfg, const std::filesystem::path& path,
                     const std::string& run_echo = {});
BranchWeights<float> load_checkpoint(const std::filesystem::path& path, ModelConfig* cfg_out = nullptr);

// Reverse-mode pieces used by training.
template <typename T>
struct SrTape;
template <typename T>
struct BranchTape;

template <typename T>
struct SrForward {
    Matrix<T> velocity;
    std::shared_ptr<SrTape<T>> tape;
};

template <typename T>
struct CacheForward {
    BranchCache<T> cache;
    std::shared_ptr<BranchTape<T>> tape;
};

template <typename T>
SrForward<T> velocity_forward_taped(const Matrix<T>& z_t, int grid_w, int grid_h, T t, const BranchCache<T>* lr_cache,
                                    const BranchCache<T>* ref_cache, const BranchWeights<T>& sr,
                                    const ModelConfig& cfg, int ref_layers, T kscale);

template <typename T>
CacheForward<T> branch_forward_cache_taped(const Matrix<T>& z, int grid_w, int grid_h,
                                           const BranchWeights<T>& weights, const ModelConfig& cfg, int depth = -1);

// Gradients with respect to the cached keys/values of one branch.
template <typename T>
struct CacheGrad {
    std::vector<Matrix<T>> keys;
    std::vector<Matrix<T>> values;
};

// Backpropagates d(velocity) through the SR branch. Parameter gradients are
// accumulated into `sr_grad` when non-null; cache gradients are written to
// `lr_grad`/`ref_grad` when non-null.
template <typename T>
void velocity_backward(const SrForward<T>& fwd, const Matrix<T>& d_velocity, const BranchWeights<T>& sr,
                       const ModelConfig& cfg, BranchWeights<T>* sr_grad, CacheGrad<T>* lr_grad,
                       CacheGrad<T>* ref_grad);

// Backpropagates cache gradients through an LR/reference branch into its
// parameter gradients.
template <typename T>
void branch_cache_backward(const CacheForward<T>& fwd, const CacheGrad<T>& d_cache, const BranchWeights<T>& weights,
                           const ModelConfig& cfg, BranchWeights<T>& grad);

}  // namespace refsr::flow

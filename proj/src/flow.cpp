#include "refsr/flow.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>

#include "refsr/binio.hpp"
#include "refsr/error.hpp"

namespace refsr::flow {

// ---------------------------------------------------------------------------
// configuration

void ModelConfig::validate() const {
    require(patch >= 1 && image_size >= patch && image_size % patch == 0, ErrorCode::InvalidArgument,
            "image_size must be a positive multiple of patch");
    require(channels == 1 || channels == 3, ErrorCode::InvalidArgument, "channels must be 1 or 3");
    require(dim >= 2 && dim % 2 == 0, ErrorCode::InvalidArgument, "dim must be even");
    require(heads >= 1 && dim % heads == 0, ErrorCode::InvalidArgument, "dim must be divisible by heads");
    require(layers >= 1, ErrorCode::InvalidArgument, "layers must be >= 1");
    require(ref_layers >= 0 && ref_layers <= layers, ErrorCode::InvalidArgument, "ref_layers must be in [0, layers]");
    require(kscale >= 0.0 && kscale <= 1.0, ErrorCode::InvalidArgument, "kscale must be in [0, 1]");
    require(sample_steps >= 1, ErrorCode::InvalidArgument, "sample_steps must be >= 1");
    require(ff_mult >= 1, ErrorCode::InvalidArgument, "ff_mult must be >= 1");
    require(latent_scale > 0.0, ErrorCode::InvalidArgument, "latent_scale must be > 0");
}

KeyValueConfig ModelConfig::to_kv() const {
    KeyValueConfig kv;
    kv.set("image_size", image_size);
    kv.set("patch", patch);
    kv.set("channels", channels);
    kv.set("dim", dim);
    kv.set("heads", heads);
    kv.set("layers", layers);
    kv.set("ref_layers", ref_layers);
    kv.set("kscale", kscale);
    kv.set("sample_steps", sample_steps);
    kv.set("ff_mult", ff_mult);
    kv.set("latent_scale", latent_scale);
    kv.set("codec_seed", static_cast<long long>(codec_seed));
    return kv;
}

ModelConfig ModelConfig::from_kv(const KeyValueConfig& kv) {
    ModelConfig c;
    c.image_size = int(kv.get_int("image_size", c.image_size));
    c.patch = int(kv.get_int("patch", c.patch));
    c.channels = int(kv.get_int("channels", c.channels));
    c.dim = int(kv.get_int("dim", c.dim));
    c.heads = int(kv.get_int("heads", c.heads));
    c.layers = int(kv.get_int("layers", c.layers));
    c.ref_layers = int(kv.get_int("ref_layers", c.layers));
    c.kscale = kv.get_double("kscale", c.kscale);
    c.sample_steps = int(kv.get_int("sample_steps", c.sample_steps));
    c.ff_mult = int(kv.get_int("ff_mult", c.ff_mult));
    c.latent_scale = kv.get_double("latent_scale", c.latent_scale);
    c.codec_seed = static_cast<std::uint64_t>(kv.get_int("codec_seed", static_cast<long long>(c.codec_seed)));
    c.validate();
    return c;
}

std::string_view to_string(BranchKind kind) {
    switch (kind) {
        case BranchKind::sr: return "sr";
        case BranchKind::lr: return "lr";
        case BranchKind::ref: return "ref";
    }
    return "?";
}

namespace {

BranchKind parse_kind(const std::string& s) {
    if (s == "sr") return BranchKind::sr;
    if (s == "lr") return BranchKind::lr;
    if (s == "ref") return BranchKind::ref;
    fail(ErrorCode::CorruptFile, "unknown branch kind " + s);
}

}  // namespace

// ---------------------------------------------------------------------------
// patch codec

PatchCodec::PatchCodec(const ModelConfig& cfg, Matrix<float> proj) : cfg_(cfg), proj_(std::move(proj)) {}

PatchCodec::PatchCodec(const ModelConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    const int n = cfg.patch_values();
    const int d = cfg.dim;
    RngState rng(cfg.codec_seed, 0xC0);
    Eigen::MatrixXd g(std::max(d, n), std::min(d, n));
    for (int i = 0; i < g.rows(); ++i)
        for (int j = 0; j < g.cols(); ++j) g(i, j) = rng.normal();
    const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ() *
                              Eigen::MatrixXd::Identity(g.rows(), g.cols());
    // d >= n: orthonormal columns (dim x n); d < n: orthonormal rows.
    proj_ = (d >= n ? Eigen::MatrixXd(q) : Eigen::MatrixXd(q.transpose())).cast<float>();
}

PatchCodec PatchCodec::identity(const ModelConfig& cfg) {
    cfg.validate();
    require(cfg.dim >= cfg.patch_values(), ErrorCode::InvalidArgument, "identity codec needs dim >= patch values");
    Matrix<float> p = Matrix<float>::Zero(cfg.dim, cfg.patch_values());
    for (int i = 0; i < cfg.patch_values(); ++i) p(i, i) = 1.0f;
    return PatchCodec(cfg, std::move(p));
}

LatentGrid PatchCodec::encode(const Image& img) const {
    const int p = cfg_.patch;
    require(img.channels == cfg_.channels, ErrorCode::DimensionMismatch, "image channel count differs from model");
    require(img.width > 0 && img.height > 0 && img.width % p == 0 && img.height % p == 0,
            ErrorCode::DimensionMismatch, "image size must be a multiple of the patch size");
    LatentGrid z;
    z.grid_w = img.width / p;
    z.grid_h = img.height / p;
    Matrix<float> pixels(z.count(), cfg_.patch_values());
    for (int gy = 0; gy < z.grid_h; ++gy)
        for (int gx = 0; gx < z.grid_w; ++gx) {
            const int row = gy * z.grid_w + gx;
            int k = 0;
            for (int y = 0; y < p; ++y)
                for (int x = 0; x < p; ++x)
                    for (int c = 0; c < img.channels; ++c) pixels(row, k++) = img.at(gx * p + x, gy * p + y, c);
        }
    z.tokens = (pixels * proj_.transpose()) * float(cfg_.latent_scale);
    return z;
}

Image PatchCodec::decode(const LatentGrid& z) const {
    require(z.tokens.rows() == z.count() && z.tokens.cols() == cfg_.dim, ErrorCode::DimensionMismatch,
            "latent shape differs from model");
    const int p = cfg_.patch;
    const Matrix<float> pixels = (z.tokens * proj_) * float(1.0 / cfg_.latent_scale);
    Image img(z.grid_w * p, z.grid_h * p, cfg_.channels);
    for (int gy = 0; gy < z.grid_h; ++gy)
        for (int gx = 0; gx < z.grid_w; ++gx) {
            const int row = gy * z.grid_w + gx;
            int k = 0;
            for (int y = 0; y < p; ++y)
                for (int x = 0; x < p; ++x)
                    for (int c = 0; c < img.channels; ++c) img.at(gx * p + x, gy * p + y, c) = pixels(row, k++);
        }
    return img;
}

LatentGrid patchify(const Image& img, const PatchCodec& codec) { return codec.encode(img); }

Image unpatchify(const LatentGrid& z, const PatchCodec& codec) { return codec.decode(z); }

LatentGrid forward_interpolate(const LatentGrid& z0, const LatentGrid& eps, double t) {
    require(z0.tokens.rows() == eps.tokens.rows() && z0.tokens.cols() == eps.tokens.cols(),
            ErrorCode::DimensionMismatch, "latent shapes differ");
    require(t >= 0.0 && t <= 1.0, ErrorCode::InvalidArgument, "t must be in [0, 1]");
    LatentGrid out = z0;
    if (t == 0.0) return out;
    if (t == 1.0) {
        out.tokens = eps.tokens;
        return out;
    }
    out.tokens = float(1.0 - t) * z0.tokens + float(t) * eps.tokens;
    return out;
}

// ---------------------------------------------------------------------------
// embeddings and elementwise pieces

namespace {

constexpr double kLnEps = 1e-5;

template <typename T>
Matrix<T> position_embedding(int grid_w, int grid_h, int dim) {
    // First half of the channels encodes the column, second half the row.
    const int half = dim / 2;
    const int freqs = std::max(1, half / 2);
    Matrix<T> pe = Matrix<T>::Zero(grid_w * grid_h, dim);
    for (int gy = 0; gy < grid_h; ++gy)
        for (int gx = 0; gx < grid_w; ++gx) {
            const int row = gy * grid_w + gx;
            for (int axis = 0; axis < 2; ++axis) {
                const double pos = axis == 0 ? gx : gy;
                for (int j = 0; j < freqs && 2 * j + 1 < half + 1; ++j) {
                    const double w = std::pow(100.0, -double(j) / freqs);
                    const int base = axis * half + 2 * j;
                    if (base < (axis + 1) * half) pe(row, base) = T(std::sin(pos * w));
                    if (base + 1 < (axis + 1) * half) pe(row, base + 1) = T(std::cos(pos * w));
                }
            }
        }
    return pe;
}

template <typename T>
Matrix<T> time_features(T t, int dim) {
    const int half = dim / 2;
    Matrix<T> f(1, dim);
    for (int j = 0; j < half; ++j) {
        const double w = std::exp(-std::log(10000.0) * double(j) / half);
        const double a = 1000.0 * double(t) * w;
        f(0, j) = T(std::sin(a));
        f(0, half + j) = T(std::cos(a));
    }
    return f;
}

template <typename T>
struct LnCache {
    Matrix<T> xhat;
    Eigen::Matrix<T, Eigen::Dynamic, 1> rstd;
};

template <typename T>
Matrix<T> layer_norm(const Matrix<T>& x, const Matrix<T>& g, const Matrix<T>& b, LnCache<T>* cache) {
    const Eigen::Matrix<T, Eigen::Dynamic, 1> mean = x.rowwise().mean();
    Matrix<T> xc = x.colwise() - mean;
    const Eigen::Matrix<T, Eigen::Dynamic, 1> var = xc.array().square().rowwise().mean();
    const Eigen::Matrix<T, Eigen::Dynamic, 1> rstd = (var.array() + T(kLnEps)).rsqrt();
    xc = xc.array().colwise() * rstd.array();
    Matrix<T> y = (xc.array().rowwise() * g.row(0).array()).rowwise() + b.row(0).array();
    if (cache) {
        cache->xhat = std::move(xc);
        cache->rstd = rstd;
    }
    return y;
}

template <typename T>
Matrix<T> layer_norm_backward(const Matrix<T>& dy, const Matrix<T>& g, const LnCache<T>& c, Matrix<T>* dg,
                              Matrix<T>* db) {
    if (dg) *dg += (dy.array() * c.xhat.array()).colwise().sum().matrix();
    if (db) *db += dy.colwise().sum();
    const Matrix<T> dxhat = dy.array().rowwise() * g.row(0).array();
    const T n = T(dy.cols());
    const Eigen::Matrix<T, Eigen::Dynamic, 1> s1 = dxhat.rowwise().sum();
    const Eigen::Matrix<T, Eigen::Dynamic, 1> s2 = (dxhat.array() * c.xhat.array()).rowwise().sum();
    Matrix<T> dx = (dxhat * n).colwise() - s1;
    dx -= (c.xhat.array().colwise() * s2.array()).matrix();
    dx = dx.array().colwise() * (c.rstd.array() / n);
    return dx;
}

template <typename T>
T gelu(T x) {
    constexpr T c = T(0.7978845608028654);
    return T(0.5) * x * (T(1) + std::tanh(c * (x + T(0.044715) * x * x * x)));
}

template <typename T>
T gelu_grad(T x) {
    constexpr T c = T(0.7978845608028654);
    const T th = std::tanh(c * (x + T(0.044715) * x * x * x));
    return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * c * (T(1) + T(3 * 0.044715) * x * x);
}

template <typename T>
void add_row(Matrix<T>& m, const Matrix<T>& row) {
    m.rowwise() += row.row(0);
}

}  // namespace

// ---------------------------------------------------------------------------
// initialisation

template <typename T>
BranchWeights<T> init_branch(const ModelConfig& cfg, BranchKind kind, int depth, std::uint64_t seed,
                             bool zero_output) {
    cfg.validate();
    require(depth >= 0, ErrorCode::InvalidArgument, "branch depth");
    RngState rng(seed, 0xB0 + std::uint64_t(kind));
    const int d = cfg.dim;
    const int f = cfg.dim * cfg.ff_mult;
    auto gauss = [&](int r, int c, double std) {
        Matrix<T> m(r, c);
        for (int i = 0; i < m.size(); ++i) m.data()[i] = T(std * rng.normal());
        return m;
    };
    auto ones = [](int n) { return Matrix<T>::Ones(1, n); };
    auto zeros = [](int r, int c) { return Matrix<T>::Zero(r, c); };
    const double out_scale = 1.0 / std::sqrt(2.0 * std::max(1, depth));

    BranchWeights<T> w;
    w.kind = kind;
    w.embed_w = gauss(d, d, 1.0 / std::sqrt(d));
    w.embed_b = zeros(1, d);
    w.time_w = gauss(d, d, 1.0 / std::sqrt(d));
    w.time_b = zeros(1, d);
    for (int l = 0; l < depth; ++l) {
        LayerWeights<T> L;
        L.ln1_g = ones(d);
        L.ln1_b = zeros(1, d);
        L.wq = gauss(d, d, 1.0 / std::sqrt(d));
        L.wk = gauss(d, d, 1.0 / std::sqrt(d));
        L.wv = gauss(d, d, 1.0 / std::sqrt(d));
        L.wo = gauss(d, d, out_scale / std::sqrt(d));
        L.bo = zeros(1, d);
        L.ln2_g = ones(d);
        L.ln2_b = zeros(1, d);
        L.w1 = gauss(d, f, 1.0 / std::sqrt(d));
        L.b1 = zeros(1, f);
        L.w2 = gauss(f, d, out_scale / std::sqrt(f));
        L.b2 = zeros(1, d);
        w.layers.push_back(std::move(L));
    }
    w.lnf_g = ones(d);
    w.lnf_b = zeros(1, d);
    w.unembed_w = zero_output ? zeros(d, d) : gauss(d, d, 1.0 / std::sqrt(d));
    w.unembed_b = zeros(1, d);
    return w;
}

// ---------------------------------------------------------------------------
// attention

template <typename T>
Matrix<T> multi_source_attention(const Matrix<T>& q, std::span<const KVSource<T>> sources, int heads,
                                 AttentionTape<T>* tape) {
    const int D = int(q.cols());
    require(heads >= 1 && D % heads == 0, ErrorCode::InvalidArgument, "width not divisible by heads");
    require(!sources.empty(), ErrorCode::InvalidArgument, "attention needs at least one source");
    int M = 0;
    for (const KVSource<T>& s : sources) {
        require(s.keys && s.values, ErrorCode::InvalidArgument, "null attention source");
        require(s.keys->cols() == D && s.values->cols() == D && s.keys->rows() == s.values->rows(),
                ErrorCode::DimensionMismatch, "attention source width mismatch");
        M += int(s.keys->rows());
    }
    Matrix<T> K(M, D), V(M, D);
    std::vector<int> offsets;
    std::vector<T> scales;
    int off = 0;
    for (const KVSource<T>& s : sources) {
        offsets.push_back(off);
        scales.push_back(s.key_scale);
        const int n = int(s.keys->rows());
        if (s.key_scale == T(1))
            K.middleRows(off, n) = *s.keys;
        else
            K.middleRows(off, n) = *s.keys * s.key_scale;
        V.middleRows(off, n) = *s.values;
        off += n;
    }
    const int dk = D / heads;
    const T scale = T(1) / std::sqrt(T(dk));
    Matrix<T> out(q.rows(), D);
    if (tape) tape->probs.resize(std::size_t(heads));
    Matrix<T> P;
    for (int h = 0; h < heads; ++h) {
        P.noalias() = (q.middleCols(h * dk, dk) * K.middleCols(h * dk, dk).transpose()) * scale;
        const Eigen::Matrix<T, Eigen::Dynamic, 1> mx = P.rowwise().maxCoeff();
        P = (P.colwise() - mx).array().exp();
        const Eigen::Matrix<T, Eigen::Dynamic, 1> sum = P.rowwise().sum();
        P = P.array().colwise() / sum.array();
        out.middleCols(h * dk, dk).noalias() = P * V.middleCols(h * dk, dk);
        if (tape) tape->probs[std::size_t(h)] = P;
    }
    if (tape) {
        tape->keys = std::move(K);
        tape->values = std::move(V);
        tape->offsets = std::move(offsets);
        tape->scales = std::move(scales);
    }
    return out;
}

template <typename T>
Matrix<T> patch_ref_attention(const Matrix<T>& q_sr, const Matrix<T>& k_sr, const Matrix<T>& v_sr,
                              const Matrix<T>* k_lr, const Matrix<T>* v_lr, const Matrix<T>* k_ref,
                              const Matrix<T>* v_ref, T kscale, int heads) {
    require((k_lr == nullptr) == (v_lr == nullptr), ErrorCode::InvalidArgument, "LR keys without values");
    require((k_ref == nullptr) == (v_ref == nullptr), ErrorCode::InvalidArgument, "reference keys without values");
    std::vector<KVSource<T>> src{{&k_sr, &v_sr, T(1)}};
    if (k_lr) src.push_back({k_lr, v_lr, T(1)});
    if (k_ref) src.push_back({k_ref, v_ref, kscale});
    return multi_source_attention<T>(q_sr, src, heads);
}

namespace {

// Gradients of the attention output with respect to q and the concatenated
// (scaled) keys and values.
template <typename T>
void attention_backward(const Matrix<T>& dout, const Matrix<T>& q, const AttentionTape<T>& tape, int heads,
                        Matrix<T>& dq, Matrix<T>& dK, Matrix<T>& dV) {
    const int D = int(q.cols());
    const int dk = D / heads;
    const T scale = T(1) / std::sqrt(T(dk));
    dq.setZero(q.rows(), D);
    dK.setZero(tape.keys.rows(), D);
    dV.setZero(tape.values.rows(), D);
    Matrix<T> dP;
    for (int h = 0; h < heads; ++h) {
        const Matrix<T>& P = tape.probs[std::size_t(h)];
        const auto dO = dout.middleCols(h * dk, dk);
        dP.noalias() = dO * tape.values.middleCols(h * dk, dk).transpose();
        dV.middleCols(h * dk, dk).noalias() = P.transpose() * dO;
        const Eigen::Matrix<T, Eigen::Dynamic, 1> rs = (dP.array() * P.array()).rowwise().sum();
        Matrix<T> dS = (P.array() * (dP.colwise() - rs).array()) * scale;
        dq.middleCols(h * dk, dk).noalias() = dS * tape.keys.middleCols(h * dk, dk);
        dK.middleCols(h * dk, dk).noalias() = dS.transpose() * q.middleCols(h * dk, dk);
    }
}

// ---------------------------------------------------------------------------
// transformer block

template <typename T>
struct BlockTape {
    LnCache<T> ln1;
    Matrix<T> a1, q, k, v;
    AttentionTape<T> attn;
    Matrix<T> attn_out;
    LnCache<T> ln2;
    Matrix<T> a2, f_pre, f_act;
    bool kv_only = false;
};

// Pre-LN block: h = x + Attn(LN1 x) Wo + bo; out = h + FFN(LN2 h). The
// block's own keys/values come first in the attention, then `ext`. With
// kv_only set only the key/value projections are computed.
template <typename T>
Matrix<T> block_forward(const Matrix<T>& x, const LayerWeights<T>& L, std::span<const KVSource<T>> ext, int heads,
                        bool kv_only, BlockTape<T>* tape, Matrix<T>* k_out, Matrix<T>* v_out) {
    BlockTape<T> local;
    BlockTape<T>& tp = tape ? *tape : local;
    tp.kv_only = kv_only;
    tp.a1 = layer_norm(x, L.ln1_g, L.ln1_b, tape ? &tp.ln1 : nullptr);
    tp.k.noalias() = tp.a1 * L.wk;
    tp.v.noalias() = tp.a1 * L.wv;
    if (k_out) *k_out = tp.k;
    if (v_out) *v_out = tp.v;
    if (kv_only) return Matrix<T>();

    tp.q.noalias() = tp.a1 * L.wq;
    std::vector<KVSource<T>> src{{&tp.k, &tp.v, T(1)}};
    src.insert(src.end(), ext.begin(), ext.end());
    tp.attn_out = multi_source_attention<T>(tp.q, src, heads, tape ? &tp.attn : nullptr);
    Matrix<T> h = x;
    h.noalias() += tp.attn_out * L.wo;
    add_row(h, L.bo);
    tp.a2 = layer_norm(h, L.ln2_g, L.ln2_b, tape ? &tp.ln2 : nullptr);
    tp.f_pre.noalias() = tp.a2 * L.w1;
    add_row(tp.f_pre, L.b1);
    tp.f_act = tp.f_pre.unaryExpr([](T v) { return gelu(v); });
    h.noalias() += tp.f_act * L.w2;
    add_row(h, L.b2);
    return h;
}

// Returns d(block input). `d_ext[i]` receives the gradients of external
// source i (unscaled keys), when non-null.
template <typename T>
Matrix<T> block_backward(const Matrix<T>& dout, const BlockTape<T>& tp, const LayerWeights<T>& L, int heads,
                         LayerWeights<T>* g, const Matrix<T>* dk_extra, const Matrix<T>* dv_extra,
                         std::span<std::pair<Matrix<T>*, Matrix<T>*>> d_ext) {
    const int n = int(tp.a1.rows());
    const int d = int(tp.a1.cols());
    Matrix<T> dx = Matrix<T>::Zero(n, d);
    Matrix<T> da1 = Matrix<T>::Zero(n, d);
    Matrix<T> dk = Matrix<T>::Zero(n, d);
    Matrix<T> dv = Matrix<T>::Zero(n, d);
    if (!tp.kv_only) {
        Matrix<T> dh = dout;
        // feed-forward
        if (g) {
            g->b2 += dout.colwise().sum();
            g->w2.noalias() += tp.f_act.transpose() * dout;
        }
        Matrix<T> df = dout * L.w2.transpose();
        df = df.array() * tp.f_pre.unaryExpr([](T v) { return gelu_grad(v); }).array();
        if (g) {
            g->b1 += df.colwise().sum();
            g->w1.noalias() += tp.a2.transpose() * df;
        }
        const Matrix<T> da2 = df * L.w1.transpose();
        dh += layer_norm_backward(da2, L.ln2_g, tp.ln2, g ? &g->ln2_g : nullptr, g ? &g->ln2_b : nullptr);
        // attention
        if (g) {
            g->bo += dh.colwise().sum();
            g->wo.noalias() += tp.attn_out.transpose() * dh;
        }
        const Matrix<T> dattn = dh * L.wo.transpose();
        Matrix<T> dq, dK, dV;
        attention_backward(dattn, tp.q, tp.attn, heads, dq, dK, dV);
        dk = dK.topRows(n);
        dv = dV.topRows(n);
        for (std::size_t i = 0; i < d_ext.size(); ++i) {
            const int off = tp.attn.offsets[i + 1];
            const int rows = (i + 2 < tp.attn.offsets.size() ? tp.attn.offsets[i + 2] : int(dK.rows())) - off;
            if (d_ext[i].first) *d_ext[i].first = dK.middleRows(off, rows) * tp.attn.scales[i + 1];
            if (d_ext[i].second) *d_ext[i].second = dV.middleRows(off, rows);
        }
        if (g) g->wq.noalias() += tp.a1.transpose() * dq;
        da1.noalias() += dq * L.wq.transpose();
        dx = std::move(dh);
    }
    if (dk_extra) dk += *dk_extra;
    if (dv_extra) dv += *dv_extra;
    if (g) {
        g->wk.noalias() += tp.a1.transpose() * dk;
        g->wv.noalias() += tp.a1.transpose() * dv;
    }
    da1.noalias() += dk * L.wk.transpose();
    da1.noalias() += dv * L.wv.transpose();
    dx += layer_norm_backward(da1, L.ln1_g, tp.ln1, g ? &g->ln1_g : nullptr, g ? &g->ln1_b : nullptr);
    return dx;
}

template <typename T>
Matrix<T> embed_tokens(const Matrix<T>& z, int grid_w, int grid_h, T t, const BranchWeights<T>& w,
                       const ModelConfig& cfg) {
    require(z.rows() == grid_w * grid_h && z.cols() == cfg.dim, ErrorCode::DimensionMismatch,
            "latent shape differs from model");
    Matrix<T> x = z * w.embed_w;
    add_row(x, w.embed_b);
    x += position_embedding<T>(grid_w, grid_h, cfg.dim);
    Matrix<T> temb = time_features<T>(t, cfg.dim) * w.time_w;
    temb += w.time_b;
    add_row(x, temb);
    return x;
}

template <typename T>
void embed_backward(const Matrix<T>& dx, const Matrix<T>& z, T t, const ModelConfig& cfg, BranchWeights<T>& g) {
    const Matrix<T> col = dx.colwise().sum();
    g.embed_w.noalias() += z.transpose() * dx;
    g.embed_b += col;
    g.time_w.noalias() += time_features<T>(t, cfg.dim).transpose() * col;
    g.time_b += col;
}

}  // namespace

// ---------------------------------------------------------------------------
// tapes

template <typename T>
struct BranchTape {
    Matrix<T> z;
    std::vector<BlockTape<T>> blocks;
};

template <typename T>
struct SrTape {
    Matrix<T> z;
    T t{};
    std::vector<BlockTape<T>> blocks;
    std::vector<bool> used_lr;
    std::vector<bool> used_ref;
    LnCache<T> lnf;
    Matrix<T> af;
};

namespace {

template <typename T>
Matrix<T> sr_forward_impl(const Matrix<T>& z_t, int grid_w, int grid_h, T t, const BranchCache<T>* lr_cache,
                          const BranchCache<T>* ref_cache, const BranchWeights<T>& sr, const ModelConfig& cfg,
                          int ref_layers, T kscale, SrTape<T>* tape) {
    const int depth = sr.depth();
    if (lr_cache)
        require(lr_cache->depth() == depth, ErrorCode::DimensionMismatch, "LR cache depth differs from SR depth");
    require(ref_layers >= 0, ErrorCode::InvalidArgument, "ref_layers must be >= 0");
    const int ref_depth = ref_cache ? std::min(ref_layers, depth) : 0;
    if (ref_cache)
        require(ref_cache->depth() >= ref_depth, ErrorCode::DimensionMismatch,
                "reference cache shallower than ref_layers");

    Matrix<T> x = embed_tokens(z_t, grid_w, grid_h, t, sr, cfg);
    if (tape) {
        tape->z = z_t;
        tape->t = t;
        tape->blocks.assign(std::size_t(depth), {});
        tape->used_lr.assign(std::size_t(depth), false);
        tape->used_ref.assign(std::size_t(depth), false);
    }
    std::vector<KVSource<T>> ext;
    for (int l = 0; l < depth; ++l) {
        ext.clear();
        if (lr_cache) ext.push_back({&lr_cache->keys[std::size_t(l)], &lr_cache->values[std::size_t(l)], T(1)});
        const bool use_ref = l < ref_depth;
        if (use_ref) ext.push_back({&ref_cache->keys[std::size_t(l)], &ref_cache->values[std::size_t(l)], kscale});
        if (tape) {
            tape->used_lr[std::size_t(l)] = lr_cache != nullptr;
            tape->used_ref[std::size_t(l)] = use_ref;
        }
        x = block_forward<T>(x, sr.layers[std::size_t(l)], ext, cfg.heads, false,
                             tape ? &tape->blocks[std::size_t(l)] : nullptr, nullptr, nullptr);
    }
    Matrix<T> af = layer_norm(x, sr.lnf_g, sr.lnf_b, tape ? &tape->lnf : nullptr);
    Matrix<T> vel = af * sr.unembed_w;
    add_row(vel, sr.unembed_b);
    if (tape) tape->af = std::move(af);
    return vel;
}

template <typename T>
BranchCache<T> cache_forward_impl(const Matrix<T>& z, int grid_w, int grid_h, const BranchWeights<T>& w,
                                  const ModelConfig& cfg, int depth, BranchTape<T>* tape) {
    if (depth < 0) depth = w.depth();
    require(depth <= w.depth(), ErrorCode::DimensionMismatch, "requested cache deeper than the branch");
    BranchCache<T> cache;
    cache.keys.resize(std::size_t(depth));
    cache.values.resize(std::size_t(depth));
    if (tape) {
        tape->z = z;
        tape->blocks.assign(std::size_t(depth), {});
    }
    if (depth == 0) return cache;
    Matrix<T> x = embed_tokens(z, grid_w, grid_h, T(0), w, cfg);
    for (int l = 0; l < depth; ++l) {
        const bool last = l == depth - 1;
        Matrix<T> next = block_forward<T>(x, w.layers[std::size_t(l)], {}, cfg.heads, last,
                                          tape ? &tape->blocks[std::size_t(l)] : nullptr,
                                          &cache.keys[std::size_t(l)], &cache.values[std::size_t(l)]);
        if (!last) x = std::move(next);
    }
    return cache;
}

}  // namespace

template <typename T>
BranchCache<T> branch_forward_cache(const Matrix<T>& z, int grid_w, int grid_h, const BranchWeights<T>& weights,
                                    const ModelConfig& cfg, int depth) {
    return cache_forward_impl<T>(z, grid_w, grid_h, weights, cfg, depth, nullptr);
}

template <typename T>
Matrix<T> velocity_forward(const Matrix<T>& z_t, int grid_w, int grid_h, T t, const BranchCache<T>* lr_cache,
                           const BranchCache<T>* ref_cache, const BranchWeights<T>& sr, const ModelConfig& cfg,
                           int ref_layers, T kscale) {
    return sr_forward_impl<T>(z_t, grid_w, grid_h, t, lr_cache, ref_cache, sr, cfg, ref_layers, kscale, nullptr);
}

template <typename T>
SrForward<T> velocity_forward_taped(const Matrix<T>& z_t, int grid_w, int grid_h, T t, const BranchCache<T>* lr_cache,
                                    const BranchCache<T>* ref_cache, const BranchWeights<T>& sr,
                                    const ModelConfig& cfg, int ref_layers, T kscale) {
    SrForward<T> out;
    out.tape = std::make_shared<SrTape<T>>();
    out.velocity =
        sr_forward_impl<T>(z_t, grid_w, grid_h, t, lr_cache, ref_cache, sr, cfg, ref_layers, kscale, out.tape.get());
    return out;
}

template <typename T>
CacheForward<T> branch_forward_cache_taped(const Matrix<T>& z, int grid_w, int grid_h,
                                           const BranchWeights<T>& weights, const ModelConfig& cfg, int depth) {
    CacheForward<T> out;
    out.tape = std::make_shared<BranchTape<T>>();
    out.cache = cache_forward_impl<T>(z, grid_w, grid_h, weights, cfg, depth, out.tape.get());
    return out;
}

template <typename T>
void velocity_backward(const SrForward<T>& fwd, const Matrix<T>& d_velocity, const BranchWeights<T>& sr,
                       const ModelConfig& cfg, BranchWeights<T>* sr_grad, CacheGrad<T>* lr_grad,
                       CacheGrad<T>* ref_grad) {
    const SrTape<T>& tp = *fwd.tape;
    const int depth = sr.depth();
    if (sr_grad) {
        sr_grad->unembed_w.noalias() += tp.af.transpose() * d_velocity;
        sr_grad->unembed_b += d_velocity.colwise().sum();
    }
    const Matrix<T> daf = d_velocity * sr.unembed_w.transpose();
    Matrix<T> dx = layer_norm_backward(daf, sr.lnf_g, tp.lnf, sr_grad ? &sr_grad->lnf_g : nullptr,
                                       sr_grad ? &sr_grad->lnf_b : nullptr);
    if (lr_grad) {
        lr_grad->keys.assign(std::size_t(depth), Matrix<T>());
        lr_grad->values.assign(std::size_t(depth), Matrix<T>());
    }
    if (ref_grad) {
        int used = 0;
        for (bool b : tp.used_ref) used += b ? 1 : 0;
        ref_grad->keys.assign(std::size_t(used), Matrix<T>());
        ref_grad->values.assign(std::size_t(used), Matrix<T>());
    }
    for (int l = depth - 1; l >= 0; --l) {
        std::vector<std::pair<Matrix<T>*, Matrix<T>*>> d_ext;
        if (tp.used_lr[std::size_t(l)])
            d_ext.emplace_back(lr_grad ? &lr_grad->keys[std::size_t(l)] : nullptr,
                               lr_grad ? &lr_grad->values[std::size_t(l)] : nullptr);
        if (tp.used_ref[std::size_t(l)])
            d_ext.emplace_back(ref_grad ? &ref_grad->keys[std::size_t(l)] : nullptr,
                               ref_grad ? &ref_grad->values[std::size_t(l)] : nullptr);
        dx = block_backward<T>(dx, tp.blocks[std::size_t(l)], sr.layers[std::size_t(l)], cfg.heads,
                               sr_grad ? &sr_grad->layers[std::size_t(l)] : nullptr, nullptr, nullptr, d_ext);
    }
    if (sr_grad) embed_backward(dx, tp.z, tp.t, cfg, *sr_grad);
}

template <typename T>
void branch_cache_backward(const CacheForward<T>& fwd, const CacheGrad<T>& d_cache, const BranchWeights<T>& weights,
                           const ModelConfig& cfg, BranchWeights<T>& grad) {
    const BranchTape<T>& tp = *fwd.tape;
    const int depth = int(tp.blocks.size());
    require(int(d_cache.keys.size()) == depth && int(d_cache.values.size()) == depth, ErrorCode::DimensionMismatch,
            "cache gradient depth");
    if (depth == 0) return;
    Matrix<T> dx;
    for (int l = depth - 1; l >= 0; --l) {
        const Matrix<T>* dk = d_cache.keys[std::size_t(l)].size() ? &d_cache.keys[std::size_t(l)] : nullptr;
        const Matrix<T>* dv = d_cache.values[std::size_t(l)].size() ? &d_cache.values[std::size_t(l)] : nullptr;
        dx = block_backward<T>(dx, tp.blocks[std::size_t(l)], weights.layers[std::size_t(l)], cfg.heads,
                               &grad.layers[std::size_t(l)], dk, dv, {});
    }
    embed_backward(dx, tp.z, T(0), cfg, grad);
}

// ---------------------------------------------------------------------------
// sampling

template <typename T>
Matrix<T> euler_integrate(Matrix<T> z, int steps, const std::function<Matrix<T>(const Matrix<T>&, T)>& velocity) {
    require(steps >= 1, ErrorCode::InvalidArgument, "steps must be >= 1");
    const T dt = T(1) / T(steps);
    for (int k = steps; k >= 1; --k) {
        const T t = T(k) / T(steps);
        z -= dt * velocity(z, t);
    }
    return z;
}

template <typename T>
Matrix<T> gaussian_latent(int rows, int cols, std::uint64_t seed, std::uint64_t stream) {
    RngState rng(seed, stream);
    Matrix<T> m(rows, cols);
    for (int i = 0; i < m.size(); ++i) m.data()[i] = T(rng.normal());
    return m;
}

LatentGrid euler_sample(const BranchCache<float>& lr_cache, const BranchCache<float>* ref_cache,
                        const BranchWeights<float>& sr, const ModelConfig& cfg, int grid_w, int grid_h,
                        std::uint64_t seed) {
    cfg.validate();
    LatentGrid z;
    z.grid_w = grid_w;
    z.grid_h = grid_h;
    const float kscale = float(cfg.kscale);
    z.tokens = euler_integrate<float>(gaussian_latent<float>(grid_w * grid_h, cfg.dim, seed), cfg.sample_steps,
                                      [&](const Matrix<float>& zt, float t) {
                                          return velocity_forward<float>(zt, grid_w, grid_h, t, &lr_cache, ref_cache,
                                                                         sr, cfg, cfg.ref_layers, kscale);
                                      });
    return z;
}

Image super_resolve(const Image& lr_up, const Image* aligned_ref, const ModelWeights& model, const PatchCodec& codec,
                    std::uint64_t seed) {
    const ModelConfig& cfg = model.config;
    cfg.validate();
    const LatentGrid z_lr = codec.encode(lr_up);
    const BranchCache<float> lr_cache =
        branch_forward_cache<float>(z_lr.tokens, z_lr.grid_w, z_lr.grid_h, model.lr, cfg);
    std::optional<BranchCache<float>> ref_cache;
    if (aligned_ref && cfg.ref_layers > 0) {
        require(model.ref.has_value(), ErrorCode::MissingCheckpoint, "reference branch weights not loaded");
        require(aligned_ref->same_shape(lr_up), ErrorCode::DimensionMismatch,
                "aligned reference must match the LR input size");
        require(cfg.ref_layers <= model.ref->depth(), ErrorCode::DimensionMismatch,
                "ref_layers exceeds the trained reference branch depth");
        const LatentGrid z_ref = codec.encode(*aligned_ref);
        ref_cache = branch_forward_cache<float>(z_ref.tokens, z_ref.grid_w, z_ref.grid_h, *model.ref, cfg,
                                                cfg.ref_layers);
    }
    const LatentGrid z = euler_sample(lr_cache, ref_cache ? &*ref_cache : nullptr, model.sr, cfg, z_lr.grid_w,
                                      z_lr.grid_h, seed);
    return clamp01(codec.decode(z));
}

// ---------------------------------------------------------------------------
// checkpoints

namespace {
constexpr char kCkptMagic[8] = {'R', 'S', 'R', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint32_t kCkptVersion = 1;
}  // namespace

void save_checkpoint(const BranchWeights<float>& w, const ModelConfig& cfg, const std::filesystem::path& path,
                     const std::string& run_echo) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorCode::Unwritable, path.string());
    out.write(kCkptMagic, sizeof(kCkptMagic));
    binio::put_u32(out, kCkptVersion);
    KeyValueConfig text = cfg.to_kv();
    if (!run_echo.empty()) text.merge(KeyValueConfig::parse(run_echo), "run");
    binio::put_string(out, text.to_string());
    binio::put_string(out, std::string(to_string(w.kind)));
    binio::put_u32(out, std::uint32_t(w.depth()));
    std::uint32_t count = 0;
    w.for_each([&](const std::string&, const Matrix<float>&) { ++count; });
    binio::put_u32(out, count);
    w.for_each([&](const std::string& name, const Matrix<float>& m) {
        binio::put_string(out, name);
        binio::put_u32(out, std::uint32_t(m.rows()));
        binio::put_u32(out, std::uint32_t(m.cols()));
        binio::put_floats(out, std::span<const float>(m.data(), std::size_t(m.size())));
    });
    if (!out) fail(ErrorCode::Unwritable, path.string());
}

BranchWeights<float> load_checkpoint(const std::filesystem::path& path, ModelConfig* cfg_out) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::MissingCheckpoint, path.string());
    char magic[8];
    binio::read_exact(in, magic, sizeof(magic));
    if (std::memcmp(magic, kCkptMagic, sizeof(magic)) != 0) fail(ErrorCode::UnsupportedFormat, "not a checkpoint");
    if (binio::get_u32(in) != kCkptVersion) fail(ErrorCode::UnsupportedFormat, "checkpoint version");
    const ModelConfig cfg = ModelConfig::from_kv(KeyValueConfig::parse(binio::get_string(in)));
    BranchWeights<float> w;
    w.kind = parse_kind(binio::get_string(in));
    const std::uint32_t depth = binio::get_u32(in);
    if (depth > 1024) fail(ErrorCode::CorruptFile, "checkpoint depth");
    w.layers.resize(depth);
    const std::uint32_t count = binio::get_u32(in);
    std::map<std::string, Matrix<float>> tensors;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string name = binio::get_string(in, 256);
        const std::uint32_t rows = binio::get_u32(in), cols = binio::get_u32(in);
        if (rows > (1u << 16) || cols > (1u << 16)) fail(ErrorCode::CorruptFile, "tensor shape " + name);
        Matrix<float> m(rows, cols);
        for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = binio::get_f32(in);
        tensors[name] = std::move(m);
    }
    w.for_each([&](const std::string& name, Matrix<float>& m) {
        const auto it = tensors.find(name);
        if (it == tensors.end()) fail(ErrorCode::CorruptFile, "checkpoint lacks tensor " + name);
        m = std::move(it->second);
    });
    if (cfg_out) *cfg_out = cfg;
    return w;
}

// ---------------------------------------------------------------------------
// explicit instantiations

#define REFSR_FLOW_INSTANTIATE(T)                                                                                  \
    template BranchWeights<T> init_branch<T>(const ModelConfig&, BranchKind, int, std::uint64_t, bool);            \
    template Matrix<T> multi_source_attention<T>(const Matrix<T>&, std::span<const KVSource<T>>, int,              \
                                                 AttentionTape<T>*);                                               \
    template Matrix<T> patch_ref_attention<T>(const Matrix<T>&, const Matrix<T>&, const Matrix<T>&,                \
                                              const Matrix<T>*, const Matrix<T>*, const Matrix<T>*,                \
                                              const Matrix<T>*, T, int);                                           \
    template BranchCache<T> branch_forward_cache<T>(const Matrix<T>&, int, int, const BranchWeights<T>&,           \
                                                    const ModelConfig&, int);                                      \
    template Matrix<T> velocity_forward<T>(const Matrix<T>&, int, int, T, const BranchCache<T>*,                   \
                                           const BranchCache<T>*, const BranchWeights<T>&, const ModelConfig&,     \
                                           int, T);                                                                \
    template SrForward<T> velocity_forward_taped<T>(const Matrix<T>&, int, int, T, const BranchCache<T>*,          \
                                                    const BranchCache<T>*, const BranchWeights<T>&,                \
                                                    const ModelConfig&, int, T);                                   \
    template CacheForward<T> branch_forward_cache_taped<T>(const Matrix<T>&, int, int, const BranchWeights<T>&,    \
                                                           const ModelConfig&, int);                               \
    template void velocity_backward<T>(const SrForward<T>&, const Matrix<T>&, const BranchWeights<T>&,             \
                                       const ModelConfig&, BranchWeights<T>*, CacheGrad<T>*, CacheGrad<T>*);       \
    template void branch_cache_backward<T>(const CacheForward<T>&, const CacheGrad<T>&, const BranchWeights<T>&,   \
                                           const ModelConfig&, BranchWeights<T>&);                                 \
    template Matrix<T> euler_integrate<T>(Matrix<T>, int, const std::function<Matrix<T>(const Matrix<T>&, T)>&);   \
    template Matrix<T> gaussian_latent<T>(int, int, std::uint64_t, std::uint64_t);

REFSR_FLOW_INSTANTIATE(float)
REFSR_FLOW_INSTANTIATE(double)

#undef REFSR_FLOW_INSTANTIATE

}  // namespace refsr::flow

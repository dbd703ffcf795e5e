#pragma once

// Cross-domain masked autoencoder. Token embeddings from the segmentation
// backbone are masked at ratio rho, run through a 12-block encoder (visible
// tokens only), restored with a learned mask token, and decoded twice: a
// 4-block feature decoder reconstructs the embedding, a per-token linear head
// reconstructs the segmented image. Training aligns domains with a
// linear-kernel MMD on GAP+projected decoded features.

#include <cmath>
#include <string>
#include <vector>

#include "dorl/dataset.hpp"
#include "dorl/vit.hpp"

namespace dorl {

struct CAEConfig {
    int64_t grid = 14;  // token grid side; T = grid^2
    int64_t embed_dim = 192;
    int64_t heads = 3;
    int64_t enc_depth = 12;
    int64_t dec_depth = 4;
    int64_t proj_dim = 64;   // MMD projection head output width
    int64_t patch_size = 16; // image decoder patch geometry
    int64_t channels = 3;
    double mask_ratio = 0.75;

    int64_t tokens() const { return grid * grid; }
    int64_t image_size() const { return grid * patch_size; }
    int64_t patch_dim() const { return patch_size * patch_size * channels; }

    void validate() const {
        if (grid < 1 || embed_dim < 1 || enc_depth < 1 || dec_depth < 1 || proj_dim < 1)
            throw ConfigError("cae: dimensions must be positive");
        if (embed_dim % heads != 0) throw ConfigError("cae: heads must divide embed_dim");
        if (mask_ratio < 0.0 || mask_ratio >= 1.0) throw ConfigError("cae: mask ratio must lie in [0, 1)");
    }

    static CAEConfig from_vit(const ViTConfig& v) {
        CAEConfig c;
        c.grid = v.grid();
        c.embed_dim = v.embed_dim;
        c.heads = v.heads;
        c.patch_size = v.patch_size;
        return c;
    }
};

namespace cae_detail {

// transformer-stack geometry reused from the vit module; patch embedding is
// never created (the CAE consumes token grids, not raw images)
inline ViTConfig stack_cfg(const CAEConfig& cfg, int64_t depth) {
    ViTConfig v;
    v.image_size = cfg.grid * cfg.patch_size;
    v.patch_size = cfg.patch_size;
    v.embed_dim = cfg.embed_dim;
    v.heads = cfg.heads;
    v.depth = depth;
    return v;
}

}  // namespace cae_detail

template <typename T>
struct MaskedBatchT {
    TensorData<T> visible;  // [V, D], original row-major order preserved
    std::vector<int64_t> visible_idx, masked_idx;  // sorted, disjoint, cover 0..T-1
    double ratio = 0.0;
    int64_t grid_h = 0, grid_w = 0;
};

// uniformly random subset of round(rho*T) masked tokens, deterministic per
// (seed, sample id)
template <typename T>
MaskedBatchT<T> mask_patches(const TensorData<T>& e, double rho, uint64_t seed, const std::string& sample_id,
                             int64_t grid_h, int64_t grid_w) {
    if (rho < 0.0 || rho >= 1.0) throw ConfigError("mask_patches: rho must lie in [0, 1)");
    if (e.shape().size() != 2) throw ShapeError("mask_patches: token grid must be [T, D]");
    const int64_t t = e.rows();
    if (grid_h * grid_w != t) throw ShapeError("mask_patches: grid does not match token count");
    const int64_t n_masked = (int64_t)std::llround(rho * (double)t);

    std::vector<int64_t> order(t);
    for (int64_t i = 0; i < t; ++i) order[i] = i;
    Rng rng(seed, "cae.mask." + sample_id);
    for (int64_t i = t; i > 1; --i) std::swap(order[i - 1], order[rng.below((uint64_t)i)]);

    MaskedBatchT<T> b;
    b.ratio = rho;
    b.grid_h = grid_h;
    b.grid_w = grid_w;
    b.masked_idx.assign(order.begin(), order.begin() + n_masked);
    b.visible_idx.assign(order.begin() + n_masked, order.end());
    std::sort(b.masked_idx.begin(), b.masked_idx.end());
    std::sort(b.visible_idx.begin(), b.visible_idx.end());
    b.visible = TensorData<T>({t - n_masked, e.cols()});
    for (size_t r = 0; r < b.visible_idx.size(); ++r) b.visible.mat().row((int64_t)r) = e.mat().row(b.visible_idx[r]);
    return b;
}

template <typename T>
struct CAEModelT {
    CAEConfig cfg;
    ParamStore<T> params;
    bool fitted = false;  // set by train_cae or checkpoint load
};

using CAEModel = CAEModelT<float>;

template <typename T>
CAEModelT<T> init_cae_model(const CAEConfig& cfg, uint64_t seed) {
    cfg.validate();
    CAEModelT<T> m;
    m.cfg = cfg;
    init_vit_params(m.params, cae_detail::stack_cfg(cfg, cfg.enc_depth), "cae.enc", seed, /*frozen=*/false,
                    cfg.channels, /*with_patch_embed=*/false);
    init_vit_params(m.params, cae_detail::stack_cfg(cfg, cfg.dec_depth), "cae.dec_feat", seed + 1, /*frozen=*/false,
                    cfg.channels, /*with_patch_embed=*/false);
    Rng rng(seed, "cae.init");
    auto gauss = [&](Shape s, double std) {
        TensorData<T> t(std::move(s));
        t.fill_gaussian(rng, (T)std);
        return t;
    };
    m.params.add("cae.mask_token", gauss({1, cfg.embed_dim}, 0.02));
    m.params.add("cae.dec_img.w", gauss({cfg.embed_dim, cfg.patch_dim()}, 1.0 / std::sqrt((double)cfg.embed_dim)));
    m.params.add("cae.dec_img.b", TensorData<T>({cfg.patch_dim()}));
    m.params.add("cae.proj.w", gauss({cfg.embed_dim, cfg.proj_dim}, 1.0 / std::sqrt((double)cfg.embed_dim)));
    m.params.add("cae.proj.b", TensorData<T>({cfg.proj_dim}));
    return m;
}

// encoder over visible tokens only; compute scales with V, not T
template <typename T>
Var<T> cae_encode(const MaskedBatchT<T>& batch, const CAEConfig& cfg, ParamCtx<T>& P) {
    if (batch.visible.cols() != cfg.embed_dim) throw ShapeError("cae_encode: token width mismatch");
    Var<T> x = add(constant<T>(batch.visible), gather_rows(P("cae.enc.pos_embed"), batch.visible_idx));
    for (int64_t i = 0; i < cfg.enc_depth; ++i)
        x = block_forward(x, P, "cae.enc.block" + std::to_string(i), cfg.heads);
    return layer_norm(x, P("cae.enc.ln_f.g"), P("cae.enc.ln_f.b"));
}

// restore the full grid: z rows at visible slots, mask token + positional
// embedding of the slot elsewhere; then 4 decoder blocks
template <typename T>
Var<T> decode_features(const Var<T>& z, const MaskedBatchT<T>& batch, const CAEConfig& cfg, ParamCtx<T>& P) {
    const int64_t t = cfg.tokens(), d = cfg.embed_dim;
    if (z->value.rows() + (int64_t)batch.masked_idx.size() != t)
        throw ShapeError("decode_features: visible + masked must cover the grid");
    Var<T> x = scatter_rows(z, batch.visible_idx, t, P("cae.mask_token"));
    if (!batch.masked_idx.empty()) {
        Var<T> pos_masked = gather_rows(P("cae.dec_feat.pos_embed"), batch.masked_idx);
        Var<T> zero_row = constant<T>(TensorData<T>({1, d}));
        x = add(x, scatter_rows(pos_masked, batch.masked_idx, t, zero_row));
    }
    for (int64_t i = 0; i < cfg.dec_depth; ++i)
        x = block_forward(x, P, "cae.dec_feat.block" + std::to_string(i), cfg.heads);
    return layer_norm(x, P("cae.dec_feat.ln_f.g"), P("cae.dec_feat.ln_f.b"));
}

namespace cae_detail {

// for each pixel-grid element, the index of its source in the [T, p^2*C]
// patch layout (inverse of patchify's flattening)
inline std::vector<int64_t> unpatchify_map(const CAEConfig& cfg) {
    const int64_t p = cfg.patch_size, g = cfg.grid, c = cfg.channels, hw = cfg.image_size();
    std::vector<int64_t> src(hw * hw * c);
    for (int64_t y = 0; y < hw; ++y)
        for (int64_t x = 0; x < hw; ++x)
            for (int64_t ch = 0; ch < c; ++ch) {
                int64_t token = (y / p) * g + (x / p);
                int64_t within = ((y % p) * p + (x % p)) * c + ch;
                src[(y * hw + x) * c + ch] = token * (p * p * c) + within;
            }
    return src;
}

}  // namespace cae_detail

// per-token linear head to patch pixels, sigmoid to [0,1], reassembled
// row-major into [H, W, C]
template <typename T>
Var<T> decode_image(const Var<T>& m, const CAEConfig& cfg, ParamCtx<T>& P) {
    if (m->value.rows() != cfg.tokens() || m->value.cols() != cfg.embed_dim)
        throw ShapeError("decode_image: expected full grid [T, D]");
    Var<T> patches = sigmoid(add_rowvec(matmul(m, P("cae.dec_img.w")), P("cae.dec_img.b")));
    const int64_t hw = cfg.image_size();
    return permute_elems(patches, cae_detail::unpatchify_map(cfg), {hw, hw, cfg.channels});
}

// Eq. 7: mean squared error over all T*D entries; e is a cached constant, so
// no gradient flows toward the frozen segmentation backbone
template <typename T>
Var<T> loss_rec(const TensorData<T>& e, const Var<T>& m) {
    if (!m->value.same_shape(e)) throw ShapeError("loss_rec: shape mismatch");
    return mean(square(sub(m, constant<T>(e.clone()))));
}

// GAP over tokens, then the linear projection head (used only inside L_mmd)
template <typename T>
Var<T> gap_project(const Var<T>& tokens, ParamCtx<T>& P) {
    return add_rowvec(matmul(mean_rows(tokens), P("cae.proj.w")), P("cae.proj.b"));
}

// linear-kernel MMD: squared Euclidean norm of the difference of projected
// feature means
template <typename T>
Var<T> loss_mmd(const std::vector<Var<T>>& src, const std::vector<Var<T>>& tgt, ParamCtx<T>& P) {
    if (src.empty() || tgt.empty()) throw DataError("loss_mmd: empty source or target set");
    auto side_mean = [&](const std::vector<Var<T>>& side) {
        Var<T> acc = gap_project(side[0], P);
        for (size_t i = 1; i < side.size(); ++i) acc = add(acc, gap_project(side[i], P));
        return scale(acc, T(1) / T(side.size()));
    };
    return sum(square(sub(side_mean(src), side_mean(tgt))));
}

// 1 - SSIM with one global statistic set per channel, averaged over channels;
// c1 = 0.01^2, c2 = 0.03^2 for dynamic range 1
template <typename T>
Var<T> loss_ssim(const Var<T>& h, const Var<T>& c) {
    if (!h->value.same_shape(c->value)) throw ShapeError("loss_ssim: shape mismatch");
    if (h->value.shape().size() != 3) throw ShapeError("loss_ssim: images must be [H, W, C]");
    for (int64_t i = 0; i < h->value.numel(); ++i)
        if (h->value[i] < T(0) || h->value[i] > T(1) || c->value[i] < T(0) || c->value[i] > T(1))
            throw DataError("loss_ssim: pixel values outside [0, 1]");
    const T c1 = T(0.01) * T(0.01), c2 = T(0.03) * T(0.03);
    const int64_t ch_n = h->value.shape()[2];
    const int64_t px = h->value.shape()[0] * h->value.shape()[1];
    Var<T> hm = reshape(h, {px, ch_n});
    Var<T> cm = reshape(c, {px, ch_n});
    Var<T> acc;
    for (int64_t ch = 0; ch < ch_n; ++ch) {
        Var<T> a = slice_cols(hm, ch, 1);
        Var<T> b = slice_cols(cm, ch, 1);
        Var<T> mu_a = mean(a), mu_b = mean(b);
        Var<T> cov = sub(mean(mul(a, b)), mul(mu_a, mu_b));
        Var<T> num = mul(add_scalar(scale(mul(mu_a, mu_b), T(2)), c1), add_scalar(scale(cov, T(2)), c2));
        Var<T> den =
            mul(add_scalar(add(square(mu_a), square(mu_b)), c1), add_scalar(add(variance(a), variance(b)), c2));
        Var<T> s = div(num, den);
        acc = acc ? add(acc, s) : s;
    }
    return add_scalar(neg(scale(acc, T(1) / T(ch_n))), T(1));
}

struct LossBreakdown {
    double l_rec = 0, l_mmd = 0, l_ssim = 0;
    double l_rmmd = 0, total = 0;
    double beta = 0, lambda = 0;
};

// Eq. 6 + Eq. 10: l_rmmd = beta*l_rec + l_mmd; total = l_ssim + lambda*l_rmmd
inline LossBreakdown total_loss(double l_ssim, double l_rec, double l_mmd, double beta, double lambda) {
    if (beta < 0 || lambda < 0) throw ConfigError("total_loss: weights must be non-negative");
    LossBreakdown b;
    b.l_rec = l_rec;
    b.l_mmd = l_mmd;
    b.l_ssim = l_ssim;
    b.beta = beta;
    b.lambda = lambda;
    b.l_rmmd = beta * l_rec + l_mmd;
    b.total = l_ssim + lambda * b.l_rmmd;
    return b;
}

// s_i: GAP of the encoder's output over ALL tokens (rho = 0 pass); pure in
// (embedding, encoder params), no RNG involved
template <typename T>
TensorData<T> extract_features(const TensorData<T>& e, CAEModelT<T>& model) {
    if (!model.fitted) throw ModelStateError("extract_features: CAE has not been trained or loaded");
    const CAEConfig& cfg = model.cfg;
    if (e.rows() != cfg.tokens() || e.cols() != cfg.embed_dim)
        throw ShapeError("extract_features: embedding " + shape_str(e.shape()) + " does not match config");
    MaskedBatchT<T> full;
    full.visible = e.clone();
    full.visible_idx.resize(cfg.tokens());
    for (int64_t i = 0; i < cfg.tokens(); ++i) full.visible_idx[i] = i;
    full.grid_h = full.grid_w = cfg.grid;
    ParamCtx<T> P(model.params, /*train=*/false);
    Var<T> z = cae_encode(full, cfg, P);
    TensorData<T> s({cfg.embed_dim});
    s.vec() = z->value.mat().colwise().mean().transpose();
    return s;
}

// one training sample: cached embedding e_i plus the segmented image c_i
// (8-bit, as post-processed by the segmentation stage)
struct CAESample {
    std::string id;
    TensorData<float> embedding;  // [T, D]
    std::vector<uint8_t> image;   // HWC; empty = missing c_i (data error)
};

struct CAEDomain {
    std::string name;
    std::vector<CAESample> samples;
};

struct CAETrainConfig {
    double beta = 0.5;
    double lambda = 2.0;
    double rho = 0.75;
    int64_t epochs = 10;
    int64_t batch_per_domain = 16;
    // ablation toggles: zero a weight to drop that loss term from the
    // training objective (the logged trace still reports all raw values)
    double w_mmd = 1.0;
    double w_ssim = 1.0;
    bool rec_masked_only = false;
    AdamWConfig adamw;
    uint64_t seed = 0;
};

// unsupervised training over >= 2 domains; each step pairs two domains
// (round-robin over unordered pairs), draws a half-batch from each, and
// optimizes w_ssim*L_ssim + lambda*(beta*L_rec + w_mmd*L_mmd)
std::vector<LossBreakdown> train_cae(CAEModel& model, const std::vector<CAEDomain>& domains,
                                     const CAETrainConfig& cfg);

}  // namespace dorl

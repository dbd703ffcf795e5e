#pragma once

// LoRA-adapted segmentation model: a frozen ViT backbone with trainable
// low-rank adapters on every block's query and value projections, plus a
// lightweight mask decoder (one learned query token, two cross-attention
// blocks, a per-patch logit head upsampled bilinearly to the pixel grid).

#include "dorl/dataset.hpp"
#include "dorl/vit.hpp"

namespace dorl {

struct SegConfig {
    ViTConfig vit;
    int64_t lora_rank = 4;
    double lora_scale = 1.0;
    int64_t decoder_blocks = 2;
};

// A ~ Gaussian(0, 1/C_in), B = 0 so the adapter starts as an exact no-op.
template <typename T>
std::pair<TensorData<T>, TensorData<T>> init_lora(int64_t r, int64_t c_in, int64_t c_out, uint64_t seed) {
    if (r < 1) throw ConfigError("lora: rank must be >= 1");
    if (r > std::min(c_in, c_out) / 4)
        throw ConfigError("lora: rank " + std::to_string(r) + " too large for dims " + std::to_string(c_in) + "x" +
                          std::to_string(c_out));
    Rng rng(seed, "lora.init");
    TensorData<T> a({r, c_in});
    a.fill_gaussian(rng, (T)(1.0 / std::sqrt((double)c_in)));
    TensorData<T> b({c_out, r});
    return {std::move(a), std::move(b)};
}

// (W + s B A) x computed as W x + s B (A x); B A is never materialized.
template <typename T>
TensorData<T> lora_forward(const TensorData<T>& x, const TensorData<T>& w, const TensorData<T>& a,
                           const TensorData<T>& b, T s) {
    if (x.shape().size() != 1 || w.shape().size() != 2 || w.shape()[1] != x.numel())
        throw ShapeError("lora_forward: W " + shape_str(w.shape()) + " vs x " + shape_str(x.shape()));
    if (a.shape()[1] != x.numel() || b.shape()[1] != a.shape()[0] || b.shape()[0] != w.shape()[0])
        throw ShapeError("lora_forward: adapter shape mismatch");
    TensorData<T> out({w.shape()[0]});
    Eigen::Matrix<T, Eigen::Dynamic, 1> ax = a.mat() * x.vec();
    out.vec() = w.mat() * x.vec() + s * (b.mat() * ax);
    return out;
}

template <typename T>
struct SegModelT {
    SegConfig cfg;
    ParamStore<T> params;
    std::vector<LoraNames> lora_q, lora_v;
    bool fitted = false;  // set after train_seg or checkpoint load
};

using SegModel = SegModelT<float>;

template <typename T>
SegModelT<T> init_seg_model(const SegConfig& cfg, uint64_t seed) {
    cfg.vit.validate();
    SegModelT<T> m;
    m.cfg = cfg;
    init_vit_params(m.params, cfg.vit, "vit", seed, /*frozen=*/true);
    const int64_t d = cfg.vit.embed_dim;
    for (int64_t i = 0; i < cfg.vit.depth; ++i) {
        for (const char* which : {"q", "v"}) {
            auto [a, b] = init_lora<T>(cfg.lora_rank, d, d, Rng(seed, "seg.adapter", (uint64_t)i * 2 + (*which == 'v')).next_u64());
            std::string base = "seg.adapter.block" + std::to_string(i) + "." + which;
            m.params.add(base + ".A", std::move(a));
            m.params.add(base + ".B", std::move(b));
            LoraNames ln{base + ".A", base + ".B", cfg.lora_scale};
            if (*which == 'q')
                m.lora_q.push_back(ln);
            else
                m.lora_v.push_back(ln);
        }
    }
    // mask decoder
    Rng rng(seed, "seg.decoder");
    auto gauss = [&](Shape s, double std) {
        TensorData<T> t(std::move(s));
        t.fill_gaussian(rng, (T)std);
        return t;
    };
    auto zeros = [](Shape s) { return TensorData<T>(std::move(s)); };
    auto ones = [](Shape s) {
        TensorData<T> t(std::move(s));
        t.fill(T(1));
        return t;
    };
    m.params.add("seg.decoder.query", gauss({1, d}, 0.02));
    for (int64_t j = 0; j < cfg.decoder_blocks; ++j) {
        std::string bp = "seg.decoder.block" + std::to_string(j);
        m.params.add(bp + ".ln_q.g", ones({d}));
        m.params.add(bp + ".ln_q.b", zeros({d}));
        for (const char* w : {"q", "k", "v", "o"}) {
            m.params.add(bp + "." + w + ".w", gauss({d, d}, 0.02));
            m.params.add(bp + "." + w + ".b", zeros({d}));
        }
        m.params.add(bp + ".ln2.g", ones({d}));
        m.params.add(bp + ".ln2.b", zeros({d}));
        m.params.add(bp + ".mlp1.w", gauss({d, 4 * d}, 0.02));
        m.params.add(bp + ".mlp1.b", zeros({4 * d}));
        m.params.add(bp + ".mlp2.w", gauss({4 * d, d}, 0.02));
        m.params.add(bp + ".mlp2.b", zeros({d}));
    }
    m.params.add("seg.decoder.head.w", gauss({d, d}, 0.02));
    m.params.add("seg.decoder.head.b", zeros({1}));
    return m;
}

// 1-d bilinear interpolation matrix [out, in] (align-corners endpoints)
template <typename T>
TensorData<T> bilinear_matrix(int64_t out, int64_t in) {
    TensorData<T> m({out, in});
    if (in == 1) {
        m.fill(T(1));
        return m;
    }
    for (int64_t o = 0; o < out; ++o) {
        double pos = double(o) * double(in - 1) / double(out - 1);
        int64_t lo = (int64_t)pos;
        if (lo >= in - 1) lo = in - 2;
        double frac = pos - (double)lo;
        m[o * in + lo] = (T)(1.0 - frac);
        m[o * in + lo + 1] = (T)frac;
    }
    return m;
}

template <typename T>
struct SegOutputT {
    TokenGrid<T> embedding;       // e_i, [T, D]
    Var<T> mask_probs;            // [H, W] in [0,1]
    TensorData<T> binary_mask;    // thresholded at 0.5
};

// forward through frozen backbone + adapters, then the mask decoder
template <typename T>
SegOutputT<T> segment(const TensorData<T>& image, SegModelT<T>& model, ParamCtx<T>& P) {
    const SegConfig& cfg = model.cfg;
    if (!model.params.has("seg.decoder.query")) throw ModelStateError("segment: decoder parameters missing");
    TokenGrid<T> e = encode_image(image, cfg.vit, P, "vit", &model.lora_q, &model.lora_v);
    Var<T> tokens = e.tokens;
    Var<T> q = P("seg.decoder.query");
    const int64_t d = cfg.vit.embed_dim;
    const T inv_sqrt_d = T(1) / std::sqrt((T)d);
    for (int64_t j = 0; j < cfg.decoder_blocks; ++j) {
        std::string bp = "seg.decoder.block" + std::to_string(j);
        Var<T> h = layer_norm(q, P(bp + ".ln_q.g"), P(bp + ".ln_q.b"));
        Var<T> qq = add_rowvec(matmul(h, P(bp + ".q.w")), P(bp + ".q.b"));
        Var<T> kk = add_rowvec(matmul(tokens, P(bp + ".k.w")), P(bp + ".k.b"));
        Var<T> vv = add_rowvec(matmul(tokens, P(bp + ".v.w")), P(bp + ".v.b"));
        Var<T> attn = softmax(scale(matmul(qq, transpose(kk)), inv_sqrt_d));
        Var<T> out = add_rowvec(matmul(matmul(attn, vv), P(bp + ".o.w")), P(bp + ".o.b"));
        q = add(q, out);
        Var<T> h2 = layer_norm(q, P(bp + ".ln2.g"), P(bp + ".ln2.b"));
        q = add(q, add_rowvec(matmul(gelu(add_rowvec(matmul(h2, P(bp + ".mlp1.w")), P(bp + ".mlp1.b"))),
                                     P(bp + ".mlp2.w")),
                              P(bp + ".mlp2.b")));
    }
    // per-patch logit = <token, head(query)> + bias, bilinear to pixel grid
    Var<T> probe = matmul(q, P("seg.decoder.head.w"));  // [1, D]
    Var<T> logits = matmul(tokens, transpose(probe));   // [T, 1]
    Var<T> bias = P("seg.decoder.head.b");
    logits = add_rowvec(logits, bias);
    const int64_t g = cfg.vit.grid(), hpx = cfg.vit.image_size;
    Var<T> grid = reshape(logits, {g, g});
    Var<T> up = constant<T>(bilinear_matrix<T>(hpx, g));
    Var<T> pix = matmul(matmul(up, grid), transpose(up));  // [H, W]
    Var<T> probs = sigmoid(pix);

    SegOutputT<T> out;
    out.embedding = e;
    out.mask_probs = probs;
    out.binary_mask = TensorData<T>({hpx, hpx});
    for (int64_t i = 0; i < out.binary_mask.numel(); ++i) out.binary_mask[i] = probs->value[i] >= T(0.5) ? T(1) : T(0);
    return out;
}

// keep masked pixels, set everything else to mid-gray 128/255
template <typename T>
TensorData<T> postprocess(const TensorData<T>& image, const TensorData<T>& mask) {
    if (image.shape().size() != 3 || mask.shape().size() != 2 || image.shape()[0] != mask.shape()[0] ||
        image.shape()[1] != mask.shape()[1])
        throw ShapeError("postprocess: mask shape must match image spatial shape");
    const T fill = (T)(128.0 / 255.0);
    TensorData<T> out(image.shape());
    const int64_t c = image.shape()[2];
    for (int64_t p = 0; p < mask.numel(); ++p) {
        bool keep = mask[p] != T(0);
        for (int64_t ch = 0; ch < c; ++ch) out[p * c + ch] = keep ? image[p * c + ch] : fill;
    }
    return out;
}

inline std::vector<uint8_t> postprocess_u8(const ImageSample& s, const std::vector<uint8_t>& mask) {
    std::vector<uint8_t> out(s.pixels.size());
    for (int64_t p = 0; p < (int64_t)mask.size(); ++p)
        for (int64_t ch = 0; ch < s.channels; ++ch)
            out[p * s.channels + ch] = mask[p] ? s.pixels[p * s.channels + ch] : 128;
    return out;
}

// mean of binary cross-entropy and soft-Dice (smoothing 1)
template <typename T>
Var<T> seg_loss(const Var<T>& probs, const TensorData<T>& truth) {
    if (!probs->value.same_shape(truth)) throw ShapeError("seg_loss: shape mismatch");
    for (int64_t i = 0; i < probs->value.numel(); ++i) {
        if (probs->value[i] < T(0) || probs->value[i] > T(1)) throw DataError("seg_loss: probs outside [0,1]");
        if (truth[i] != T(0) && truth[i] != T(1)) throw DataError("seg_loss: truth must be binary");
    }
    const T eps = (T)1e-7;
    Var<T> t = constant<T>(truth);
    Var<T> one_minus_t = add_scalar(neg(t), T(1));
    // clamp into [eps, 1-eps] so a perfect prediction stays >= 0
    Var<T> p = add_scalar(scale(probs, T(1) - 2 * eps), eps);
    Var<T> bce = neg(mean(add(mul(t, log_op(p)), mul(one_minus_t, log_op(add_scalar(neg(p), T(1)))))));
    Var<T> inter = sum(mul(probs, t));
    Var<T> denom = add(sum(probs), sum(t));
    Var<T> dice = add_scalar(neg(div(add_scalar(scale(inter, T(2)), T(1)), add_scalar(denom, T(1)))), T(1));
    return scale(add(bce, dice), T(0.5));
}

template <typename T>
double dice_coefficient(const TensorData<T>& pred, const TensorData<T>& truth) {
    double inter = 0, total = 0;
    for (int64_t i = 0; i < pred.numel(); ++i) {
        inter += (pred[i] != T(0) && truth[i] != T(0)) ? 1 : 0;
        total += (pred[i] != T(0)) + (truth[i] != T(0));
    }
    return total == 0 ? 1.0 : 2.0 * inter / total;
}

struct SegTrainConfig {
    double annotated_fraction = 0.01;
    int64_t epochs = 85;
    AdamWConfig adamw;  // lr 5e-4, wd 0.05
    uint64_t seed = 0;
};

struct SegTrainResult {
    std::vector<double> epoch_loss;
    std::vector<std::string> annotated_ids;
};

// fine-tunes adapters + decoder on the annotated fraction; backbone stays
// frozen (verified bit-exactly by the tests)
SegTrainResult train_seg(SegModel& model, const Dataset& data, const SegTrainConfig& cfg);

// embedding of one image without building a gradient tape
template <typename T>
TensorData<T> embed_image(const TensorData<T>& image, SegModelT<T>& model) {
    ParamCtx<T> P(model.params, /*train=*/false);
    return encode_image(image, model.cfg.vit, P, "vit", &model.lora_q, &model.lora_v).tokens->value;
}

}  // namespace dorl

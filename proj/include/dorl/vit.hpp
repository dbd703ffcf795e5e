#pragma once

// Patch-token transformer building blocks: patch embedding, pre-norm
// multi-head self-attention blocks with GELU MLPs, learned absolute
// positional embeddings. Both the segmentation backbone and the
// cross-domain autoencoder are assembled from these.

#include <unordered_map>

#include "dorl/autodiff.hpp"
#include "dorl/optim.hpp"

namespace dorl {

struct ViTConfig {
    int64_t image_size = 224;
    int64_t patch_size = 16;
    int64_t embed_dim = 192;
    int64_t depth = 12;
    int64_t heads = 3;
    int64_t mlp_ratio = 4;

    void validate() const {
        if (depth < 1) throw ConfigError("vit: depth must be >= 1");
        if (image_size % patch_size != 0) throw ConfigError("vit: image_size not divisible by patch_size");
        if (embed_dim % heads != 0) throw ConfigError("vit: embed_dim not divisible by heads");
    }
    int64_t grid() const { return image_size / patch_size; }
    int64_t tokens() const { return grid() * grid(); }
    int64_t patch_dim(int64_t channels = 3) const { return patch_size * patch_size * channels; }
    int64_t mlp_dim() const { return embed_dim * mlp_ratio; }
};

template <typename T>
struct TokenGrid {
    Var<T> tokens;  // [T, D]
    int64_t h = 0, w = 0;
    bool pos_applied = false;
};

// Wraps a ParamStore for graph building: each named parameter becomes a leaf
// once per forward pass, sharing the store's buffer. In train mode non-frozen
// leaves require grad; collect_grads() reads them back after backward().
template <typename T>
class ParamCtx {
  public:
    ParamCtx(ParamStore<T>& store, bool train) : store_(&store), train_(train) {}

    Var<T> operator()(const std::string& name) {
        auto it = cache_.find(name);
        if (it != cache_.end()) return it->second;
        bool rg = train_ && !store_->frozen(name);
        Var<T> v = leaf<T>(store_->at(name), rg);
        cache_.emplace(name, v);
        return v;
    }

    std::map<std::string, TensorData<T>> collect_grads() const {
        std::map<std::string, TensorData<T>> out;
        for (auto& [name, v] : cache_)
            if (v->requires_grad) out[name] = v->grad.defined() ? v->grad : TensorData<T>(v->value.shape());
        return out;
    }

    // accumulate this pass's gradients into a running sum
    void accumulate_grads(std::map<std::string, TensorData<T>>& acc, T scale_factor = T(1)) const {
        for (auto& [name, v] : cache_) {
            if (!v->requires_grad) continue;
            auto it = acc.find(name);
            if (it == acc.end()) it = acc.emplace(name, TensorData<T>(v->value.shape())).first;
            if (v->grad.defined()) it->second.vec() += v->grad.vec() * scale_factor;
        }
    }

    // replace a parameter's leaf with an externally supplied node (used by the
    // gradient checker to differentiate w.r.t. one named parameter)
    void inject(const std::string& name, Var<T> v) {
        if (!v->value.same_shape(store_->at(name))) throw ShapeError("inject: shape mismatch for " + name);
        cache_[name] = std::move(v);
    }

    ParamStore<T>& store() { return *store_; }

  private:
    ParamStore<T>* store_;
    bool train_;
    std::unordered_map<std::string, Var<T>> cache_;
};

// Low-rank adapter applied to one projection inside a frozen matmul.
// Stored as the math shapes A [r, C_in], B [C_out, r]; B starts at zero.
struct LoraNames {
    std::string a, b;  // parameter names, empty = no adapter
    double scale = 1.0;
};

template <typename T>
void init_vit_params(ParamStore<T>& store, const ViTConfig& cfg, const std::string& prefix, uint64_t seed,
                     bool frozen, int64_t channels = 3, bool with_patch_embed = true) {
    cfg.validate();
    Rng rng(seed, prefix + ".init");
    auto gauss = [&](Shape s, double std) {
        TensorData<T> t(std::move(s));
        t.fill_gaussian(rng, (T)std);
        return t;
    };
    auto zeros = [&](Shape s) { return TensorData<T>(std::move(s)); };
    auto ones = [&](Shape s) {
        TensorData<T> t(std::move(s));
        t.fill(T(1));
        return t;
    };
    const int64_t d = cfg.embed_dim;
    if (with_patch_embed) {
        store.add(prefix + ".patch_embed.w", gauss({cfg.patch_dim(channels), d}, 1.0 / std::sqrt((double)cfg.patch_dim(channels))), frozen);
        store.add(prefix + ".patch_embed.b", zeros({d}), frozen);
    }
    store.add(prefix + ".pos_embed", gauss({cfg.tokens(), d}, 0.02), frozen);
    for (int64_t i = 0; i < cfg.depth; ++i) {
        std::string bp = prefix + ".block" + std::to_string(i);
        store.add(bp + ".ln1.g", ones({d}), frozen);
        store.add(bp + ".ln1.b", zeros({d}), frozen);
        store.add(bp + ".qkv.w", gauss({d, 3 * d}, 0.02), frozen);
        store.add(bp + ".qkv.b", zeros({3 * d}), frozen);
        store.add(bp + ".proj.w", gauss({d, d}, 0.02), frozen);
        store.add(bp + ".proj.b", zeros({d}), frozen);
        store.add(bp + ".ln2.g", ones({d}), frozen);
        store.add(bp + ".ln2.b", zeros({d}), frozen);
        store.add(bp + ".mlp1.w", gauss({d, cfg.mlp_dim()}, 0.02), frozen);
        store.add(bp + ".mlp1.b", zeros({cfg.mlp_dim()}), frozen);
        store.add(bp + ".mlp2.w", gauss({cfg.mlp_dim(), d}, 0.02), frozen);
        store.add(bp + ".mlp2.b", zeros({d}), frozen);
    }
    store.add(prefix + ".ln_f.g", ones({d}), frozen);
    store.add(prefix + ".ln_f.b", zeros({d}), frozen);
}

// Non-overlapping patches, row-major over the grid; each patch flattened in
// (row, col, channel) order.
template <typename T>
TensorData<T> patchify(const TensorData<T>& image, int64_t patch_size) {
    if (image.shape().size() != 3) throw ShapeError("patchify: image must be [H,W,C]");
    const int64_t h = image.shape()[0], w = image.shape()[1], c = image.shape()[2];
    if (h != w) throw ShapeError("patchify: image must be square");
    if (h % patch_size != 0) throw ShapeError("patchify: size not divisible by patch_size");
    const int64_t g = h / patch_size;
    TensorData<T> out({g * g, patch_size * patch_size * c});
    for (int64_t py = 0; py < g; ++py)
        for (int64_t px = 0; px < g; ++px) {
            T* dst = out.data() + (py * g + px) * out.shape()[1];
            for (int64_t r = 0; r < patch_size; ++r) {
                const T* src = image.data() + ((py * patch_size + r) * w + px * patch_size) * c;
                std::copy(src, src + patch_size * c, dst);
                dst += patch_size * c;
            }
        }
    return out;
}

namespace vit_detail {

// adapter delta s * (x A^T) B^T, never materializing B A
template <typename T>
Var<T> lora_delta(const Var<T>& x, ParamCtx<T>& P, const LoraNames& ln) {
    Var<T> a = P(ln.a);  // [r, C_in]
    Var<T> b = P(ln.b);  // [C_out, r]
    return scale(matmul(matmul(x, transpose(a)), transpose(b)), (T)ln.scale);
}

}  // namespace vit_detail

// Multi-head self-attention on already-normalized tokens. Optional LoRA
// adapters add a low-rank delta to the query and value projections.
template <typename T>
Var<T> mhsa(const Var<T>& x, ParamCtx<T>& P, const std::string& bp, int64_t heads, const LoraNames* lora_q = nullptr,
            const LoraNames* lora_v = nullptr) {
    const int64_t d = x->value.cols();
    const int64_t dh = d / heads;
    Var<T> qkv = add_rowvec(matmul(x, P(bp + ".qkv.w")), P(bp + ".qkv.b"));
    Var<T> q = slice_cols(qkv, 0, d);
    Var<T> k = slice_cols(qkv, d, d);
    Var<T> v = slice_cols(qkv, 2 * d, d);
    if (lora_q && !lora_q->a.empty()) q = add(q, vit_detail::lora_delta(x, P, *lora_q));
    if (lora_v && !lora_v->a.empty()) v = add(v, vit_detail::lora_delta(x, P, *lora_v));
    std::vector<Var<T>> head_outs;
    const T inv_sqrt_dh = T(1) / std::sqrt((T)dh);
    for (int64_t h = 0; h < heads; ++h) {
        Var<T> qh = slice_cols(q, h * dh, dh);
        Var<T> kh = slice_cols(k, h * dh, dh);
        Var<T> vh = slice_cols(v, h * dh, dh);
        Var<T> attn = softmax(scale(matmul(qh, transpose(kh)), inv_sqrt_dh));
        head_outs.push_back(matmul(attn, vh));
    }
    Var<T> cat = heads == 1 ? head_outs[0] : concat_cols(head_outs);
    return add_rowvec(matmul(cat, P(bp + ".proj.w")), P(bp + ".proj.b"));
}

// pre-norm residual block: x + MHSA(LN1 x), then x + MLP(LN2 x)
template <typename T>
Var<T> block_forward(const Var<T>& x, ParamCtx<T>& P, const std::string& bp, int64_t heads,
                     const LoraNames* lora_q = nullptr, const LoraNames* lora_v = nullptr) {
    Var<T> h1 = layer_norm(x, P(bp + ".ln1.g"), P(bp + ".ln1.b"));
    Var<T> x1 = add(x, mhsa(h1, P, bp, heads, lora_q, lora_v));
    Var<T> h2 = layer_norm(x1, P(bp + ".ln2.g"), P(bp + ".ln2.b"));
    Var<T> m = add_rowvec(matmul(gelu(add_rowvec(matmul(h2, P(bp + ".mlp1.w")), P(bp + ".mlp1.b"))), P(bp + ".mlp2.w")),
                          P(bp + ".mlp2.b"));
    return add(x1, m);
}

// full encoder: patch projection + positional embeddings + depth blocks +
// final layer norm; yields the image embedding [T, D]
template <typename T>
TokenGrid<T> encode_image(const TensorData<T>& image, const ViTConfig& cfg, ParamCtx<T>& P,
                          const std::string& prefix, const std::vector<LoraNames>* lora_q = nullptr,
                          const std::vector<LoraNames>* lora_v = nullptr) {
    cfg.validate();
    if (image.shape().size() != 3 || image.shape()[0] != cfg.image_size || image.shape()[1] != cfg.image_size)
        throw ShapeError("encode_image: image does not match configured size");
    Var<T> patches = constant<T>(patchify(image, cfg.patch_size));
    Var<T> x = add_rowvec(matmul(patches, P(prefix + ".patch_embed.w")), P(prefix + ".patch_embed.b"));
    x = add(x, P(prefix + ".pos_embed"));
    for (int64_t i = 0; i < cfg.depth; ++i) {
        std::string bp = prefix + ".block" + std::to_string(i);
        x = block_forward(x, P, bp, cfg.heads, lora_q ? &(*lora_q)[i] : nullptr, lora_v ? &(*lora_v)[i] : nullptr);
    }
    x = layer_norm(x, P(prefix + ".ln_f.g"), P(prefix + ".ln_f.b"));
    return TokenGrid<T>{x, cfg.grid(), cfg.grid(), true};
}

}  // namespace dorl

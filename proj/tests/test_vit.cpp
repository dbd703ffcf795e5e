#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dorl/gradcheck.hpp"
#include "dorl/vit.hpp"

using namespace dorl;

namespace {

ViTConfig tiny_cfg() {
    ViTConfig cfg;
    cfg.image_size = 32;
    cfg.patch_size = 8;
    cfg.embed_dim = 16;
    cfg.depth = 2;
    cfg.heads = 2;
    return cfg;
}

}  // namespace

TEST_CASE("patchify: token count and raw dim") {
    TensorF img224({224, 224, 3});
    auto p = patchify(img224, 16);
    CHECK(p.shape() == Shape{196, 768});

    TensorF img32({32, 32, 1});
    CHECK(patchify(img32, 16).shape() == Shape{4, 256});

    TensorF img30({30, 30, 3});
    CHECK_THROWS_AS(patchify(img30, 16), ShapeError);
}

TEST_CASE("patchify: row-major patches, (row, col, channel) flattening") {
    // 4x4 single-channel image with pixel value = 10*y + x
    TensorF img({4, 4, 1});
    for (int64_t y = 0; y < 4; ++y)
        for (int64_t x = 0; x < 4; ++x) img[y * 4 + x] = float(10 * y + x);
    auto p = patchify(img, 2);
    CHECK(p.shape() == Shape{4, 4});
    // patch 0 = rows 0-1, cols 0-1
    CHECK(p[0] == 0.0f);
    CHECK(p[1] == 1.0f);
    CHECK(p[2] == 10.0f);
    CHECK(p[3] == 11.0f);
    // patch 1 = rows 0-1, cols 2-3 (row-major over the grid)
    CHECK(p[4] == 2.0f);
    // patch 2 = rows 2-3, cols 0-1
    CHECK(p[8] == 20.0f);
}

TEST_CASE("attention over a single token reduces to the value projection") {
    ParamStore<double> ps;
    ViTConfig cfg = tiny_cfg();
    init_vit_params(ps, cfg, "vit", 5, false);
    ParamCtx<double> P(ps, false);
    Rng rng(1, "x");
    TensorD x({1, cfg.embed_dim});
    x.fill_gaussian(rng, 1.0);
    auto out = mhsa(constant<double>(x), P, "vit.block0", cfg.heads);
    // manual: v part of qkv, then output projection
    auto xv = constant<double>(x);
    auto qkv = add_rowvec(matmul(xv, P("vit.block0.qkv.w")), P("vit.block0.qkv.b"));
    auto v = slice_cols(qkv, 2 * cfg.embed_dim, cfg.embed_dim);
    auto manual = add_rowvec(matmul(v, P("vit.block0.proj.w")), P("vit.block0.proj.b"));
    CHECK(out->value.bytes_equal(manual->value));
}

TEST_CASE("identical tokens attend uniformly: output rows equal the shared value vector") {
    ParamStore<double> ps;
    ViTConfig cfg = tiny_cfg();
    init_vit_params(ps, cfg, "vit", 6, false);
    ParamCtx<double> P(ps, false);
    Rng rng(2, "x");
    TensorD row({1, cfg.embed_dim});
    row.fill_gaussian(rng, 1.0);
    const int64_t t = 5;
    TensorD x({t, cfg.embed_dim});
    for (int64_t r = 0; r < t; ++r) x.mat().row(r) = row.mat().row(0);
    auto out = mhsa(constant<double>(x), P, "vit.block0", cfg.heads);
    auto single = mhsa(constant<double>(row), P, "vit.block0", cfg.heads);
    for (int64_t r = 0; r < t; ++r)
        for (int64_t c = 0; c < cfg.embed_dim; ++c)
            CHECK(out->value[r * cfg.embed_dim + c] == doctest::Approx(single->value[c]).epsilon(1e-12));
}

TEST_CASE("transformer block passes a finite-difference gradient check") {
    ParamStore<double> ps;
    ViTConfig cfg = tiny_cfg();
    init_vit_params(ps, cfg, "vit", 7, false);
    Rng rng(3, "x");
    TensorD x({8, cfg.embed_dim});
    x.fill_gaussian(rng, 0.5);
    TensorD probe({8, cfg.embed_dim});
    probe.fill_gaussian(rng, 1.0);
    auto rep = grad_check_fn(
        [&](const Var<double>& in) {
            ParamCtx<double> P(ps, false);
            auto y = block_forward(in, P, "vit.block0", cfg.heads);
            return sum(mul(y, constant<double>(probe)));
        },
        x, 1e-5);
    CHECK(rep.max_rel_err <= 1e-4);
}

TEST_CASE("block_forward preserves shape across configs") {
    for (int64_t t : {1, 4, 9}) {
        for (int64_t d : {8, 16}) {
            ParamStore<double> ps;
            ViTConfig cfg = tiny_cfg();
            cfg.embed_dim = d;
            init_vit_params(ps, cfg, "vit", 11 + t + d, false);
            ParamCtx<double> P(ps, false);
            Rng rng(4, "x", (uint64_t)(t * 100 + d));
            TensorD x({t, d});
            x.fill_gaussian(rng, 1.0);
            auto y = block_forward(constant<double>(x), P, "vit.block0", cfg.heads);
            CHECK(y->value.shape() == x.shape());
        }
    }
}

TEST_CASE("permutation covariance: permuting tokens permutes the block output") {
    ParamStore<double> ps;
    ViTConfig cfg = tiny_cfg();
    init_vit_params(ps, cfg, "vit", 9, false);
    ParamCtx<double> P(ps, false);
    Rng rng(5, "x");
    const int64_t t = 7, d = cfg.embed_dim;
    TensorD x({t, d});
    x.fill_gaussian(rng, 1.0);
    std::vector<int64_t> perm = {3, 0, 6, 1, 5, 2, 4};
    TensorD xp({t, d});
    for (int64_t r = 0; r < t; ++r) xp.mat().row(r) = x.mat().row(perm[r]);
    auto y = block_forward(constant<double>(x), P, "vit.block0", cfg.heads);
    auto yp = block_forward(constant<double>(xp), P, "vit.block0", cfg.heads);
    for (int64_t r = 0; r < t; ++r)
        for (int64_t c = 0; c < d; ++c)
            CHECK(yp->value[r * d + c] == doctest::Approx(y->value[perm[r] * d + c]).epsilon(1e-10));
}

TEST_CASE("encode_image at the desk profile: shape, determinism, sensitivity") {
    ViTConfig cfg;  // desk defaults: 224/16, D=192, depth 12
    auto run = [&](float bump) {
        ParamStore<float> ps;
        init_vit_params(ps, cfg, "vit", 21, false);
        ParamCtx<float> P(ps, false);
        TensorF img({224, 224, 3});
        img.fill(0.0f);
        img[0] += bump;
        return encode_image(img, cfg, P, "vit").tokens->value;
    };
    auto e1 = run(0.0f);
    CHECK(e1.shape() == Shape{196, 192});
    auto e2 = run(0.0f);
    CHECK(e1.bytes_equal(e2));  // same seed, same image -> bit-identical
    auto e3 = run(1.0f);        // one-pixel perturbation must propagate
    CHECK(!e1.bytes_equal(e3));
}

TEST_CASE("vit config validation") {
    ViTConfig cfg = tiny_cfg();
    cfg.patch_size = 5;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = tiny_cfg();
    cfg.heads = 3;  // 16 % 3 != 0
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = tiny_cfg();
    cfg.depth = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

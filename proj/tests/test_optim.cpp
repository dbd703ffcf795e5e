#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "dorl/checkpoint.hpp"
#include "dorl/optim.hpp"

using namespace dorl;

TEST_CASE("adamw: zero gradient applies only decoupled weight decay") {
    ParamStore<double> ps;
    ps.add("p", TensorD({1}, {1.0}));
    AdamWConfig cfg;
    cfg.lr = 5e-4;
    cfg.weight_decay = 0.05;
    AdamW<double> opt(cfg);
    std::map<std::string, TensorD> grads{{"p", TensorD({1}, {0.0})}};
    opt.step(ps, grads);
    CHECK(ps.at("p")[0] == doctest::Approx(0.999975).epsilon(1e-12));
}

TEST_CASE("adamw: lr = 0 leaves parameters unchanged exactly") {
    ParamStore<double> ps;
    ps.add("p", TensorD({3}, {0.5, -1.25, 2.0}));
    TensorD before = ps.at("p").clone();
    AdamWConfig cfg;
    cfg.lr = 0.0;
    AdamW<double> opt(cfg);
    std::map<std::string, TensorD> grads{{"p", TensorD({3}, {1.0, 2.0, 3.0})}};
    opt.step(ps, grads);
    CHECK(ps.at("p").bytes_equal(before));
}

TEST_CASE("adamw: first step with unit gradient moves by about -lr*(1 + wd*p)") {
    ParamStore<double> ps;
    ps.add("p", TensorD({1}, {2.0}));
    AdamWConfig cfg;
    cfg.lr = 1e-3;
    cfg.weight_decay = 0.05;
    cfg.eps = 1e-12;
    AdamW<double> opt(cfg);
    std::map<std::string, TensorD> grads{{"p", TensorD({1}, {1.0})}};
    opt.step(ps, grads);
    // bias-corrected m-hat = v-hat = 1 on the first step, so the update is
    // -lr*(1 + wd*p) up to eps
    double expected = 2.0 - 1e-3 * (1.0 + 0.05 * 2.0);
    CHECK(ps.at("p")[0] == doctest::Approx(expected).epsilon(1e-8));
}

TEST_CASE("adamw: gradient for a frozen parameter is a contract violation") {
    ParamStore<double> ps;
    ps.add("w", TensorD({2}, {1.0, 2.0}), /*frozen=*/true);
    ps.add("p", TensorD({1}, {0.0}));
    AdamW<double> opt;
    std::map<std::string, TensorD> grads{{"w", TensorD({2}, {1.0, 1.0})}, {"p", TensorD({1}, {0.0})}};
    CHECK_THROWS_AS(opt.step(ps, grads), ConfigError);
}

TEST_CASE("frozen parameters are bit-identical across any step sequence") {
    ParamStore<float> ps;
    Rng rng(3, "frozen");
    TensorData<float> w({8, 8});
    w.fill_gaussian(rng, 1.0f);
    ps.add("frozen.w", w.clone(), true);
    ps.add("train.p", TensorData<float>({8}, std::vector<float>(8, 1.0f)));
    TensorData<float> snapshot = ps.at("frozen.w").clone();
    AdamW<float> opt;
    for (int i = 0; i < 25; ++i) {
        std::map<std::string, TensorData<float>> grads;
        TensorData<float> g({8});
        g.fill_gaussian(rng, 1.0f);
        grads["train.p"] = g;
        opt.step(ps, grads);
    }
    CHECK(ps.at("frozen.w").bytes_equal(snapshot));
}

TEST_CASE("adamw with wd=0 descends a quadratic bowl monotonically") {
    ParamStore<double> ps;
    ps.add("p", TensorD({1}, {3.0}));
    AdamWConfig cfg;
    cfg.lr = 1e-2;
    cfg.weight_decay = 0.0;
    AdamW<double> opt(cfg);
    double prev = std::abs(ps.at("p")[0]);
    for (int i = 0; i < 200; ++i) {
        std::map<std::string, TensorD> grads{{"p", TensorD({1}, {2.0 * ps.at("p")[0]})}};
        opt.step(ps, grads);
        double cur = std::abs(ps.at("p")[0]);
        CHECK(cur < prev);
        prev = cur;
    }
}

TEST_CASE("lr schedule: warmup ramp and cosine endpoints") {
    ScheduleConfig cfg;
    cfg.base_lr = 0.0005;
    cfg.warmup_steps = 100;
    cfg.total_steps = 1000;
    cfg.min_lr = 0.0;
    CHECK(lr_at(0, cfg) == 0.0);
    CHECK(lr_at(100, cfg) == doctest::Approx(0.0005).epsilon(1e-15));
    CHECK(lr_at(1000, cfg) == doctest::Approx(0.0).epsilon(1e-18));
    CHECK(lr_at(50, cfg) == doctest::Approx(0.00025).epsilon(1e-12));
    // monotone decay after warmup
    for (int64_t s = 101; s <= 1000; ++s) CHECK(lr_at(s, cfg) <= lr_at(s - 1, cfg));
    CHECK_THROWS_AS(lr_at(1001, cfg), ConfigError);
    ScheduleConfig bad = cfg;
    bad.warmup_steps = 1000;
    CHECK_THROWS_AS(lr_at(0, bad), ConfigError);
}

TEST_CASE("checkpoint roundtrip preserves bytes, shapes and frozen flags") {
    ParamStore<float> ps;
    Rng rng(11, "ckpt");
    TensorData<float> a({3, 4});
    a.fill_gaussian(rng, 1.0f);
    TensorData<float> b({5});
    b.fill_gaussian(rng, 2.0f);
    ps.add("vit.block0.qkv.w", a, true);
    ps.add("seg.decoder.query", b, false);
    auto path = std::filesystem::temp_directory_path() / "dorl_ckpt_test.bin";
    save_checkpoint(path.string(), ps);

    // magic bytes
    std::ifstream is(path, std::ios::binary);
    char magic[8];
    is.read(magic, 8);
    CHECK(std::string(magic, 8) == "DORLCKPT");

    auto loaded = load_checkpoint<float>(path.string());
    CHECK(loaded.size() == 2);
    CHECK(loaded.at("vit.block0.qkv.w").bytes_equal(a));
    CHECK(loaded.at("seg.decoder.query").bytes_equal(b));
    CHECK(loaded.frozen("vit.block0.qkv.w"));
    CHECK(!loaded.frozen("seg.decoder.query"));
    CHECK_THROWS_AS(load_checkpoint<double>(path.string()), DataError);  // dtype mismatch
    std::filesystem::remove(path);
}

TEST_CASE("param store rejects duplicate names") {
    ParamStore<float> ps;
    ps.add("x", TensorData<float>({1}));
    CHECK_THROWS_AS(ps.add("x", TensorData<float>({1})), ConfigError);
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include <json.hpp>

#include "dorl/harness.hpp"

using namespace dorl;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) : path(fs::temp_directory_path() / ("dorl_h_" + tag)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

void check_partition(const SplitPair& sp, size_t n) {
    std::set<int64_t> seen(sp.train.begin(), sp.train.end());
    for (int64_t i : sp.test) {
        CHECK(seen.count(i) == 0);
        seen.insert(i);
    }
    CHECK(seen.size() == n);
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p);
    REQUIRE(is.good());
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

// tiny 3-domain benchmark written to disk once per test-binary run
const fs::path& benchmark_root() {
    static TempDir tmp("bench_data");
    static bool done = false;
    if (!done) {
        auto classes = std::vector<ClassSpec>{default_classes(8)[0], default_classes(8)[3]};
        for (const auto& dom : default_domains())
            save_dataset(gen_domain(dom, classes, 10, 99), (tmp.path / dom.id).string());
        done = true;
    }
    return tmp.path;
}

ExperimentConfig tiny_config(const std::string& out) {
    ExperimentConfig cfg;
    for (const auto& dom : default_domains()) cfg.domain_paths.push_back((benchmark_root() / dom.id).string());
    cfg.train_domains = {0};
    cfg.out_dir = out;
    cfg.profile = "tiny";
    cfg.seed = 5;
    cfg.seg_epochs = 2;
    cfg.cae_epochs = 2;
    cfg.annotated_fraction = 0.1;
    cfg.k_folds = 2;
    cfg.classifiers = {Algo::logreg};
    return cfg;
}

}  // namespace

TEST_CASE("stratified split preserves class proportions") {
    std::vector<int> labels;
    for (int c = 0; c < 4; ++c) labels.insert(labels.end(), 25, c);
    SplitPair sp = stratified_split(labels, 0.2, 3);
    check_partition(sp, labels.size());
    CHECK(sp.test.size() == 20);
    std::map<int, int> per_class;
    for (int64_t i : sp.test) per_class[labels[(size_t)i]]++;
    for (auto& [c, n] : per_class) CHECK(n == 5);

    SplitPair again = stratified_split(labels, 0.2, 3);
    CHECK(again.train == sp.train);
    CHECK(again.test == sp.test);
    SplitPair other = stratified_split(labels, 0.2, 4);
    CHECK(other.test != sp.test);

    CHECK_THROWS_WITH_AS(stratified_split(std::vector<int>{0, 0, 1}, 0.2, 0),
                         doctest::Contains("class 1"), DataError);
    CHECK_THROWS_AS(stratified_split(labels, 0.0, 0), ConfigError);
    CHECK_THROWS_AS(stratified_split(labels, 1.0, 0), ConfigError);
}

TEST_CASE("stratified k-fold partitions with balanced classes") {
    std::vector<int> labels(50, 0);
    auto folds = stratified_kfold(labels, 5, 7);
    REQUIRE(folds.size() == 5);
    std::set<int64_t> all;
    for (const auto& f : folds) {
        CHECK(f.test.size() == 10);
        CHECK(f.train.size() == 40);
        for (int64_t i : f.test) CHECK(all.insert(i).second);
    }
    CHECK(all.size() == 50);

    // two unbalanced classes: per-fold class counts differ by <= 1
    std::vector<int> mixed;
    mixed.insert(mixed.end(), 13, 0);
    mixed.insert(mixed.end(), 7, 1);
    auto mf = stratified_kfold(mixed, 5, 1);
    for (int c = 0; c < 2; ++c) {
        std::vector<int> counts;
        for (const auto& f : mf) {
            int n = 0;
            for (int64_t i : f.test) n += mixed[(size_t)i] == c;
            counts.push_back(n);
        }
        int lo = *std::min_element(counts.begin(), counts.end());
        int hi = *std::max_element(counts.begin(), counts.end());
        CHECK(hi - lo <= 1);
    }

    CHECK_THROWS_WITH_AS(stratified_kfold(std::vector<int>{0, 0, 0, 1, 1}, 3, 2),
                         doctest::Contains("class 1"), DataError);
    CHECK_THROWS_AS(stratified_kfold(labels, 1, 0), ConfigError);
}

TEST_CASE("profiles resolve to valid model geometries") {
    for (const char* name : {"desk", "full", "bench", "tiny"}) {
        Profile p = make_profile(name);
        CHECK(p.name == name);
        CHECK_NOTHROW(p.vit.validate());
        CHECK(p.vit.embed_dim % p.vit.heads == 0);
    }
    CHECK(make_profile("desk").vit.embed_dim == 192);
    CHECK(make_profile("full").vit.embed_dim == 384);
    CHECK_THROWS_AS(make_profile("laptop"), ConfigError);
}

TEST_CASE("config files round-trip and report parse errors with line numbers") {
    TempDir tmp("config");
    ExperimentConfig cfg = tiny_config((tmp.path / "out").string());
    cfg.beta = 0.25;
    cfg.lambda = 3.0;
    cfg.classifiers = {Algo::svm_linear, Algo::gbt};
    const std::string path = (tmp.path / "exp.cfg").string();
    config_to_file(cfg, path);

    ExperimentConfig r = config_from_file(path);
    CHECK(r.domain_paths == cfg.domain_paths);
    CHECK(r.train_domains == cfg.train_domains);
    CHECK(r.out_dir == cfg.out_dir);
    CHECK(r.profile == cfg.profile);
    CHECK(r.seed == cfg.seed);
    CHECK(r.beta == cfg.beta);
    CHECK(r.lambda == cfg.lambda);
    CHECK(r.k_folds == cfg.k_folds);
    CHECK(r.classifiers == cfg.classifiers);
    CHECK_NOTHROW(r.validate());

    auto write = [&](const std::string& text) {
        std::ofstream os(path, std::ios::trunc);
        os << text;
    };
    write("seed=1\n");
    CHECK_THROWS_WITH_AS(config_from_file(path), doctest::Contains("version header"), ConfigError);
    write("dorl-config 1\nbogus_key=1\n");
    CHECK_THROWS_WITH_AS(config_from_file(path), doctest::Contains("line 2"), ConfigError);
    write("dorl-config 1\nseed=not_a_number\n");
    CHECK_THROWS_WITH_AS(config_from_file(path), doctest::Contains("bad value for seed"), ConfigError);
    write("dorl-config 1\n# comment\nclassifiers=svm_cubic\n");
    CHECK_THROWS_WITH_AS(config_from_file(path), doctest::Contains("line 3"), ConfigError);
}

TEST_CASE("experiment config validation") {
    TempDir tmp("valid");
    ExperimentConfig cfg = tiny_config((tmp.path / "out").string());
    CHECK_NOTHROW(cfg.validate());

    ExperimentConfig bad = cfg;
    bad.variant = "M6";
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.domain_paths.resize(1);
    bad.train_domains = {0};
    CHECK_THROWS_AS(bad.validate(), ConfigError);  // CAE needs >= 2 domains
    bad.variant = "M1";
    CHECK_NOTHROW(bad.validate());  // M1 skips the CAE
    bad = cfg;
    bad.train_domains = {5};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.rho = 1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.classifiers.clear();
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("feature export round trip") {
    TempDir tmp("feat");
    std::vector<FeatureRecord> records;
    for (int i = 0; i < 5; ++i)
        records.push_back({"setA", "sample" + std::to_string(i), i % 3, "alpha",
                           {0.5f * (float)i, -1.25f, 3.75f + (float)i}});
    const std::string path = (tmp.path / "features.bin").string();
    export_features(records, path);
    CHECK(fs::exists(path + ".manifest.json"));

    auto r = import_features(path);
    REQUIRE(r.size() == records.size());
    for (size_t i = 0; i < r.size(); ++i) {
        CHECK(r[i].dataset == records[i].dataset);
        CHECK(r[i].id == records[i].id);
        CHECK(r[i].label == records[i].label);
        CHECK(r[i].domain == records[i].domain);
        CHECK(r[i].values == records[i].values);
    }

    records[2].values.pop_back();
    CHECK_THROWS_AS(export_features(records, path), ShapeError);
    CHECK_THROWS_AS(import_features((tmp.path / "absent.bin").string()), DataError);
}

TEST_CASE("run_pipeline produces a coherent, reproducible report") {
    TempDir tmp("pipe");
    ExperimentConfig cfg = tiny_config((tmp.path / "run1").string());
    EvalReport report = run_pipeline(cfg);

    // structure: 1 classifier x 1 train domain x 3 test domains
    REQUIRE(report.cells.size() == 1);
    REQUIRE(report.cells[0].size() == 1);
    REQUIRE(report.cells[0][0].size() == 3);
    CHECK(report.train_domains == std::vector<std::string>{"alpha"});
    CHECK(report.test_domains == std::vector<std::string>{"alpha", "beta", "gamma"});
    for (const auto& cell : report.cells[0][0]) {
        CHECK(cell.fold_acc.size() == 2);
        double sum = 0;
        for (double a : cell.fold_acc) {
            CHECK(a >= 0.0);
            CHECK(a <= 1.0);
            sum += a;
        }
        CHECK(cell.mean == doctest::Approx(sum / 2.0).epsilon(1e-12));
    }
    CHECK_FALSE(report.label_intersection);
    CHECK(report.wall_seconds > 0.0);

    // artifacts on disk
    CHECK(fs::exists(tmp.path / "run1" / "report_full.json"));
    CHECK(fs::exists(tmp.path / "run1" / "report_full_logreg.csv"));
    CHECK(fs::exists(tmp.path / "run1" / "seg_alpha_s5.ckpt"));
    CHECK(fs::exists(tmp.path / "run1" / "features_alpha_s5_full_beta.bin"));

    const std::string json1 = slurp(tmp.path / "run1" / "report_full.json");
    CHECK(json1 == report_to_json(report));

    // cold rerun in a fresh directory: byte-identical canonical JSON
    ExperimentConfig cfg2 = tiny_config((tmp.path / "run2").string());
    run_pipeline(cfg2);
    CHECK(slurp(tmp.path / "run2" / "report_full.json") == json1);

    // warm rerun reusing every cached artifact: same report again
    EvalReport warm = run_pipeline(cfg);
    CHECK(report_to_json(warm) == json1);

    // a different seed changes the result
    ExperimentConfig cfg3 = tiny_config((tmp.path / "run3").string());
    cfg3.seed = 6;
    CHECK(report_to_json(run_pipeline(cfg3)) != json1);
}

TEST_CASE("ablation variants") {
    TempDir tmp("abl");
    ExperimentConfig cfg = tiny_config((tmp.path / "out").string());

    EvalReport m1 = run_ablation(cfg, "M1");
    CHECK(m1.variant == "M1");
    // M1 never trains a CAE: no cae checkpoint in the output directory
    for (const auto& e : fs::directory_iterator(tmp.path / "out"))
        CHECK(e.path().filename().string().find("cae_") == std::string::npos);

    EvalReport m5 = run_ablation(cfg, "M5");
    cfg.variant = "full";
    EvalReport full = run_pipeline(cfg);
    // M5 is the full objective by definition: identical numbers
    auto strip = [](const EvalReport& r) {
        nlohmann::json j = nlohmann::json::parse(report_to_json(r));
        j.erase("variant");
        j.erase("config");
        return j;
    };
    CHECK(strip(m5) == strip(full));

    CHECK_THROWS_AS(run_ablation(cfg, "M9"), ConfigError);
    CHECK_THROWS_AS(run_ablation(cfg, "full"), ConfigError);
}

TEST_CASE("degenerate 1x1 sweep matches a single pipeline run") {
    TempDir tmp("sweep");
    ExperimentConfig cfg = tiny_config((tmp.path / "out").string());
    SweepResult res = sweep(cfg, {0.5}, {2.0});
    REQUIRE(res.rows.size() == cfg.classifiers.size());
    CHECK(res.best_beta == 0.5);
    CHECK(res.best_lambda == 2.0);
    CHECK(fs::exists(tmp.path / "out" / "sweep.csv"));

    ExperimentConfig single = tiny_config((tmp.path / "single").string());
    EvalReport report = run_pipeline(single);
    CHECK(res.rows[0].accuracy == doctest::Approx(report.classifier_average(0)).epsilon(1e-12));
    CHECK(res.best_accuracy == doctest::Approx(report.overall_average()).epsilon(1e-12));

    CHECK_THROWS_AS(sweep(cfg, {}, {2.0}), ConfigError);
}

TEST_CASE("report aggregates recompute from the stored folds") {
    TempDir tmp("agg");
    ExperimentConfig cfg = tiny_config((tmp.path / "out").string());
    cfg.classifiers = {Algo::logreg, Algo::svm_linear};
    EvalReport r = run_pipeline(cfg);
    for (size_t c = 0; c < r.cells.size(); ++c) {
        double clf_sum = 0;
        size_t n_cells = 0;
        for (const auto& row : r.cells[c])
            for (const auto& cell : row) {
                double m = 0;
                for (double a : cell.fold_acc) m += a;
                m /= (double)cell.fold_acc.size();
                CHECK(std::abs(m - cell.mean) <= 1e-12);
                double v = 0;
                for (double a : cell.fold_acc) v += (a - m) * (a - m);
                CHECK(std::abs(std::sqrt(v / (double)cell.fold_acc.size()) - cell.stddev) <= 1e-12);
                clf_sum += cell.mean;
                ++n_cells;
            }
        CHECK(std::abs(clf_sum / (double)n_cells - r.classifier_average(c)) <= 1e-12);
    }
    std::string csv = report_to_csv(r, 1);
    CHECK(csv.find("train,test,mean,std,fold0,fold1") == 0);
}

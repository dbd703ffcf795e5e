#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "dorl/synthcells.hpp"

using namespace dorl;
namespace fs = std::filesystem;

namespace {

std::vector<ClassSpec> two_classes() {
    auto all = default_classes(8);
    return {all[0], all[3]};
}

DomainSpec flat_domain(const std::string& id) {
    DomainSpec d;
    d.id = id;
    d.tint_r = d.tint_g = d.tint_b = 0.5;
    return d;
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) : path(fs::temp_directory_path() / ("dorl_sc_" + tag)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("gen_domain is deterministic and byte-identical per seed") {
    auto classes = two_classes();
    auto d = default_domains()[1];
    Dataset a = gen_domain(d, classes, 2, 7);
    Dataset b = gen_domain(d, classes, 2, 7);
    REQUIRE(a.size() == 4);
    REQUIRE(a.class_names == std::vector<std::string>{"c0", "c3"});
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a.samples[i].pixels == b.samples[i].pixels);
        CHECK(a.samples[i].mask == b.samples[i].mask);
        CHECK(a.samples[i].id == b.samples[i].id);
        CHECK(a.samples[i].label == b.samples[i].label);
    }
    Dataset c = gen_domain(d, classes, 2, 8);
    CHECK(a.samples[0].pixels != c.samples[0].pixels);
}

TEST_CASE("identically distributed domains produce equal pixels") {
    // no noise, no artifacts: the renderer draws nothing from the domain-keyed
    // stream, so two domains that differ only in id must match byte for byte
    auto classes = two_classes();
    DomainSpec d1 = flat_domain("left"), d2 = flat_domain("right");
    Dataset a = gen_domain(d1, classes, 2, 3);
    Dataset b = gen_domain(d2, classes, 2, 3);
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a.samples[i].pixels == b.samples[i].pixels);
        CHECK(a.samples[i].mask == b.samples[i].mask);
    }
}

TEST_CASE("cell geometry is identical across domains") {
    auto classes = two_classes();
    auto domains = default_domains();
    Dataset a = gen_domain(domains[0], classes, 3, 11);
    Dataset b = gen_domain(domains[1], classes, 3, 11);
    Dataset c = gen_domain(domains[2], classes, 3, 11);
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a.samples[i].mask == b.samples[i].mask);
        CHECK(a.samples[i].mask == c.samples[i].mask);
        // the appearance still differs
        CHECK(a.samples[i].pixels != b.samples[i].pixels);
    }
}

TEST_CASE("maximum class count is supported") {
    auto classes = default_classes(kMaxClasses);
    Dataset d = gen_domain(default_domains()[0], classes, 1, 1);
    CHECK(d.size() == (size_t)kMaxClasses);
    CHECK(d.class_names.size() == (size_t)kMaxClasses);
    for (size_t i = 0; i < d.size(); ++i) CHECK(d.samples[i].label == (int)i);

    CHECK_THROWS_AS(gen_domain(default_domains()[0], default_classes(kMaxClasses + 1), 1, 1), ConfigError);
    CHECK_THROWS_AS(gen_domain(default_domains()[0], {classes[0]}, 1, 1), ConfigError);
    CHECK_THROWS_AS(gen_domain(default_domains()[0], classes, 0, 1), ConfigError);
}

TEST_CASE("artifacts touch only pixels outside the mask") {
    auto classes = two_classes();
    DomainSpec with = flat_domain("art"), without = flat_domain("art");
    with.artifacts.p_scale_bar = 1.0;
    with.artifacts.p_smudge = 1.0;
    with.artifacts.p_vignette = 1.0;
    Dataset a = gen_domain(with, classes, 2, 5);
    Dataset b = gen_domain(without, classes, 2, 5);
    for (size_t i = 0; i < a.size(); ++i) {
        const auto& sa = a.samples[i];
        const auto& sb = b.samples[i];
        REQUIRE(sa.mask == sb.mask);
        bool any_outside_changed = false;
        for (int64_t p = 0; p < sa.height * sa.width; ++p) {
            bool same = sa.pixels[(size_t)(3 * p)] == sb.pixels[(size_t)(3 * p)] &&
                        sa.pixels[(size_t)(3 * p + 1)] == sb.pixels[(size_t)(3 * p + 1)] &&
                        sa.pixels[(size_t)(3 * p + 2)] == sb.pixels[(size_t)(3 * p + 2)];
            if (sa.mask[(size_t)p]) {
                CHECK(same);  // inside the cell nothing may change
            } else if (!same) {
                any_outside_changed = true;
            }
        }
        CHECK(any_outside_changed);
    }
}

TEST_CASE("grayscale histogram conserves the pixel count") {
    auto classes = two_classes();
    Dataset d = gen_domain(default_domains()[2], classes, 2, 9);
    auto h = grayscale_histogram(d);
    REQUIRE(h.size() == 256);
    uint64_t total = 0;
    for (uint64_t c : h) total += c;
    CHECK(total == (uint64_t)d.size() * kImageSize * kImageSize);

    // a constant image lands in a single bin
    Dataset flat;
    ImageSample s;
    s.height = s.width = 4;
    s.channels = 3;
    s.pixels.assign(4 * 4 * 3, 100);
    flat.samples.push_back(s);
    auto hf = grayscale_histogram(flat);
    CHECK(hf[100] == 16);
    for (size_t i = 0; i < hf.size(); ++i)
        if (i != 100) CHECK(hf[i] == 0);

    CHECK_THROWS_AS(grayscale_histogram(Dataset{}), DataError);
    CHECK_THROWS_AS(grayscale_histogram(flat, 1), ConfigError);
    CHECK_THROWS_AS(histogram_mean(std::vector<uint64_t>(256, 0)), DataError);
}

TEST_CASE("illumination-only domain shift moves the histogram mean by > 5 gray levels") {
    auto classes = two_classes();
    DomainSpec base = flat_domain("flat");
    DomainSpec lit = flat_domain("lit");
    lit.illumination = 0.2;  // the only difference
    Dataset a = gen_domain(base, classes, 3, 21);
    Dataset b = gen_domain(lit, classes, 3, 21);
    double shift = histogram_mean(grayscale_histogram(b)) - histogram_mean(grayscale_histogram(a));
    CHECK(shift > 5.0);

    // the default benchmark domains are pairwise separated as well
    auto domains = default_domains();
    std::vector<double> means;
    for (const auto& d : domains) means.push_back(histogram_mean(grayscale_histogram(gen_domain(d, classes, 3, 21))));
    for (size_t i = 0; i < means.size(); ++i)
        for (size_t j = i + 1; j < means.size(); ++j) CHECK(std::abs(means[i] - means[j]) > 5.0);
}

TEST_CASE("save/load round trip is exact") {
    TempDir tmp("roundtrip");
    auto classes = two_classes();
    Dataset d = gen_domain(default_domains()[1], classes, 2, 13);
    d.samples[1].mask.clear();  // one unannotated sample
    save_dataset(d, tmp.path.string());

    Dataset r = load_dataset(tmp.path.string());
    REQUIRE(r.size() == d.size());
    CHECK(r.domain == d.domain);
    CHECK(r.class_names == d.class_names);
    for (size_t i = 0; i < d.size(); ++i) {
        CHECK(r.samples[i].id == d.samples[i].id);
        CHECK(r.samples[i].label == d.samples[i].label);
        CHECK(r.samples[i].class_name == d.samples[i].class_name);
        CHECK(r.samples[i].domain == d.samples[i].domain);
        CHECK(r.samples[i].pixels == d.samples[i].pixels);
        CHECK(r.samples[i].mask == d.samples[i].mask);
    }
    CHECK_FALSE(r.samples[1].has_mask());
}

TEST_CASE("manifest errors name the offending line") {
    TempDir tmp("manifest");
    auto classes = two_classes();
    Dataset d = gen_domain(default_domains()[0], classes, 1, 2);
    save_dataset(d, tmp.path.string());

    auto rewrite_line = [&](int line_no, const std::string& replacement) {
        std::ifstream in(tmp.path / "manifest.jsonl");
        std::vector<std::string> lines;
        std::string l;
        while (std::getline(in, l)) lines.push_back(l);
        lines[(size_t)(line_no - 1)] = replacement;
        std::ofstream out(tmp.path / "manifest.jsonl", std::ios::trunc);
        for (const auto& s : lines) out << s << "\n";
    };

    std::ifstream in(tmp.path / "manifest.jsonl");
    std::string first, second;
    std::getline(in, first);
    std::getline(in, second);
    in.close();

    rewrite_line(2, "{not json");
    CHECK_THROWS_WITH_AS(load_dataset(tmp.path.string()),
                         doctest::Contains("manifest.jsonl line 2"), DataError);

    rewrite_line(2, R"({"id":"x","label":"c3","class_name":"c3","domain":"alpha","image":"images/missing.png"})");
    CHECK_THROWS_WITH_AS(load_dataset(tmp.path.string()),
                         doctest::Contains("line 2"), DataError);

    rewrite_line(2, R"({"id":"x","class_name":"c3","domain":"alpha","image":"images/missing.png"})");
    CHECK_THROWS_WITH_AS(load_dataset(tmp.path.string()),
                         doctest::Contains("missing field 'label'"), DataError);

    rewrite_line(2, second);
    CHECK_NOTHROW(load_dataset(tmp.path.string()));
    CHECK_THROWS_AS(load_dataset((tmp.path / "nope").string()), DataError);
}

TEST_CASE("spec validation rejects out-of-range parameters") {
    DomainSpec d = flat_domain("d");
    d.tint_g = 1.5;
    CHECK_THROWS_AS(d.validate(), ConfigError);
    d = flat_domain("d");
    d.artifacts.p_smudge = -0.1;
    CHECK_THROWS_AS(d.validate(), ConfigError);
    d = flat_domain("d");
    d.noise_sigma = -1.0;
    CHECK_THROWS_AS(d.validate(), ConfigError);

    ClassSpec c = default_classes(2)[0];
    c.radius_max = c.radius_min - 1.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = default_classes(2)[0];
    c.eccentricity = 1.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = default_classes(2)[0];
    c.lobes = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

#include "dorl/synthcells.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "dorl/png_io.hpp"

namespace dorl {

namespace fs = std::filesystem;
using nlohmann::json;

void DomainSpec::validate() const {
    if (id.empty()) throw ConfigError("domain spec: empty id");
    for (double t : {tint_r, tint_g, tint_b})
        if (t < 0.0 || t > 1.0) throw ConfigError("domain " + id + ": tint channels must lie in [0,1]");
    for (double p : {artifacts.p_scale_bar, artifacts.p_smudge, artifacts.p_vignette})
        if (p < 0.0 || p > 1.0) throw ConfigError("domain " + id + ": artifact probabilities must lie in [0,1]");
    if (noise_sigma < 0.0) throw ConfigError("domain " + id + ": negative noise sigma");
}

void ClassSpec::validate() const {
    if (name.empty()) throw ConfigError("class spec: empty name");
    if (radius_min <= 0.0 || radius_max < radius_min || radius_max > 90.0)
        throw ConfigError("class " + name + ": radius range must satisfy 0 < min <= max <= 90");
    if (lobes < 1 || lobes > 6) throw ConfigError("class " + name + ": lobe count must lie in [1,6]");
    if (nucleus_ratio <= 0.0 || nucleus_ratio > 0.9)
        throw ConfigError("class " + name + ": nucleus ratio must lie in (0, 0.9]");
    if (eccentricity < 0.0 || eccentricity >= 1.0)
        throw ConfigError("class " + name + ": eccentricity must lie in [0, 1)");
}

namespace {

struct Geometry {
    double cx, cy, a, b, theta;
    double amp2, ph2, amp3, ph3;  // low-order boundary wobble
    struct Lobe {
        double x, y, r;
    };
    std::vector<Lobe> lobes;
};

// keyed only by (seed, class, sample index) -> identical across domains
Geometry sample_geometry(const ClassSpec& cls, uint64_t seed, int k) {
    Rng rng(seed, "geom." + cls.name, (uint64_t)k);
    Geometry g;
    g.cx = rng.uniform(92.0, 132.0);
    g.cy = rng.uniform(92.0, 132.0);
    double r = rng.uniform(cls.radius_min, cls.radius_max);
    g.a = r;
    g.b = r * std::sqrt(1.0 - cls.eccentricity * cls.eccentricity);
    g.theta = rng.uniform(0.0, 3.141592653589793);
    g.amp2 = rng.uniform(0.0, 0.06);
    g.ph2 = rng.uniform(0.0, 6.283185307179586);
    g.amp3 = rng.uniform(0.0, 0.05);
    g.ph3 = rng.uniform(0.0, 6.283185307179586);

    double lobe_r = std::sqrt(cls.nucleus_ratio * g.a * g.b / (double)cls.lobes);
    double reach = std::max(0.0, std::min(g.a, g.b) * 0.88 - lobe_r);
    for (int j = 0; j < cls.lobes; ++j) {
        double ang = rng.uniform(0.0, 6.283185307179586);
        double dist = rng.uniform(0.15, 1.0) * reach;
        // lobe center in the rotated ellipse frame, mapped back to image axes
        double u = dist * std::cos(ang), v = dist * std::sin(ang);
        g.lobes.push_back({g.cx + u * std::cos(g.theta) - v * std::sin(g.theta),
                           g.cy + u * std::sin(g.theta) + v * std::cos(g.theta), lobe_r});
    }
    return g;
}

inline uint8_t quantize(double v) {
    double c = std::clamp(v, 0.0, 1.0);
    return (uint8_t)std::lround(c * 255.0);
}

}  // namespace

Dataset gen_domain(const DomainSpec& domain, const std::vector<ClassSpec>& classes, int n_per_class, uint64_t seed) {
    domain.validate();
    if (classes.size() < 2) throw ConfigError("gen_domain: need at least 2 classes");
    if ((int)classes.size() > kMaxClasses)
        throw ConfigError("gen_domain: at most " + std::to_string(kMaxClasses) + " classes supported");
    if (n_per_class < 1) throw ConfigError("gen_domain: n_per_class must be >= 1");
    for (const auto& c : classes) c.validate();

    const int64_t hw = kImageSize;
    Dataset data;
    data.domain = domain.id;
    for (const auto& c : classes) data.class_names.push_back(c.name);

    for (size_t ci = 0; ci < classes.size(); ++ci) {
        const ClassSpec& cls = classes[ci];
        for (int k = 0; k < n_per_class; ++k) {
            Geometry g = sample_geometry(cls, seed, k);
            Rng render(seed, "render." + domain.id + "." + cls.name, (uint64_t)k);

            ImageSample s;
            s.height = s.width = hw;
            s.channels = 3;
            s.id = domain.id + "_" + cls.name + "_" + std::to_string(k);
            s.label = (int)ci;
            s.class_name = cls.name;
            s.domain = domain.id;
            s.mask.assign((size_t)(hw * hw), 0);

            std::vector<double> px((size_t)(hw * hw * 3));
            const double cos_t = std::cos(g.theta), sin_t = std::sin(g.theta);
            const double sh = domain.stain_shift;
            const double cyt[3] = {std::clamp(0.80 - sh, 0.0, 1.0), 0.62, std::clamp(0.72 + sh, 0.0, 1.0)};
            const double nuc[3] = {std::clamp(0.38 - sh, 0.0, 1.0), 0.22, std::clamp(0.52 + sh, 0.0, 1.0)};

            for (int64_t y = 0; y < hw; ++y) {
                for (int64_t x = 0; x < hw; ++x) {
                    const double ramp = 1.0 + domain.illumination * (double)x / (double)(hw - 1);
                    double* p = px.data() + (y * hw + x) * 3;
                    p[0] = domain.tint_r * ramp;
                    p[1] = domain.tint_g * ramp;
                    p[2] = domain.tint_b * ramp;

                    const double dx = (double)x - g.cx, dy = (double)y - g.cy;
                    const double u = (dx * cos_t + dy * sin_t) / g.a;
                    const double v = (-dx * sin_t + dy * cos_t) / g.b;
                    const double rho = std::sqrt(u * u + v * v);
                    const double phi = std::atan2(v, u);
                    const double boundary =
                        1.0 + g.amp2 * std::sin(2.0 * phi + g.ph2) + g.amp3 * std::sin(3.0 * phi + g.ph3);
                    if (rho <= boundary) {
                        s.mask[(size_t)(y * hw + x)] = 1;
                        const double shade = 1.0 - 0.18 * rho / boundary;  // mild radial shading
                        bool in_nucleus = false;
                        for (const auto& lb : g.lobes) {
                            const double lx = (double)x - lb.x, ly = (double)y - lb.y;
                            if (lx * lx + ly * ly <= lb.r * lb.r) {
                                in_nucleus = true;
                                break;
                            }
                        }
                        const double* col = in_nucleus ? nuc : cyt;
                        p[0] = col[0] * shade;
                        p[1] = col[1] * shade;
                        p[2] = col[2] * shade;
                    }
                }
            }

            // artifacts, strictly outside the mask
            const bool vignette = render.uniform() < domain.artifacts.p_vignette;
            const bool scale_bar = render.uniform() < domain.artifacts.p_scale_bar;
            const bool smudge = render.uniform() < domain.artifacts.p_smudge;
            const double bar_x0 = render.uniform(20.0, 120.0);
            const double sm_x = render.uniform(30.0, 194.0), sm_y = render.uniform(30.0, 194.0);
            const double sm_r = render.uniform(16.0, 36.0);
            if (vignette || scale_bar || smudge) {
                for (int64_t y = 0; y < hw; ++y)
                    for (int64_t x = 0; x < hw; ++x) {
                        if (s.mask[(size_t)(y * hw + x)]) continue;
                        double* p = px.data() + (y * hw + x) * 3;
                        if (vignette) {
                            double edge = std::min(std::min((double)x, (double)(hw - 1 - x)),
                                                   std::min((double)y, (double)(hw - 1 - y)));
                            double f = std::clamp(edge / 30.0, 0.0, 1.0);
                            double gdim = 0.45 + 0.55 * f;
                            p[0] *= gdim;
                            p[1] *= gdim;
                            p[2] *= gdim;
                        }
                        if (scale_bar && y >= 200 && y < 208 && x >= (int64_t)bar_x0 && x < (int64_t)bar_x0 + 80) {
                            p[0] = p[1] = p[2] = 0.08;
                        }
                        if (smudge) {
                            double dxs = (double)x - sm_x, dys = (double)y - sm_y;
                            double dist = std::sqrt(dxs * dxs + dys * dys);
                            if (dist < sm_r) {
                                double f = 0.5 + 0.5 * (dist / sm_r);
                                p[0] *= f;
                                p[1] *= f;
                                p[2] *= f;
                            }
                        }
                    }
            }

            s.pixels.resize(px.size());
            if (domain.noise_sigma > 0.0) {
                for (size_t i = 0; i < px.size(); ++i)
                    s.pixels[i] = quantize(px[i] + domain.noise_sigma * render.gaussian());
            } else {
                for (size_t i = 0; i < px.size(); ++i) s.pixels[i] = quantize(px[i]);
            }
            data.samples.push_back(std::move(s));
        }
    }
    return data;
}

std::vector<uint64_t> grayscale_histogram(const Dataset& data, int bins) {
    if (bins < 2) throw ConfigError("grayscale_histogram: bins must be >= 2");
    if (data.samples.empty()) throw DataError("grayscale_histogram: empty dataset");
    std::vector<uint64_t> counts((size_t)bins, 0);
    for (const auto& s : data.samples) {
        const int64_t n = s.height * s.width;
        for (int64_t i = 0; i < n; ++i) {
            double lum;
            if (s.channels == 3) {
                const uint8_t* p = s.pixels.data() + i * 3;
                lum = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
            } else {
                lum = s.pixels[(size_t)i];
            }
            int bin = (int)(lum * (double)bins / 256.0);
            counts[(size_t)std::min(bin, bins - 1)] += 1;
        }
    }
    return counts;
}

double histogram_mean(const std::vector<uint64_t>& counts) {
    uint64_t total = 0;
    double weighted = 0;
    for (size_t i = 0; i < counts.size(); ++i) {
        total += counts[i];
        weighted += (double)i * (double)counts[i];
    }
    if (total == 0) throw DataError("histogram_mean: empty histogram");
    return weighted / (double)total;
}

void save_dataset(const Dataset& data, const std::string& path) {
    fs::create_directories(fs::path(path) / "images");
    fs::create_directories(fs::path(path) / "masks");
    std::ofstream manifest(fs::path(path) / "manifest.jsonl", std::ios::trunc);
    if (!manifest) throw DataError("save_dataset: cannot write manifest in " + path);

    for (const auto& s : data.samples) {
        std::string img_rel = "images/" + s.id + ".png";
        write_png((fs::path(path) / img_rel).string(), s.pixels.data(), s.width, s.height, s.channels);
        json rec = {{"id", s.id},       {"label", s.label},   {"class_name", s.class_name},
                    {"domain", s.domain}, {"image", img_rel}};
        if (s.has_mask()) {
            std::string mask_rel = "masks/" + s.id + ".png";
            std::vector<uint8_t> m(s.mask.size());
            for (size_t i = 0; i < m.size(); ++i) m[i] = s.mask[i] ? 255 : 0;
            write_png((fs::path(path) / mask_rel).string(), m.data(), s.width, s.height, 1);
            rec["mask"] = mask_rel;
        }
        manifest << rec.dump() << "\n";
    }
    if (!manifest) throw DataError("save_dataset: manifest write failed in " + path);
}

Dataset load_dataset(const std::string& path) {
    std::ifstream manifest(fs::path(path) / "manifest.jsonl");
    if (!manifest) throw DataError("load_dataset: no manifest.jsonl in " + path);

    Dataset data;
    std::string line;
    int line_no = 0;
    while (std::getline(manifest, line)) {
        ++line_no;
        if (line.empty()) continue;
        auto fail = [&](const std::string& why) {
            throw DataError("manifest.jsonl line " + std::to_string(line_no) + ": " + why);
        };
        json rec;
        try {
            rec = json::parse(line);
        } catch (const json::exception& e) {
            fail(std::string("invalid JSON (") + e.what() + ")");
        }
        if (!rec.is_object()) fail("record is not an object");
        for (const char* field : {"id", "label", "class_name", "domain", "image"})
            if (!rec.contains(field)) fail(std::string("missing field '") + field + "'");
        if (!rec["label"].is_number_integer()) fail("label must be an integer class id");

        ImageSample s;
        s.id = rec["id"].get<std::string>();
        s.label = rec["label"].get<int>();
        s.class_name = rec["class_name"].get<std::string>();
        s.domain = rec["domain"].get<std::string>();
        if (s.label < 0 || s.label >= kMaxClasses) fail("label " + std::to_string(s.label) + " out of range");

        PngImage img = read_png((fs::path(path) / rec["image"].get<std::string>()).string());
        s.width = img.width;
        s.height = img.height;
        s.channels = img.channels;
        s.pixels = std::move(img.data);

        if (rec.contains("mask") && !rec["mask"].is_null()) {
            PngImage m = read_png((fs::path(path) / rec["mask"].get<std::string>()).string());
            if (m.width != s.width || m.height != s.height || m.channels != 1)
                fail("mask geometry does not match the image");
            s.mask.resize(m.data.size());
            for (size_t i = 0; i < m.data.size(); ++i) s.mask[i] = m.data[i] > 127 ? 1 : 0;
        }

        if ((size_t)s.label >= data.class_names.size()) data.class_names.resize((size_t)s.label + 1);
        if (data.class_names[(size_t)s.label].empty())
            data.class_names[(size_t)s.label] = s.class_name;
        else if (data.class_names[(size_t)s.label] != s.class_name)
            fail("class name '" + s.class_name + "' conflicts with earlier records for label " +
                 std::to_string(s.label));
        if (data.domain.empty()) data.domain = s.domain;
        data.samples.push_back(std::move(s));
    }
    if (data.samples.empty()) throw DataError("load_dataset: manifest has no records in " + path);
    return data;
}

std::vector<DomainSpec> default_domains() {
    std::vector<DomainSpec> d(3);
    d[0].id = "alpha";
    d[0].tint_r = 0.86;
    d[0].tint_g = 0.82;
    d[0].tint_b = 0.88;
    d[0].noise_sigma = 0.01;

    d[1].id = "beta";
    d[1].tint_r = 0.78;
    d[1].tint_g = 0.80;
    d[1].tint_b = 0.74;
    d[1].illumination = 0.10;
    d[1].stain_shift = 0.05;
    d[1].noise_sigma = 0.02;
    d[1].artifacts.p_scale_bar = 0.9;
    d[1].artifacts.p_vignette = 0.8;

    d[2].id = "gamma";
    d[2].tint_r = 0.70;
    d[2].tint_g = 0.66;
    d[2].tint_b = 0.60;
    d[2].illumination = -0.15;
    d[2].stain_shift = -0.05;
    d[2].noise_sigma = 0.02;
    d[2].artifacts.p_smudge = 0.95;
    d[2].artifacts.p_vignette = 0.5;
    return d;
}

std::vector<ClassSpec> default_classes(int n_classes) {
    if (n_classes < 2 || n_classes > kMaxClasses) throw ConfigError("default_classes: count out of range");
    std::vector<ClassSpec> out;
    for (int i = 0; i < n_classes; ++i) {
        ClassSpec c;
        c.id = i;
        c.name = "c" + std::to_string(i);
        // radius/nucleus cycle with period 8; combined with the lobe (4) and
        // eccentricity (3) cycles every class up to kMaxClasses is distinct
        c.radius_min = 40.0 + 5.0 * (double)(i % 8);
        c.radius_max = c.radius_min + 8.0;
        c.lobes = 1 + i % 4;
        c.nucleus_ratio = 0.15 + 0.08 * (double)(i % 8);
        c.eccentricity = 0.15 * (double)(i % 3);
        out.push_back(std::move(c));
    }
    return out;
}

}  // namespace dorl

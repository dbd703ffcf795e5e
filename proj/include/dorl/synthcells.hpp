#pragma once

// Deterministic multi-domain synthetic cell-image benchmark. Class geometry
// (cell shape, nucleus lobes) is keyed only by (seed, class, sample index),
// so it is identical across domains; domains differ in background tint,
// illumination, stain shift, noise, and artifacts. Artifacts are painted only
// where the mask is 0, which is the property the pipeline is built to exploit.

#include <cstdint>
#include <string>
#include <vector>

#include "dorl/dataset.hpp"

namespace dorl {

struct ArtifactSpec {
    double p_scale_bar = 0.0;  // dark measurement bar near the bottom edge
    double p_smudge = 0.0;     // soft dark blob
    double p_vignette = 0.0;   // darkened border frame
};

struct DomainSpec {
    std::string id;
    double tint_r = 0.5, tint_g = 0.5, tint_b = 0.5;  // background tint [0,1]
    double illumination = 0.0;  // horizontal brightening ramp, 0 = flat
    double stain_shift = 0.0;   // shifts cell/nucleus coloring between channels
    double noise_sigma = 0.0;
    ArtifactSpec artifacts;

    void validate() const;
};

struct ClassSpec {
    int id = 0;
    std::string name;
    double radius_min = 50.0, radius_max = 70.0;  // pixels
    int lobes = 1;                                // nucleus lobe count
    double nucleus_ratio = 0.3;                   // nucleus/cell area ratio
    double eccentricity = 0.0;                    // in [0, 1)

    void validate() const;
};

constexpr int64_t kImageSize = 224;
constexpr int kMaxClasses = 13;

Dataset gen_domain(const DomainSpec& domain, const std::vector<ClassSpec>& classes, int n_per_class, uint64_t seed);

// Rec.601 luminance histogram over all images; counts sum to the pixel count
std::vector<uint64_t> grayscale_histogram(const Dataset& data, int bins = 256);

double histogram_mean(const std::vector<uint64_t>& counts);

// directory layout: manifest.jsonl + images/*.png + masks/*.png
void save_dataset(const Dataset& data, const std::string& path);
Dataset load_dataset(const std::string& path);

// the default benchmark: 3 domains x 8 classes
std::vector<DomainSpec> default_domains();
std::vector<ClassSpec> default_classes(int n_classes = 8);

}  // namespace dorl

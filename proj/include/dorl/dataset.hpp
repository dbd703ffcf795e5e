#pragma once

#include <optional>
#include <string>
#include <vector>

#include "dorl/tensor.hpp"

namespace dorl {

// One image with optional ground-truth mask. Pixels are kept as 8-bit
// (matching the on-disk PNG exactly) and normalized to [0,1] on demand.
struct ImageSample {
    int64_t height = 224, width = 224, channels = 3;
    std::vector<uint8_t> pixels;  // HWC
    std::vector<uint8_t> mask;    // H*W, values 0/1; empty = no annotation
    int label = 0;
    std::string class_name;
    std::string id;
    std::string domain;

    bool has_mask() const { return !mask.empty(); }

    template <typename T>
    TensorData<T> pixels_tensor() const {
        TensorData<T> t({height, width, channels});
        for (size_t i = 0; i < pixels.size(); ++i) t[(int64_t)i] = (T)(pixels[i] / 255.0);
        return t;
    }

    template <typename T>
    TensorData<T> mask_tensor() const {
        if (!has_mask()) throw DataError("sample " + id + " has no mask");
        TensorData<T> t({height, width});
        for (size_t i = 0; i < mask.size(); ++i) t[(int64_t)i] = (T)(mask[i] ? 1 : 0);
        return t;
    }
};

struct Dataset {
    std::string domain;
    std::vector<std::string> class_names;
    std::vector<ImageSample> samples;

    size_t size() const { return samples.size(); }
};

}  // namespace dorl

#pragma once

// Minimal 8-bit PNG I/O on top of libpng: RGB or grayscale, no interlacing.

#include <cstdint>
#include <string>
#include <vector>

#include "dorl/common.hpp"

namespace dorl {

struct PngImage {
    int64_t width = 0, height = 0, channels = 0;  // channels: 1 or 3
    std::vector<uint8_t> data;                    // row-major, interleaved
};

// channels must be 1 (gray) or 3 (RGB)
void write_png(const std::string& path, const uint8_t* data, int64_t width, int64_t height, int64_t channels);

// any PNG is normalized to 8-bit gray or RGB (palette expanded, alpha dropped)
PngImage read_png(const std::string& path);

}  // namespace dorl

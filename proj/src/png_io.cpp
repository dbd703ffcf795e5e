#include "dorl/png_io.hpp"

#include <png.h>

#include <cstdio>
#include <memory>

namespace dorl {

namespace {

struct FileCloser {
    void operator()(FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

}  // namespace

void write_png(const std::string& path, const uint8_t* data, int64_t width, int64_t height, int64_t channels) {
    if (channels != 1 && channels != 3) throw ConfigError("write_png: channels must be 1 or 3");
    if (width < 1 || height < 1) throw ConfigError("write_png: empty image");
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) throw DataError("write_png: cannot open " + path);

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw DataError("write_png: libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw DataError("write_png: encode failed for " + path);
    }
    png_init_io(png, f.get());
    png_set_IHDR(png, info, (png_uint_32)width, (png_uint_32)height, 8,
                 channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int64_t y = 0; y < height; ++y)
        png_write_row(png, const_cast<png_bytep>(data + y * width * channels));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

PngImage read_png(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw DataError("read_png: cannot open " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError("read_png: libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError("read_png: corrupt PNG: " + path);
    }
    png_init_io(png, f.get());
    png_read_info(png, info);

    png_set_expand(png);           // palette/low-bit-depth to 8-bit
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);

    PngImage img;
    img.width = png_get_image_width(png, info);
    img.height = png_get_image_height(png, info);
    img.channels = png_get_channels(png, info);
    if (img.channels != 1 && img.channels != 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError("read_png: unsupported channel count in " + path);
    }
    img.data.resize((size_t)(img.width * img.height * img.channels));
    for (int64_t y = 0; y < img.height; ++y)
        png_read_row(png, img.data.data() + y * img.width * img.channels, nullptr);
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

}  // namespace dorl

#include "r2bd/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "r2bd/error.hpp"

namespace r2bd {

Rgb8 to_rgb8(const Tensor& image) {
    require(image.ndim() == 3 && image.dim(0) == 3, "image must be (3, H, W), got " + shape_string(image.shape()));
    Rgb8 r;
    r.height = image.dim(1);
    r.width = image.dim(2);
    r.pixels.resize(static_cast<std::size_t>(r.width) * r.height * 3);
    const std::size_t plane = static_cast<std::size_t>(r.width) * r.height;
    for (int c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < plane; ++i) {
            const double v = std::round((image[c * plane + i] + 1.0) * 127.5);
            r.pixels[i * 3 + c] = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
        }
    return r;
}

Tensor from_rgb8(const Rgb8& raster) {
    Tensor t(Shape{3, raster.height, raster.width});
    const std::size_t plane = static_cast<std::size_t>(raster.width) * raster.height;
    for (int c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < plane; ++i) t[c * plane + i] = raster.pixels[i * 3 + c] / 127.5 - 1.0;
    return t;
}

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

void write_png(const std::filesystem::path& path, const Tensor& image) {
    const Rgb8 r = to_rgb8(image);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    require(fp != nullptr, "cannot write " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw ValidationError("libpng failed writing " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_compression_level(png, 6);
    png_set_IHDR(png, info, static_cast<png_uint_32>(r.width), static_cast<png_uint_32>(r.height), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < r.height; ++y) {
        png_write_row(png, const_cast<png_bytep>(r.pixels.data() + static_cast<std::size_t>(y) * r.width * 3));
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Tensor read_png(const std::filesystem::path& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    require(fp != nullptr, "cannot open " + path.string());
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    Rgb8 r;
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw ValidationError("libpng failed reading " + path.string());
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);
    const png_byte color = png_get_color_type(png, info);
    const png_byte depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);
    r.width = static_cast<int>(png_get_image_width(png, info));
    r.height = static_cast<int>(png_get_image_height(png, info));
    r.pixels.resize(static_cast<std::size_t>(r.width) * r.height * 3);
    for (int y = 0; y < r.height; ++y) png_read_row(png, r.pixels.data() + static_cast<std::size_t>(y) * r.width * 3, nullptr);
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return from_rgb8(r);
}

void validate_image(const Tensor& image, int height, int width) {
    require(image.shape() == Shape({3, height, width}), "image shape " + shape_string(image.shape()) +
                                                            " does not match configured geometry (3, " +
                                                            std::to_string(height) + ", " + std::to_string(width) + ")");
    for (double v : image.storage()) require(std::isfinite(v) && v >= -1.0 - 1e-6 && v <= 1.0 + 1e-6, "image value outside [-1, 1]");
}

}  // namespace r2bd

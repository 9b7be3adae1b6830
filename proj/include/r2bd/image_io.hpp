#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "r2bd/tensor.hpp"

namespace r2bd {

/// Interleaved 8-bit RGB raster.
struct Rgb8 {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> pixels;  // height * width * 3
};

/// (3, H, W) in [-1, 1] -> 8-bit, rounding to nearest and clamping.
Rgb8 to_rgb8(const Tensor& image);
/// 8-bit -> (3, H, W) in [-1, 1].
Tensor from_rgb8(const Rgb8& raster);

void write_png(const std::filesystem::path& path, const Tensor& image);
Tensor read_png(const std::filesystem::path& path);

/// Throws ValidationError unless `image` is (3, H, W) with entries in [-1, 1] +- 1e-6.
void validate_image(const Tensor& image, int height, int width);

}  // namespace r2bd

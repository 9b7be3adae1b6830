#pragma once

#include <filesystem>

#include "r2bd/tensor.hpp"

namespace r2bd {

/// Shape-tagged binary array file:
///   bytes 0-3  magic "R2BA"
///   byte  4    format version (1)
///   byte  5    endianness tag, 'L' (little-endian payload)
///   byte  6    dtype tag, 'f' (IEEE-754 float32)
///   byte  7    reserved (0)
///   u32        rank, then rank x u32 dimensions
///   payload    row-major float32 values
void write_array_f32(const std::filesystem::path& path, const Tensor& t);
Tensor read_array_f32(const std::filesystem::path& path);

/// Content hash (FNV-1a 64, hex) of a file's bytes.
std::string file_hash(const std::filesystem::path& path);

}  // namespace r2bd

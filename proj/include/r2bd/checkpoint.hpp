#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "r2bd/tensor.hpp"

namespace r2bd {

inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

/// Versioned parameter container: a kind tag, the resolved configuration that produced the
/// parameters, and named float64 arrays. Serialized little-endian; save/load round-trips bitwise.
struct Checkpoint {
    std::string kind;
    nlohmann::json config = nlohmann::json::object();
    std::vector<std::pair<std::string, Tensor>> arrays;

    const Tensor& array(const std::string& name) const;
    bool has(const std::string& name) const;
    /// Arrays whose names start with `prefix.`, with the prefix stripped.
    std::vector<std::pair<std::string, Tensor>> group(const std::string& prefix) const;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace r2bd
